"""Stereo image deraining with dimension-wise queries and cross-view attention."""

from .tensor import Parameter, Tape, Tensor, backward
from .network import MQINet, ModelConfig, mqinet_forward

__all__ = ["Tensor", "Parameter", "Tape", "backward", "MQINet", "ModelConfig", "mqinet_forward"]
__version__ = "0.1.0"
