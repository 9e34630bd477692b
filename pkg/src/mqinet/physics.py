"""Rain image formation, its inverse, and the physics-aware shallow extractor.

The forward model blends the scene with rain and airlight through a
transmission field ``alpha``::

    O = alpha * (B + S) + (1 - alpha) * A

and the inverse uses ``T = 1 / alpha``::

    B = T * O - S + (1 - T) * A

:class:`PhysicsAttention` mirrors the inverse in feature space, with learned
stand-ins for each term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn, ops
from .tensor import Tensor

ALPHA_MIN = 0.1


@dataclass
class RainScene:
    background: np.ndarray  # (3,H,W) in [0,1]
    rain: np.ndarray        # (3,H,W) >= 0
    alpha: np.ndarray       # (1,H,W) in [ALPHA_MIN, 1]
    airlight: float         # in [0.7, 1.0]

    def __post_init__(self):
        if self.rain.shape != self.background.shape:
            raise ValueError(f"rain {self.rain.shape} vs background {self.background.shape}")
        if self.alpha.ndim != 3 or self.alpha.shape[0] != 1 or self.alpha.shape[1:] != self.background.shape[1:]:
            raise ValueError(f"alpha must be (1,H,W) matching background, got {self.alpha.shape}")


def synthesize_rainy(scene: RainScene) -> np.ndarray:
    """Raw (unclamped) rainy observation of ``scene``."""
    a = scene.alpha
    return a * (scene.background + scene.rain) + (1 - a) * scene.airlight


def invert_rainy(observed: np.ndarray, rain: np.ndarray, alpha: np.ndarray, airlight: float) -> np.ndarray:
    """Recover the background given rain, transmission and airlight."""
    if observed.shape != rain.shape:
        raise ValueError(f"observation {observed.shape} vs rain {rain.shape}")
    if np.min(alpha) < ALPHA_MIN:
        raise ValueError(f"alpha below {ALPHA_MIN} makes 1/alpha blow up")
    t = 1 / alpha
    return t * observed - rain + (1 - t) * airlight


@dataclass
class IpaActivations:
    o_t: Tensor
    t_t: Tensor
    s_t: Tensor
    a_t: Tensor  # (B,C) gate, broadcast over H,W when combined
    b_t: Tensor


class PhysicsAttention(nn.Module):
    """Learned inverse rain model on shallow features.

    ``features`` is the output of the shallow 3x3 conv (the observation
    estimate).  The airlight gate comes from pooled features through a
    channel MLP, the transmission gate from a depthwise conv followed by a
    per-pixel MLP, and the rain estimate from a second depthwise conv.
    """

    def __init__(self, rng, channels: int):
        self.airlight_mlp = nn.ChannelMLP(rng, channels)
        self.trans_dwc = nn.DepthwiseConv(rng, channels)
        self.trans_mlp = nn.PixelMLP(rng, channels, max(1, channels // 2))
        self.rain_dwc = nn.DepthwiseConv(rng, channels)

    def activations(self, features: Tensor) -> IpaActivations:
        B, C = features.shape[:2]
        a_t = ops.sigmoid(self.airlight_mlp(ops.global_avg_pool(features)))
        t_t = ops.sigmoid(self.trans_mlp(self.trans_dwc(features)))
        s_t = self.rain_dwc(features)
        a_map = ops.reshape(a_t, (B, C, 1, 1))
        # (1 - T) * A with A broadcast over H,W
        b_t = t_t * features - s_t + (1.0 - t_t) * a_map
        return IpaActivations(features, t_t, s_t, a_t, b_t)

    def __call__(self, features: Tensor) -> Tensor:
        return self.activations(features).b_t


class IPA(nn.Module):
    """Shallow conv plus :class:`PhysicsAttention`, image in, features out."""

    def __init__(self, rng, channels: int, in_channels: int = 3):
        self.shallow = nn.Conv3x3(rng, in_channels, channels)
        self.attention = PhysicsAttention(rng, channels)

    def __call__(self, img: Tensor) -> Tensor:
        return self.attention(self.shallow(img))


def ipa_forward(img: Tensor, params: IPA) -> Tensor:
    if img.ndim != 4 or img.shape[1] != params.shallow.weight.shape[1]:
        raise ValueError(f"IPA expects (B,{params.shallow.weight.shape[1]},H,W), got {img.shape}")
    return params(img)
