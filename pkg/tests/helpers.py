import numpy as np

from mqinet import ops
from mqinet.tensor import Tensor


def rand(rng, *shape, dtype=np.float64):
    return Tensor(rng.standard_normal(shape), dtype=dtype)


def probe(out, weights):
    """sum(out * weights): a scalar view of a tensor-valued function for gradient checks."""
    return ops.sum_all(ops.mul(out, Tensor(weights)))


def to_f64(module):
    return module.astype(np.float64)
