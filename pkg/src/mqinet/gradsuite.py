"""Finite-difference gradient suites over kernels, blocks and the whole model.

Every case is a pair ``(f, xs)`` where ``f(xs)`` is a scalar tensor and
``xs`` lists the float64 tensors to perturb.  Tensor-valued functions are
reduced with a fixed random probe ``sum(out * w)``.

The relative error is taken per coordinate with a tiny floor, so a
coordinate whose true gradient happens to sit near zero is dominated by
central-difference roundoff.  Inputs and probes are therefore drawn away from
degenerate points: probe weights have bounded magnitude, pooled features
have a nonzero mean, and query bases are redrawn at unit scale.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import ops
from .cdqb import CDQB
from .cmia import CMIA, StereoFeatures
from .gradcheck import finite_diff_check
from .network import MQINet, ModelConfig, l1_loss
from .physics import IPA, ipa_forward
from .tensor import Tensor

TOLERANCE = 1e-4
SEEDS = (0, 1, 2)


def _rand(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), dtype=np.float64)


def _probe_weights(rng, shape) -> Tensor:
    # random signs with magnitudes bounded away from zero, so the probe never
    # makes an output cotangent vanish by chance
    return Tensor(rng.choice([-1.0, 1.0], shape) * rng.uniform(0.5, 1.5, shape))


def _probed(rng, f: Callable, xs: list):
    w = _probe_weights(rng, f(xs).shape)
    return (lambda ts: ops.sum_all(ops.mul(f(ts), w))), xs


def kernel_cases(rng) -> dict:
    x4 = _rand(rng, 2, 6, 5, 4)
    k, b6 = _rand(rng, 6, 3, 3), _rand(rng, 6)
    raw = {
        "add": (lambda xs: ops.add(*xs), [x4, _rand(rng, 1, 6, 1, 1)]),
        "sub": (lambda xs: ops.sub(*xs), [x4, _rand(rng, 2, 6, 5, 4)]),
        "mul": (lambda xs: ops.mul(*xs), [x4, _rand(rng, 2, 6, 1, 4)]),
        "scale": (lambda xs: ops.scale(xs[0], -1.7), [x4]),
        "add_scalar": (lambda xs: ops.add_scalar(xs[0], 0.3), [x4]),
        "absolute": (lambda xs: ops.absolute(xs[0]), [x4]),
        "matmul": (lambda xs: ops.matmul(*xs), [_rand(rng, 2, 3, 4), _rand(rng, 2, 4, 5)]),
        "reshape": (lambda xs: ops.reshape(xs[0], (2, 6, 20)), [x4]),
        "permute": (lambda xs: ops.permute(xs[0], (3, 1, 0, 2)), [x4]),
        "transpose_last": (lambda xs: ops.transpose_last(xs[0]), [x4]),
        "slice": (lambda xs: ops.slice_axis(xs[0], 2, 1, 4), [x4]),
        "split": (lambda xs: ops.split_channels(xs[0], 3)[1], [x4]),
        "concat": (lambda xs: ops.concat(xs, axis=1), [_rand(rng, 1, 2, 3, 3), _rand(rng, 1, 4, 3, 3)]),
        "dwconv": (lambda xs: ops.depthwise_conv2d(*xs), [x4, k, b6]),
        "conv2d": (lambda xs: ops.conv2d(*xs), [_rand(rng, 2, 3, 4, 5), _rand(rng, 2, 3, 3, 3), _rand(rng, 2)]),
        "pwconv": (lambda xs: ops.pointwise_conv2d(*xs), [x4, _rand(rng, 3, 6), _rand(rng, 3)]),
        "linear": (lambda xs: ops.linear(*xs), [_rand(rng, 3, 4), _rand(rng, 2, 4), _rand(rng, 2)]),
        "sigmoid": (lambda xs: ops.sigmoid(xs[0]), [x4]),
        "gelu": (lambda xs: ops.gelu(xs[0]), [x4]),
        "softmax": (lambda xs: ops.softmax_lastdim(xs[0]), [x4]),
        "gap": (lambda xs: ops.global_avg_pool(xs[0]), [x4]),
        "resize_up": (lambda xs: ops.bilinear_resize(xs[0], 7, 9), [x4]),
        "resize_down": (lambda xs: ops.bilinear_resize(xs[0], 3, 2), [x4]),
        "sum": (lambda xs: ops.sum_all(xs[0]), [x4]),
        "mean": (lambda xs: ops.mean_all(xs[0]), [x4]),
    }
    return {name: _probed(rng, f, xs) for name, (f, xs) in raw.items()}


def block_cases(rng, seed: int) -> dict:
    ipa = IPA(np.random.default_rng(seed), 4).astype(np.float64)
    img = Tensor(rng.uniform(0, 1, (1, 3, 5, 5)))
    f_ipa, _ = _probed(rng, lambda ts: ipa_forward(img, ipa), [])

    block = CDQB(np.random.default_rng(seed), 8, 4).astype(np.float64)
    # the 0.02 query init shrinks every query-path gradient; check at a generic point
    qs = block.queries
    for q in (qs.q_hw_base, qs.q_ch_base, qs.q_cw_base):
        q.data[:] = rng.standard_normal(q.shape)
    # offset so the channel gate does not pool zero-mean noise to ~0
    x = Tensor(rng.standard_normal((1, 8, 5, 6)) + 1.0)
    f_cdqb, _ = _probed(rng, lambda ts: block(x), [])

    cmia = CMIA(np.random.default_rng(seed), 12).astype(np.float64)
    # features at a typical post-conv scale; unit-scale inputs leave the
    # softmax near uniform and push some gradients to the noise floor; the
    # offset keeps the pooled channel gate away from zero
    left = Tensor(rng.standard_normal((1, 12, 4, 3)) * 3.0 + 1.0)
    right = Tensor(rng.standard_normal((1, 12, 4, 3)) * 3.0 + 1.0)
    wl = _probe_weights(rng, left.shape)
    wr = _probe_weights(rng, right.shape)

    def f_cmia(_):
        out = cmia(StereoFeatures(left, right))
        return ops.add(ops.sum_all(ops.mul(out.left, wl)), ops.sum_all(ops.mul(out.right, wr)))

    return {
        "ipa_forward/params": (f_ipa, ipa.parameters()),
        "ipa_forward/input": (lambda ts: f_ipa(ts), [img]),
        "cdqb_forward/params": (f_cdqb, block.parameters()),
        "cdqb_forward/input": (lambda ts: f_cdqb(ts), [x]),
        "cmia_forward/params": (f_cmia, cmia.parameters()),
        "cmia_forward/inputs": (f_cmia, [left, right]),
    }


def model_case(rng, seed: int) -> tuple:
    """L1 loss of a (C=12, N=1) model on 8x8 views, against both input views."""
    model = MQINet(ModelConfig(channels=12, stages=1, seed=seed)).astype(np.float64)
    left, right, gt_l, gt_r = (Tensor(rng.uniform(0, 1, (1, 3, 8, 8))) for _ in range(4))
    return (lambda v: l1_loss(*model(*v), gt_l, gt_r)), [left, right]


def _group_cases(group: str, seed: int) -> dict:
    # each group draws from its own stream so selecting groups never shifts another
    if group == "kernels":
        return kernel_cases(np.random.default_rng((seed, 0)))
    if group == "blocks":
        return block_cases(np.random.default_rng((seed, 1)), seed)
    if group == "model":
        return {"model_loss/views": model_case(np.random.default_rng((seed, 2)), seed)}
    raise ValueError(f"unknown group {group!r}")


def case(name: str, seed: int) -> tuple:
    """Look up one ``(f, xs)`` case by name, e.g. ``"gelu"`` or ``"cdqb_forward/params"``."""
    for group in ("kernels", "blocks", "model"):
        cases = _group_cases(group, seed)
        if name in cases:
            return cases[name]
    raise KeyError(name)


def case_names(group: str) -> list:
    return list(_group_cases(group, 0))


def run_suite(seeds=SEEDS, full: bool = False) -> list:
    """Return ``(case, seed, max relative error)`` for kernels and blocks, plus the model if ``full``."""
    groups = ("kernels", "blocks", "model") if full else ("kernels", "blocks")
    results = []
    for seed in seeds:
        for group in groups:
            for name, (f, xs) in _group_cases(group, seed).items():
                results.append((name, seed, finite_diff_check(f, xs)))
    return results
