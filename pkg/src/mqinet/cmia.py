"""Cross-view multi-dimension interacting attention.

Shared pointwise projections produce a query and a value map for each view.
Both are split into channel thirds: the first third attends along height,
the second along width, the third goes through a shared selective-kernel
channel gate.  With ``A = softmax(q_l q_r^T / sqrt(d))``::

    x_l_axis = A   @ v_l
    x_r_axis = A^T @ v_r

and the outputs are fused residually, crossing streams::

    left_out  = left  + concat(x_r_h, x_r_w, x_r_c)
    right_out = right + concat(x_l_h, x_l_w, x_l_c)

``swap=True`` keeps each view's own features instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import nn, ops
from .tensor import Tensor

# (B,c,H,W) -> (B, L, c, Lother) for each attention axis, and its inverse
_TO_ROWS = {"h": (0, 2, 1, 3), "w": (0, 3, 1, 2)}
_FROM_ROWS = {"h": (0, 2, 1, 3), "w": (0, 2, 3, 1)}


@dataclass
class StereoFeatures:
    left: Tensor
    right: Tensor

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ValueError(f"view shapes differ: {self.left.shape} vs {self.right.shape}")


def _rows(x: Tensor, axis: str) -> Tensor:
    B, c, H, W = x.shape
    L, other = (H, W) if axis == "h" else (W, H)
    return ops.reshape(ops.permute(x, _TO_ROWS[axis]), (B, L, c * other))


def _unrows(r: Tensor, axis: str, shape: tuple) -> Tensor:
    B, c, H, W = shape
    L, other = (H, W) if axis == "h" else (W, H)
    return ops.permute(ops.reshape(r, (B, L, c, other)), _FROM_ROWS[axis])


def attention_map(axis: str, q_l: Tensor, q_r: Tensor) -> Tensor:
    """Row-stochastic (B, L, L) map between the two views along ``axis``."""
    if axis not in _TO_ROWS:
        raise ValueError(f"axis must be 'h' or 'w', got {axis!r}")
    if q_l.shape != q_r.shape:
        raise ValueError(f"view shapes differ: {q_l.shape} vs {q_r.shape}")
    ql, qr = _rows(q_l, axis), _rows(q_r, axis)
    scores = ops.matmul(ql, ops.transpose_last(qr)) * (1.0 / math.sqrt(ql.shape[2]))
    return ops.softmax_lastdim(scores)


def axis_attention(axis: str, q_l: Tensor, q_r: Tensor, v_l: Tensor, v_r: Tensor):
    if v_l.shape != q_l.shape or v_r.shape != q_r.shape:
        raise ValueError("query/value shapes differ")
    a = attention_map(axis, q_l, q_r)
    x_l = ops.matmul(a, _rows(v_l, axis))
    x_r = ops.matmul(ops.transpose_last(a), _rows(v_r, axis))
    return _unrows(x_l, axis, v_l.shape), _unrows(x_r, axis, v_r.shape)


def channel_sk(q_lc: Tensor, q_rc: Tensor, v_lc: Tensor, v_rc: Tensor, mlp: nn.ChannelMLP):
    """One channel gate from both views' pooled queries, applied to both values."""
    gate = nn.channel_gate(mlp, ops.global_avg_pool(q_lc + q_rc))
    return v_lc * gate, v_rc * gate


class CMIA(nn.Module):
    def __init__(self, rng, channels: int, swap: bool = False):
        if channels % 3:
            raise ValueError(f"CMIA needs channels divisible by 3, got {channels}")
        self.swap = swap
        self.proj_q = nn.Pointwise(rng, channels, channels)
        self.proj_v = nn.Pointwise(rng, channels, channels)
        self.sk_mlp = nn.ChannelMLP(rng, channels // 3)

    def __call__(self, s: StereoFeatures) -> StereoFeatures:
        return cmia_forward(s, self)


def cmia_forward(s: StereoFeatures, params: CMIA) -> StereoFeatures:
    C = s.left.shape[1]
    if C % 3:
        raise ValueError(f"CMIA needs channels divisible by 3, got {C}")
    q_l, q_r = params.proj_q(s.left), params.proj_q(s.right)
    v_l, v_r = params.proj_v(s.left), params.proj_v(s.right)
    ql_h, ql_w, ql_c = ops.split_channels(q_l, 3)
    qr_h, qr_w, qr_c = ops.split_channels(q_r, 3)
    vl_h, vl_w, vl_c = ops.split_channels(v_l, 3)
    vr_h, vr_w, vr_c = ops.split_channels(v_r, 3)

    xl_h, xr_h = axis_attention("h", ql_h, qr_h, vl_h, vr_h)
    xl_w, xr_w = axis_attention("w", ql_w, qr_w, vl_w, vr_w)
    xl_c, xr_c = channel_sk(ql_c, qr_c, vl_c, vr_c, params.sk_mlp)

    from_left = ops.concat([xl_h, xl_w, xl_c], axis=1)
    from_right = ops.concat([xr_h, xr_w, xr_c], axis=1)
    if params.swap:
        return StereoFeatures(s.left + from_left, s.right + from_right)
    return StereoFeatures(s.left + from_right, s.right + from_left)


def cmia_param_count(channels: int) -> int:
    c3 = channels // 3
    h = max(1, c3 // 2)
    return 2 * (channels * channels + channels) + (c3 * h + h + h * c3 + c3)
