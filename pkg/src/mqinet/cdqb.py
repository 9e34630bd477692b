"""Context-aware dimension-wise queried block.

The input is split into four channel quarters ``(hw, ch, cw, ctx)``.  The
first three are multiplied by learned queries that live on the hw, ch and cw
planes respectively; the last quarter is gated by pooled global context.  The
four results are concatenated and passed through a feed-forward network with
a residual around the whole block.

Query layouts (``c = C // 4``)::

    q_hw : (c, H, W)
    q_ch : (W, c, H)
    q_cw : (H, c, W)
"""

from __future__ import annotations

from . import nn, ops
from .tensor import Parameter, Tensor


class QuerySet(nn.Module):
    """Base queries stored at a fixed extent, each with its own depthwise conv.

    The depthwise conv runs in the query's native layout with the leading
    axis as its channel axis, at the base extent; the result is then resized
    bilinearly on the two axes that track the input size.
    """

    def __init__(self, rng, c: int, base: int = 16):
        self.c = c
        self.base = base
        self.q_hw_base = Parameter(rng.normal(0.0, 0.02, size=(c, base, base)))
        self.q_ch_base = Parameter(rng.normal(0.0, 0.02, size=(base, c, base)))
        self.q_cw_base = Parameter(rng.normal(0.0, 0.02, size=(base, c, base)))
        self.dwc_hw = nn.DepthwiseConv(rng, c)
        self.dwc_ch = nn.DepthwiseConv(rng, base)
        self.dwc_cw = nn.DepthwiseConv(rng, base)


def _native_dwc(q: Tensor, dwc: nn.DepthwiseConv) -> Tensor:
    return ops.reshape(dwc(ops.reshape(q, (1,) + q.shape)), q.shape)


def make_queries(qs: QuerySet, H: int, W: int):
    """Queries for an (H, W) input, in native layouts; independent of feature values."""
    c = qs.c
    q_hw = _native_dwc(qs.q_hw_base, qs.dwc_hw)
    q_hw = ops.bilinear_resize(q_hw, H, W)

    # (w,c,h) -> (c,w,h): resize the (w,h) grid per channel -> (W,c,H)
    q_ch = _native_dwc(qs.q_ch_base, qs.dwc_ch)
    q_ch = ops.bilinear_resize(ops.permute(q_ch, (1, 0, 2)), W, H)
    q_ch = ops.permute(q_ch, (1, 0, 2))

    # (h,c,w) -> (c,h,w) -> resize -> (H,c,W)
    q_cw = _native_dwc(qs.q_cw_base, qs.dwc_cw)
    q_cw = ops.bilinear_resize(ops.permute(q_cw, (1, 0, 2)), H, W)
    q_cw = ops.permute(q_cw, (1, 0, 2))

    assert q_hw.shape == (c, H, W) and q_ch.shape == (W, c, H) and q_cw.shape == (H, c, W)
    return q_hw, q_ch, q_cw


class GCA(nn.Module):
    """Squeeze-excitation style channel gating: x * sigmoid(MLP(GAP(x)))."""

    def __init__(self, rng, c: int):
        self.mlp = nn.ChannelMLP(rng, c)

    def __call__(self, x0: Tensor) -> Tensor:
        return x0 * nn.channel_gate(self.mlp, ops.global_avg_pool(x0))


def gca_forward(x0: Tensor, p: GCA) -> Tensor:
    if x0.shape[1] != p.mlp.w1.shape[1]:
        raise ValueError(f"GCA built for {p.mlp.w1.shape[1]} channels, got {x0.shape[1]}")
    return p(x0)


class FeedForward(nn.Module):
    def __init__(self, rng, channels: int, expansion: int = 2):
        self.mlp = nn.PixelMLP(rng, channels, expansion * channels)

    def __call__(self, x: Tensor) -> Tensor:
        return self.mlp(x)


def cdqb_forward(x: Tensor, qs: QuerySet, gca: GCA, ffn: FeedForward) -> Tensor:
    B, C, H, W = x.shape
    if C % 4:
        raise ValueError(f"CDQB needs channels divisible by 4, got {C}")
    q_hw, q_ch, q_cw = make_queries(qs, H, W)
    x_hw, x_ch, x_cw, x_0 = ops.split_channels(x, 4)

    y_hw = x_hw * ops.reshape(q_hw, (1,) + q_hw.shape)
    # (B,c,H,W) -> (B,W,c,H) and back
    y_ch = ops.permute(x_ch, (0, 3, 1, 2)) * ops.reshape(q_ch, (1,) + q_ch.shape)
    y_ch = ops.permute(y_ch, (0, 2, 3, 1))
    # (B,c,H,W) -> (B,H,c,W) and back
    y_cw = ops.permute(x_cw, (0, 2, 1, 3)) * ops.reshape(q_cw, (1,) + q_cw.shape)
    y_cw = ops.permute(y_cw, (0, 2, 1, 3))

    y = ops.concat([y_hw, y_ch, y_cw, gca(x_0)], axis=1)
    return x + ffn(y)


class CDQB(nn.Module):
    def __init__(self, rng, channels: int, query_base: int = 16):
        if channels % 4:
            raise ValueError(f"CDQB needs channels divisible by 4, got {channels}")
        c = channels // 4
        self.queries = QuerySet(rng, c, query_base)
        self.gca = GCA(rng, c)
        self.ffn = FeedForward(rng, channels)

    def __call__(self, x: Tensor) -> Tensor:
        return cdqb_forward(x, self.queries, self.gca, self.ffn)


class PlainBlock(nn.Module):
    """Residual feed-forward block used when the queried block is switched off."""

    def __init__(self, rng, channels: int):
        self.ffn = FeedForward(rng, channels)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.ffn(x)


def cdqb_param_count(channels: int, query_base: int) -> int:
    c, b = channels // 4, query_base
    queries = 3 * c * b * b
    dwcs = (c * 9 + c) + 2 * (b * 9 + b)
    h = max(1, c // 2)
    gca = c * h + h + h * c + c
    return queries + dwcs + gca + ffn_param_count(channels)


def ffn_param_count(channels: int, expansion: int = 2) -> int:
    hidden = expansion * channels
    return channels * hidden + hidden + hidden * channels + channels

