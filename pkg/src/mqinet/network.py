"""Full stereo deraining network.

Per view: shallow 3x3 conv -> physics-aware attention -> N stages of
(queried block per view, then cross-view attention) -> 3x3 conv back to RGB
-> add the input image.  Both views share every weight.

Parameter count with ``C`` channels, ``N`` stages and query base ``b``::

    shallow conv      27*C + C
    output conv       9*C*3 + 3
    IPA (optional)    2*(9C + C) + [C*h + h + h*C + C] * 2,   h = C//2
    stage, CDQB on    3*c*b^2 + (10c) + 2*(10b) + GCA(c) + FFN(C)
    stage, CDQB off   FFN(C) = 4C^2 + 3C
    stage, CMIA on    2*(C^2 + C) + SK(C/3)

See :func:`expected_param_count`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import nn, ops
from .cdqb import CDQB, PlainBlock, cdqb_param_count, ffn_param_count
from .cmia import CMIA, StereoFeatures, cmia_param_count
from .physics import PhysicsAttention
from .tensor import Tensor


@dataclass
class ModelConfig:
    channels: int = 24
    stages: int = 2
    query_base: int = 16
    use_cdqb: bool = True
    use_ipa: bool = True
    use_cmia: bool = True
    cmia_swap: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.channels <= 0 or self.channels % 12:
            raise ValueError(f"channels must be a positive multiple of 12, got {self.channels}")
        if self.stages < 1:
            raise ValueError(f"need at least one stage, got {self.stages}")
        if self.query_base < 1:
            raise ValueError(f"query_base must be positive, got {self.query_base}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for k, v in d.items():
            if k not in names:
                raise KeyError(f"unknown model config key {k!r}")
            kwargs[k] = _coerce(v, names[k])
        return cls(**kwargs)


def _coerce(v, typ):
    if not isinstance(v, str):
        return v
    if typ in ("bool", bool):
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {v!r}")
    if typ in ("int", int):
        return int(v)
    return v


class Stage(nn.Module):
    def __init__(self, rng, cfg: ModelConfig):
        if cfg.use_cdqb:
            self.block = CDQB(rng, cfg.channels, cfg.query_base)
        else:
            self.block = PlainBlock(rng, cfg.channels)
        self.cmia = CMIA(rng, cfg.channels, swap=cfg.cmia_swap) if cfg.use_cmia else None

    def __call__(self, s: StereoFeatures) -> StereoFeatures:
        s = StereoFeatures(self.block(s.left), self.block(s.right))
        if self.cmia is not None:
            s = self.cmia(s)
        return s


class MQINet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        C = cfg.channels
        self.shallow = nn.Conv3x3(rng, 3, C)
        self.ipa = PhysicsAttention(rng, C) if cfg.use_ipa else None
        self.stages = [Stage(rng, cfg) for _ in range(cfg.stages)]
        self.out_conv = nn.Conv3x3(rng, C, 3)
        # small output init so training starts close to the identity map
        self.out_conv.weight.data *= 0.1
        self.assign_names()

    def encode(self, img: Tensor) -> Tensor:
        f = self.shallow(img)
        return self.ipa(f) if self.ipa is not None else f

    def __call__(self, left: Tensor, right: Tensor):
        return mqinet_forward(left, right, self)


def mqinet_forward(left: Tensor, right: Tensor, model: MQINet, inference: bool = False):
    if left.shape != right.shape:
        raise ValueError(f"view shapes differ: {left.shape} vs {right.shape}")
    if left.ndim != 4 or left.shape[1] != 3:
        raise ValueError(f"expected (B,3,H,W) images, got {left.shape}")
    if min(left.shape[2:]) < 8:
        raise ValueError(f"images must be at least 8x8, got {left.shape[2:]}")
    s = StereoFeatures(model.encode(left), model.encode(right))
    for stage in model.stages:
        s = stage(s)
    out_l = model.out_conv(s.left) + left
    out_r = model.out_conv(s.right) + right
    if inference:
        out_l = Tensor(np.clip(out_l.data, 0.0, 1.0))
        out_r = Tensor(np.clip(out_r.data, 0.0, 1.0))
    return out_l, out_r


def expected_param_count(cfg: ModelConfig) -> int:
    C = cfg.channels
    total = (27 * C + C) + (9 * C * 3 + 3)
    if cfg.use_ipa:
        h = max(1, C // 2)
        channel_mlp = C * h + h + h * C + C
        pixel_mlp = C * h + h + h * C + C
        total += 2 * (9 * C + C) + channel_mlp + pixel_mlp
    per_stage = cdqb_param_count(C, cfg.query_base) if cfg.use_cdqb else ffn_param_count(C)
    if cfg.use_cmia:
        per_stage += cmia_param_count(C)
    return total + cfg.stages * per_stage


def l1_loss(pred_l: Tensor, pred_r: Tensor, gt_l: Tensor, gt_r: Tensor) -> Tensor:
    """Mean absolute error, averaged over both views."""
    loss_l = ops.mean_all(ops.absolute(pred_l - gt_l))
    loss_r = ops.mean_all(ops.absolute(pred_r - gt_r))
    return (loss_l + loss_r) * 0.5


# the ablation rows: baseline, +CDQB, +CDQB+IPA, full
ABLATIONS = {
    "baseline": dict(use_cdqb=False, use_ipa=False, use_cmia=False),
    "cdqb": dict(use_cdqb=True, use_ipa=False, use_cmia=False),
    "cdqb_ipa": dict(use_cdqb=True, use_ipa=True, use_cmia=False),
    "full": dict(use_cdqb=True, use_ipa=True, use_cmia=True),
}
