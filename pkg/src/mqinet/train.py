"""Adam, cosine annealing and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .metrics import psnr
from .network import MQINet, l1_loss, mqinet_forward
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_init: float = 1e-3
    lr_min: float = 1e-7
    total_steps: int = 500
    batch: int = 8
    patch: int = 0  # 0 = whole image
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    log_every: int = 50
    # optional (step, batch, patch) escalation, e.g. switch sizes halfway
    schedule: list = field(default_factory=list)

    def __post_init__(self):
        if self.lr_min > self.lr_init:
            raise ValueError("lr_min must not exceed lr_init")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")


class TrainingDiverged(RuntimeError):
    pass


def cosine_lr(step: int, total: int, lr_init: float, lr_min: float = 1e-7) -> float:
    if total <= 0:
        return lr_init
    step = min(max(step, 0), total)
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * step / total))


def adam_step(params, t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update from each parameter's ``.grad``; grads are zeroed."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params:
        g = p.grad
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * g * g
        m_hat = p.adam_m / c1
        v_hat = p.adam_v / c2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        p.zero_grad()


@dataclass
class StereoBatchSet:
    """In-memory training pairs, each array (N,3,H,W) float32."""

    rainy_l: np.ndarray
    rainy_r: np.ndarray
    clean_l: np.ndarray
    clean_r: np.ndarray

    def __len__(self) -> int:
        return len(self.rainy_l)

    @classmethod
    def from_samples(cls, samples: Sequence) -> "StereoBatchSet":
        def stack(attr):
            return np.stack([getattr(s, attr) for s in samples]).astype(np.float32)

        return cls(stack("rainy_l"), stack("rainy_r"), stack("clean_l"), stack("clean_r"))


def _crop(rng, arrays, patch: int):
    H, W = arrays[0].shape[-2:]
    if patch <= 0 or patch >= min(H, W):
        return arrays
    y = int(rng.integers(0, H - patch + 1))
    x = int(rng.integers(0, W - patch + 1))
    return [a[..., y:y + patch, x:x + patch] for a in arrays]


def evaluate_psnr(model: MQINet, data: StereoBatchSet, chunk: int = 8) -> float:
    """Mean over samples of the two-view-averaged PSNR of clamped outputs."""
    scores = []
    for i in range(0, len(data), chunk):
        sl = slice(i, i + chunk)
        out_l, out_r = mqinet_forward(Tensor(data.rainy_l[sl]), Tensor(data.rainy_r[sl]), model,
                                      inference=True)
        for j in range(out_l.shape[0]):
            scores.append(0.5 * (psnr(out_l.data[j], data.clean_l[sl][j])
                                 + psnr(out_r.data[j], data.clean_r[sl][j])))
    return float(np.mean(scores))


def train_step(model: MQINet, batch, t: int, lr: float, tc: TrainConfig) -> float:
    rl, rr, cl, cr = (Tensor(a) for a in batch)
    with Tape() as tape:
        out_l, out_r = mqinet_forward(rl, rr, model)
        loss = l1_loss(out_l, out_r, cl, cr)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDiverged(f"loss became {value} at step {t}")
    tape.backward(loss)
    adam_step(model.parameters(), t, lr, tc.beta1, tc.beta2, tc.eps)
    return value


def train(model: MQINet, data: StereoBatchSet, tc: TrainConfig, eval_data: StereoBatchSet | None = None,
          stop_after: int | None = None):
    """Train in place; returns a list of log dicts (step, lr, loss, psnr when logged).

    Sample order and crops come only from ``tc.seed``, so equal seeds give
    bit-identical parameters.  ``stop_after`` ends the run early while keeping
    the learning-rate schedule of the full ``total_steps``.
    """
    rng = np.random.default_rng(tc.seed)
    history = []
    n = len(data)
    batch, patch = tc.batch, tc.patch
    escalation = sorted(tc.schedule)
    order = rng.permutation(n)
    cursor = 0
    last = tc.total_steps if stop_after is None else min(stop_after, tc.total_steps)
    for t in range(1, last + 1):
        for at, b, p in escalation:
            if t - 1 == at:
                batch, patch = b, p
        bsz = min(batch, n)
        if cursor + bsz > n:
            order = rng.permutation(n)
            cursor = 0
        idx = np.sort(order[cursor:cursor + bsz])
        cursor += bsz
        arrays = [data.rainy_l[idx], data.rainy_r[idx], data.clean_l[idx], data.clean_r[idx]]
        arrays = _crop(rng, arrays, patch)
        lr = cosine_lr(t - 1, tc.total_steps, tc.lr_init, tc.lr_min)
        loss = train_step(model, arrays, t, lr, tc)
        entry = {"step": t, "lr": lr, "loss": loss}
        if tc.log_every and (t % tc.log_every == 0 or t == tc.total_steps):
            entry["psnr"] = evaluate_psnr(model, eval_data if eval_data is not None else data)
            log.info("step %d lr %.3g loss %.5f psnr %.2f", t, lr, loss, entry["psnr"])
        history.append(entry)
    return history
