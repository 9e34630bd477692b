"""Command-line entry point: ``mqinet {synth,train,eval,infer,gradcheck}``.

Exit codes: 0 on success, 1 on a runtime failure, 2 on bad usage (unknown
command, malformed flags, bad config keys or values).

The ``eval`` command ends with one machine-readable line::

    RESULT psnr_l=<f> psnr_r=<f> psnr_avg=<f> ssim_l=<f> ssim_r=<f> ssim_avg=<f>

PSNR values carry two decimals and SSIM values four.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import load_dataset, read_image, write_dataset, write_image
from .gradsuite import TOLERANCE, run_suite
from .metrics import stereo_scores
from .network import MQINet, ModelConfig, mqinet_forward
from .tensor import Tensor
from .train import StereoBatchSet, TrainConfig, TrainingDiverged, train

log = logging.getLogger("mqinet")

RESULT_KEYS = ("psnr_l", "psnr_r", "psnr_avg", "ssim_l", "ssim_r", "ssim_avg")


class UsageError(ValueError):
    """Bad command-line or config input; maps to exit code 2."""


@dataclass
class RunConfig:
    channels: int = 24
    stages: int = 2
    query_base: int = 16
    seed: int = 0
    lr: float = 1e-3
    lr_min: float = 1e-7
    steps: int = 500
    batch: int = 8
    patch: int = 0
    use_cdqb: bool = True
    use_ipa: bool = True
    use_cmia: bool = True
    cmia_swap: bool = False
    data_dir: str = ""
    out: str = "model.ckpt"

    def update(self, key: str, value: str) -> None:
        types = {f.name: f.type for f in fields(self)}
        if key not in types:
            raise UsageError(f"unknown config key {key!r}")
        setattr(self, key, _parse_value(key, value, types[key]))

    def model_config(self) -> ModelConfig:
        return ModelConfig(channels=self.channels, stages=self.stages, query_base=self.query_base,
                           use_cdqb=self.use_cdqb, use_ipa=self.use_ipa, use_cmia=self.use_cmia,
                           cmia_swap=self.cmia_swap, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr_init=self.lr, lr_min=self.lr_min, total_steps=self.steps,
                           batch=self.batch, patch=self.patch, seed=self.seed)


def _parse_value(key: str, value: str, typ):
    value = value.strip()
    try:
        if typ in ("bool", bool):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ in ("int", int):
            return int(value)
        if typ in ("float", float):
            return float(value)
    except ValueError:
        raise UsageError(f"bad value for {key}: {value!r}") from None
    return value


def parse_config_text(text: str, cfg: RunConfig | None = None) -> RunConfig:
    """``key = value`` lines; ``#`` starts a comment; blank lines are ignored."""
    cfg = cfg or RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        cfg.update(key.strip(), value)
    return cfg


def load_run_config(path=None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise UsageError(f"cannot read config {path}: {e}") from None
        parse_config_text(text, cfg)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.update(key.strip(), value)
    return cfg


# -- commands ---------------------------------------------------------------

def _size(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from None
    if h < 32 or w < 32:
        raise argparse.ArgumentTypeError(f"size must be at least 32x32, got {text}")
    return h, w


def cmd_synth(args) -> int:
    extra = {}
    if args.streaks is not None:
        extra["streaks"] = args.streaks
    if args.haze is not None:
        extra["haze"] = args.haze
    m = write_dataset(args.out, args.count, *args.size, seed=args.seed, **extra)
    print(f"wrote {m.count} pairs of {m.size[0]}x{m.size[1]} to {m.root}")
    return 0


def _load_pairs(root) -> tuple:
    ids, rl, rr, cl, cr = load_dataset(root)
    return ids, StereoBatchSet(rl, rr, cl, cr)


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    if args.data is not None:
        overrides.append(f"data_dir={args.data}")
    if args.out is not None:
        overrides.append(f"out={args.out}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg = load_run_config(args.config, overrides)
    if not cfg.data_dir:
        raise UsageError("no training data: pass --data or set data_dir")
    try:
        model_cfg, train_cfg = cfg.model_config(), cfg.train_config()
    except ValueError as e:
        raise UsageError(str(e)) from None
    _, data = _load_pairs(cfg.data_dir)
    model = MQINet(model_cfg)
    history = train(model, data, train_cfg)
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out)
    log_path = out.with_name(out.name + ".metrics.tsv")
    rows = ["step\tlr\tloss\tpsnr"]
    for h in history:
        psnr = f"{h['psnr']:.4f}" if "psnr" in h else ""
        rows.append(f"{h['step']}\t{h['lr']:.6g}\t{h['loss']:.6f}\t{psnr}")
    log_path.write_text("\n".join(rows) + "\n")
    print(f"saved {out} after {len(history)} steps; metrics in {log_path}")
    return 0


def _derain(model: MQINet | None, rainy_l: np.ndarray, rainy_r: np.ndarray, chunk: int = 8):
    if model is None:
        return rainy_l, rainy_r
    outs_l, outs_r = [], []
    for i in range(0, len(rainy_l), chunk):
        o_l, o_r = mqinet_forward(Tensor(rainy_l[i:i + chunk]), Tensor(rainy_r[i:i + chunk]), model,
                                  inference=True)
        outs_l.append(o_l.data)
        outs_r.append(o_r.data)
    return np.concatenate(outs_l), np.concatenate(outs_r)


def format_result(scores: dict) -> str:
    parts = [f"{k}={scores[k]:.2f}" if k.startswith("psnr") else f"{k}={scores[k]:.4f}"
             for k in RESULT_KEYS]
    return "RESULT " + " ".join(parts)


def evaluate_dataset(model: MQINet | None, root) -> tuple:
    """Per-sample scores and their means; without a model the rainy inputs are scored."""
    ids, data = _load_pairs(root)
    out_l, out_r = _derain(model, data.rainy_l, data.rainy_r)
    per = [stereo_scores(out_l[i], out_r[i], data.clean_l[i], data.clean_r[i]) for i in range(len(ids))]
    mean = {k: float(np.mean([p[k] for p in per])) for k in RESULT_KEYS}
    return ids, per, mean


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt) if args.ckpt else None
    ids, per, mean = evaluate_dataset(model, args.data)
    head = f"{'id':<10}{'psnr_l':>9}{'psnr_r':>9}{'psnr_avg':>10}{'ssim_l':>8}{'ssim_r':>8}{'ssim_avg':>10}"
    print(head)
    print("-" * len(head))

    def row(name, s):
        return (f"{name:<10}{s['psnr_l']:>9.2f}{s['psnr_r']:>9.2f}{s['psnr_avg']:>10.2f}"
                f"{s['ssim_l']:>8.3f}{s['ssim_r']:>8.3f}{s['ssim_avg']:>10.3f}")

    for sid, s in zip(ids, per):
        print(row(sid, s))
    print("-" * len(head))
    print(row("mean", mean))
    print(format_result(mean))
    return 0


def cmd_infer(args) -> int:
    model = load_checkpoint(args.ckpt)
    left, right = read_image(args.left), read_image(args.right)
    if left.shape != right.shape:
        raise ValueError(f"left {left.shape[1:]} and right {right.shape[1:]} differ in size")
    out_l, out_r = _derain(model, left[None], right[None])
    write_image(out_l[0], args.out_left)
    write_image(out_r[0], args.out_right)
    print(f"wrote {args.out_left} and {args.out_right}")
    return 0


def cmd_gradcheck(args) -> int:
    seeds = tuple(args.seed + k for k in range(3))
    results = run_suite(seeds, full=args.full)
    worst = {}
    for name, _, err in results:
        worst[name] = max(worst.get(name, 0.0), err)
    for name, err in worst.items():
        flag = "ok" if err < TOLERANCE else "FAIL"
        print(f"{name:<24}{err:>12.3e}  {flag}")
    overall = max(worst.values())
    print(f"max relative error {overall:.3e} over seeds {list(seeds)} (tolerance {TOLERANCE:g})")
    return 0 if overall < TOLERANCE else 1


# -- parser -----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mqinet", description="Stereo deraining toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic stereo rain dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--size", type=_size, default=(64, 64), help="HxW, default 64x64")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--streaks", type=int, default=None, help="fixed streak count per sample")
    s.add_argument("--haze", type=float, default=None, help="haze strength, 0 disables it")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--data", default=None)
    t.add_argument("--config", default=None)
    t.add_argument("--out", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a model (or the rainy inputs) on a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", default=None)
    e.add_argument("--seed", type=int, default=0, help="accepted for uniformity; eval is deterministic")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="derain one stereo pair")
    i.add_argument("--left", required=True)
    i.add_argument("--right", required=True)
    i.add_argument("--ckpt", required=True)
    i.add_argument("--out-left", required=True)
    i.add_argument("--out-right", required=True)
    i.add_argument("--seed", type=int, default=0, help="accepted for uniformity; inference is deterministic")
    i.set_defaults(func=cmd_infer)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    g.add_argument("--full", action="store_true", help="also check the end-to-end model loss")
    g.add_argument("--seed", type=int, default=0, help="first of three consecutive seeds")
    g.set_defaults(func=cmd_gradcheck)
    return p


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, CheckpointError, TrainingDiverged, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    sys.exit(run())
