"""Synthetic stereo rain pairs, PNG I/O and the on-disk dataset layout.

Layout::

    <root>/manifest.txt
    <root>/left/rainy/<id>.png   <root>/left/clean/<id>.png
    <root>/right/rainy/<id>.png  <root>/right/clean/<id>.png

The manifest starts with one header line ``# seed=<int> size=<H>x<W> count=<N>``
followed by one sample id per line.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .physics import ALPHA_MIN, RainScene, synthesize_rainy

MAX_DISPARITY = 8


@dataclass
class StereoSample:
    rainy_l: np.ndarray
    rainy_r: np.ndarray
    clean_l: np.ndarray
    clean_r: np.ndarray
    scene_l: RainScene
    scene_r: RainScene
    id: str = ""


@dataclass
class DatasetManifest:
    root: Path
    ids: list
    seed: int
    size: tuple
    count: int


def _grid(H: int, W: int):
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    return yy + 0.5, xx + 0.5


def _render_background(rng, H: int, W: int):
    """Left/right backgrounds: smooth gradient plus shapes at integer disparities."""
    yy, xx = _grid(H, W)
    base = rng.uniform(0.15, 0.75, size=3)
    gy, gx = rng.uniform(-0.3, 0.3, size=(2, 3))
    grad = base[:, None, None] + gy[:, None, None] * (yy / H - 0.5) + gx[:, None, None] * (xx / W - 0.5)
    left, right = grad.copy(), grad.copy()
    for _ in range(int(rng.integers(3, 7))):
        color = rng.uniform(0.0, 1.0, size=3)[:, None, None]
        d = int(rng.integers(0, MAX_DISPARITY + 1))
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        if rng.random() < 0.5:
            r = rng.uniform(0.06, 0.2) * min(H, W)

            def sdist(shift, cy=cy, cx=cx, r=r):
                return np.hypot(yy - cy, xx - (cx - shift)) - r
        else:
            hh, hw = rng.uniform(0.05, 0.2, size=2) * np.array([H, W])

            def sdist(shift, cy=cy, cx=cx, hh=hh, hw=hw):
                return np.maximum(np.abs(yy - cy) - hh, np.abs(xx - (cx - shift)) - hw)

        # right view sees the object shifted left by its disparity
        for view, shift in ((left, 0), (right, d)):
            cover = np.clip(0.5 - sdist(shift), 0.0, 1.0)[None]
            view *= 1.0 - cover
            view += cover * color
    return np.clip(left, 0.0, 1.0), np.clip(right, 0.0, 1.0)


def _segment_cover(yy, xx, y0, x0, y1, x1):
    dy, dx = y1 - y0, x1 - x0
    t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / (dy * dy + dx * dx), 0.0, 1.0)
    dist = np.hypot(yy - (y0 + t * dy), xx - (x0 + t * dx))
    return np.clip(1.0 - dist, 0.0, 1.0)


def _render_rain(rng, H: int, W: int, count: int):
    yy, xx = _grid(H, W)
    left = np.zeros((H, W))
    right = np.zeros((H, W))
    for _ in range(count):
        theta = math.radians(rng.normal(100.0, 5.0))
        length = rng.uniform(8.0, 24.0)
        intensity = rng.uniform(0.2, 0.6)
        d = int(rng.integers(0, MAX_DISPARITY + 1))
        y0 = rng.uniform(-length, H)
        x0 = rng.uniform(0, W + MAX_DISPARITY)
        # theta measured from +x with y pointing down the image
        y1, x1 = y0 + length * math.sin(theta), x0 + length * math.cos(theta)
        for view, shift in ((left, 0), (right, d)):
            ys = slice(max(0, int(min(y0, y1)) - 2), min(H, int(max(y0, y1)) + 3))
            xs = slice(max(0, int(min(x0, x1) - shift) - 2), min(W, int(max(x0, x1) - shift) + 3))
            if ys.start >= ys.stop or xs.start >= xs.stop:
                continue
            cover = _segment_cover(yy[ys, xs], xx[ys, xs], y0, x0 - shift, y1, x1 - shift)
            view[ys, xs] = np.maximum(view[ys, xs], intensity * cover)
    return left, right


def _haze(rng, H: int, W: int, strength: float):
    noise = gaussian_filter(rng.standard_normal((H, W)), sigma=max(H, W) / 6, mode="wrap")
    lo, hi = noise.min(), noise.max()
    n = (noise - lo) / (hi - lo) if hi > lo else np.zeros_like(noise)
    return np.clip(1.0 - strength * n, ALPHA_MIN, 1.0)[None]


def gen_stereo_sample(seed, H: int = 64, W: int = 64, streaks: int | None = None,
                      haze: float = 0.4, sample_id: str = "") -> StereoSample:
    """Disparity-consistent rainy/clean stereo pair.

    ``seed`` may be an int or a tuple of ints.  ``streaks=None`` draws a
    count proportional to the image area.  Rain is capped so that
    background plus rain never exceeds 1, which keeps the rainy views inside
    [0,1] without clamping and the physics exactly invertible.
    """
    if H < 32 or W < 32:
        raise ValueError(f"samples must be at least 32x32, got {H}x{W}")
    rng = np.random.default_rng(seed)
    clean_l, clean_r = _render_background(rng, H, W)
    if streaks is None:
        streaks = int(round(rng.uniform(15, 40) * H * W / 4096))
    rain_l, rain_r = _render_rain(rng, H, W, streaks)
    alpha = _haze(rng, H, W, haze)
    airlight = float(rng.uniform(0.7, 1.0))

    scenes = []
    for clean, rain in ((clean_l, rain_l), (clean_r, rain_r)):
        s = np.minimum(rain[None], 1.0 - clean)
        scenes.append(RainScene(clean, s, alpha.copy(), airlight))
    rainy_l, rainy_r = (synthesize_rainy(sc) for sc in scenes)
    return StereoSample(rainy_l, rainy_r, clean_l, clean_r, scenes[0], scenes[1], sample_id)


def sample_seed(seed: int, index: int) -> tuple:
    return (int(seed), int(index))


# -- image files ------------------------------------------------------------

def quantize(t: np.ndarray) -> np.ndarray:
    return np.round(np.clip(t, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(t: np.ndarray, path) -> None:
    t = np.asarray(t)
    if t.ndim != 3 or t.shape[0] != 3:
        raise ValueError(f"expected a (3,H,W) image, got {t.shape}")
    Image.fromarray(quantize(t).transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr.transpose(2, 0, 1) / np.float32(255.0)


# -- dataset directory ------------------------------------------------------

VIEWS = ("left", "right")
KINDS = ("rainy", "clean")


def write_dataset(root, count: int, H: int, W: int, seed: int, **gen_kwargs) -> DatasetManifest:
    root = Path(root)
    for v in VIEWS:
        for k in KINDS:
            (root / v / k).mkdir(parents=True, exist_ok=True)
    ids = [f"{i:05d}" for i in range(count)]
    for i, sid in enumerate(ids):
        s = gen_stereo_sample(sample_seed(seed, i), H, W, sample_id=sid, **gen_kwargs)
        write_image(s.rainy_l, root / "left" / "rainy" / f"{sid}.png")
        write_image(s.clean_l, root / "left" / "clean" / f"{sid}.png")
        write_image(s.rainy_r, root / "right" / "rainy" / f"{sid}.png")
        write_image(s.clean_r, root / "right" / "clean" / f"{sid}.png")
    lines = [f"# seed={seed} size={H}x{W} count={count}"] + ids
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    return DatasetManifest(root, ids, seed, (H, W), count)


def read_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.txt"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.txt in {root}")
    lines = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("#"):
        raise ValueError(f"{path}: missing header line")
    header = dict(tok.split("=", 1) for tok in lines[0][1:].split())
    h, w = (int(v) for v in header["size"].split("x"))
    ids = lines[1:]
    if int(header["count"]) != len(ids):
        raise ValueError(f"{path}: header count {header['count']} but {len(ids)} ids")
    return DatasetManifest(root, ids, int(header["seed"]), (h, w), len(ids))


def load_dataset(root):
    """Read every pair listed in the manifest as (ids, rainy_l, rainy_r, clean_l, clean_r)."""
    m = read_manifest(root)

    def stack(view, kind):
        return np.stack([read_image(os.path.join(m.root, view, kind, f"{i}.png")) for i in m.ids])

    return m.ids, stack("left", "rainy"), stack("right", "rainy"), stack("left", "clean"), stack("right", "clean")
