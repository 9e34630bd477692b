import itertools
import math
import struct
import zlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mqinet.data import (MAX_DISPARITY, _render_rain, gen_stereo_sample, load_dataset, quantize,
                         read_image, read_manifest, write_dataset, write_image)
from mqinet.metrics import gaussian_window, psnr, ssim, stereo_scores
from mqinet.physics import ALPHA_MIN, invert_rainy

GOLDEN = Path(__file__).parent / "data" / "pattern_2x2.png"


# -- generator ----------------------------------------------------------------

def _arrays(s):
    return [s.rainy_l, s.rainy_r, s.clean_l, s.clean_r, s.scene_l.rain, s.scene_r.rain, s.scene_l.alpha]


def test_same_seed_bit_identical():
    a, b = gen_stereo_sample(5, 40, 48), gen_stereo_sample(5, 40, 48)
    for x, y in zip(_arrays(a), _arrays(b)):
        assert x.tobytes() == y.tobytes()
    assert a.scene_l.airlight == b.scene_l.airlight


def test_different_seeds_differ():
    assert not np.array_equal(gen_stereo_sample(1).rainy_l, gen_stereo_sample(2).rainy_l)


def test_no_rain_no_haze_is_clean():
    s = gen_stereo_sample(3, 32, 32, streaks=0, haze=0.0)
    assert np.all(s.scene_l.alpha == 1.0)
    assert np.array_equal(s.rainy_l, s.clean_l) and np.array_equal(s.rainy_r, s.clean_r)


@pytest.mark.parametrize("seed", range(5))
def test_physics_round_trip_f32(seed):
    s = gen_stereo_sample(seed)
    for rainy, clean, sc in ((s.rainy_l, s.clean_l, s.scene_l), (s.rainy_r, s.clean_r, s.scene_r)):
        f32 = np.float32
        back = invert_rainy(rainy.astype(f32), sc.rain.astype(f32), sc.alpha.astype(f32), f32(sc.airlight))
        assert np.max(np.abs(back - clean)) < 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_value_ranges(seed):
    s = gen_stereo_sample(seed, 48, 64)
    for img in (s.rainy_l, s.rainy_r, s.clean_l, s.clean_r):
        assert img.shape == (3, 48, 64)
        assert img.min() >= 0.0 and img.max() <= 1.0
    assert s.scene_l.alpha.min() >= ALPHA_MIN and s.scene_l.alpha.max() <= 1.0
    assert np.array_equal(s.scene_l.alpha, s.scene_r.alpha)
    assert 0.7 <= s.scene_l.airlight <= 1.0 and s.scene_l.airlight == s.scene_r.airlight


def test_rain_brightens():
    s = gen_stereo_sample(4, haze=0.0)
    assert np.all(s.rainy_l >= s.clean_l) and np.any(s.rainy_l > s.clean_l)


def test_single_streak_right_view_is_left_shifted():
    checked, seen = 0, set()
    for seed in range(40):
        left, right = _render_rain(np.random.default_rng(seed), 40, 48, 1)
        if left[:, :40].max() == 0:
            continue  # streak starts outside the left frame
        shifts = [d for d in range(MAX_DISPARITY + 1)
                  if np.allclose(right[:, :46 - d], left[:, d:46], atol=1e-9)]
        assert shifts, f"seed {seed}"
        seen.add(shifts[0])
        checked += 1
    assert checked >= 20 and len(seen - {0}) >= 3


def test_rejects_small_sizes():
    with pytest.raises(ValueError):
        gen_stereo_sample(0, 16, 64)


def test_streak_count_scales_with_area():
    small = gen_stereo_sample(0, 32, 32, haze=0.0)
    big = gen_stereo_sample(0, 128, 128, haze=0.0)
    frac = lambda s: np.mean(s.scene_l.rain.max(axis=0) > 0)  # noqa: E731
    assert 0.2 < frac(big) / max(frac(small), 1e-9) < 5


# -- image files -------------------------------------------------------------

def test_quantized_round_trip_exact(tmp_path, rng):
    t = rng.integers(0, 256, (3, 5, 7)).astype(np.float32) / np.float32(255.0)
    write_image(t, tmp_path / "a.png")
    back = read_image(tmp_path / "a.png")
    assert back.dtype == np.float32 and np.array_equal(back, t)


def test_round_trip_snaps_to_grid(tmp_path, rng):
    t = rng.uniform(0, 1, (3, 4, 4))
    write_image(t, tmp_path / "a.png")
    back = read_image(tmp_path / "a.png")
    assert np.max(np.abs(back - t)) <= 0.5 / 255 + 1e-7


@pytest.mark.parametrize("value", [0.0, 1.0])
def test_extremes_preserved(tmp_path, value):
    t = np.full((3, 3, 3), value)
    write_image(t, tmp_path / "a.png")
    assert np.array_equal(read_image(tmp_path / "a.png"), t.astype(np.float32))


def test_out_of_range_is_clipped():
    assert quantize(np.array([-0.5, 1.5, 0.5])).tolist() == [0, 255, 128]


def test_write_rejects_wrong_layout(tmp_path):
    with pytest.raises(ValueError):
        write_image(np.zeros((4, 4, 3)), tmp_path / "a.png")


def _pattern():
    t = np.zeros((3, 2, 2))
    t[0, 0, 0] = 1.0          # red
    t[1, 0, 1] = 1.0          # green
    t[2, 1, 0] = 1.0          # blue
    t[:, 1, 1] = 128 / 255    # grey
    return t


def _decode_png(buf: bytes) -> np.ndarray:
    """Minimal 8-bit RGB decoder, independent of Pillow."""
    assert buf[:8] == b"\x89PNG\r\n\x1a\n"
    pos, idat, hdr = 8, b"", None
    while pos < len(buf):
        (n,) = struct.unpack(">I", buf[pos:pos + 4])
        kind, body = buf[pos + 4:pos + 8], buf[pos + 8:pos + 8 + n]
        if kind == b"IHDR":
            hdr = struct.unpack(">IIBBBBB", body)
        elif kind == b"IDAT":
            idat += body
        pos += 12 + n
    w, h, depth, color = hdr[:4]
    assert (depth, color) == (8, 2)
    raw = zlib.decompress(idat)
    stride = 3 * w
    rows, prev = [], [0] * stride
    for y in range(h):
        ftype = raw[y * (stride + 1)]
        line = list(raw[y * (stride + 1) + 1:(y + 1) * (stride + 1)])
        for i in range(stride):
            a = line[i - 3] if i >= 3 else 0
            b = prev[i]
            c = prev[i - 3] if i >= 3 else 0
            if ftype == 1:
                line[i] = (line[i] + a) & 255
            elif ftype == 2:
                line[i] = (line[i] + b) & 255
            elif ftype == 3:
                line[i] = (line[i] + (a + b) // 2) & 255
            elif ftype == 4:
                p = a + b - c
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                pred = a if pa <= pb and pa <= pc else (b if pb <= pc else c)
                line[i] = (line[i] + pred) & 255
        rows.append(line)
        prev = line
    return np.array(rows, dtype=np.uint8).reshape(h, w, 3)


def test_golden_pattern_pixels():
    px = _decode_png(GOLDEN.read_bytes())
    assert px.tolist() == [[[255, 0, 0], [0, 255, 0]], [[0, 0, 255], [128, 128, 128]]]


def test_golden_pattern_bytes(tmp_path):
    write_image(_pattern(), tmp_path / "p.png")
    assert (tmp_path / "p.png").read_bytes() == GOLDEN.read_bytes()


def test_read_golden():
    back = read_image(GOLDEN)
    assert np.array_equal(back, quantize(_pattern()).astype(np.float32) / np.float32(255.0))


# -- dataset layout --------------------------------------------------------------

def test_dataset_layout_and_manifest(tmp_path):
    m = write_dataset(tmp_path / "ds", 3, 32, 40, seed=9)
    root = tmp_path / "ds"
    lines = (root / "manifest.txt").read_text().splitlines()
    assert lines == ["# seed=9 size=32x40 count=3", "00000", "00001", "00002"]
    for view, kind, sid in itertools.product(("left", "right"), ("rainy", "clean"), m.ids):
        assert (root / view / kind / f"{sid}.png").is_file()
    back = read_manifest(root)
    assert (back.ids, back.seed, back.size, back.count) == (m.ids, 9, (32, 40), 3)


def test_dataset_regenerates_identically(tmp_path):
    for name in ("a", "b"):
        write_dataset(tmp_path / name, 2, 32, 32, seed=4)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 9
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_load_dataset_matches_generator(tmp_path):
    write_dataset(tmp_path, 2, 32, 32, seed=1)
    ids, rl, rr, cl, cr = load_dataset(tmp_path)
    assert ids == ["00000", "00001"] and rl.shape == (2, 3, 32, 32)
    s = gen_stereo_sample((1, 1), 32, 32)
    assert np.array_equal(cr[1], quantize(s.clean_r).astype(np.float32) / np.float32(255.0))


def test_manifest_count_mismatch(tmp_path):
    (tmp_path / "manifest.txt").write_text("# seed=0 size=32x32 count=3\n00000\n")
    with pytest.raises(ValueError):
        read_manifest(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path)


# -- PSNR ----------------------------------------------------------------------

def test_psnr_identical_is_capped(rng):
    x = rng.uniform(0, 1, (3, 8, 8))
    assert psnr(x, x) == 100.0


def test_psnr_uniform_offset():
    a = np.full((3, 4, 4), 0.2)
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_matches_loop(rng):
    a, b = rng.uniform(0, 1, (3, 5, 6)), rng.uniform(0, 1, (3, 5, 6))
    total = 0.0
    for idx in itertools.product(*(range(n) for n in a.shape)):
        total += (a[idx] - b[idx]) ** 2
    expect = 10 * math.log10(1.0 / (total / a.size))
    assert abs(psnr(a, b) - expect) < 1e-9


def test_psnr_symmetric(rng):
    a, b = rng.uniform(0, 1, (3, 8, 8)), rng.uniform(0, 1, (3, 8, 8))
    assert psnr(a, b) == psnr(b, a)


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


# -- SSIM ----------------------------------------------------------------------

def test_window_is_normalised():
    w = gaussian_window()
    assert w.shape == (11, 11) and abs(w.sum() - 1) < 1e-15
    assert np.allclose(w, w.T) and w[5, 5] == w.max()


def test_ssim_identical_is_one(rng):
    x = rng.uniform(0, 1, (3, 16, 16))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("c1,c2", [(0.2, 0.7), (0.5, 0.0), (0.1, 0.1)])
def test_ssim_constant_closed_form(c1, c2):
    k1 = (0.01) ** 2
    expect = (2 * c1 * c2 + k1) / (c1 ** 2 + c2 ** 2 + k1)
    got = ssim(np.full((3, 12, 12), c1), np.full((3, 12, 12), c2))
    assert abs(got - expect) < 1e-9
    if c1 != c2:
        assert got < 1


def _ssim_loop(a, b, size=11, sigma=1.5):
    g = [math.exp(-((i - (size - 1) / 2) ** 2) / (2 * sigma ** 2)) for i in range(size)]
    norm = sum(g) ** 2
    C1, C2 = 0.01 ** 2, 0.03 ** 2
    scores = []
    C, H, W = a.shape
    for c, i, j in itertools.product(range(C), range(H - size + 1), range(W - size + 1)):
        ma = mb = saa = sbb = sab = 0.0
        for u, v in itertools.product(range(size), range(size)):
            w = g[u] * g[v] / norm
            x, y = a[c, i + u, j + v], b[c, i + u, j + v]
            ma += w * x
            mb += w * y
            saa += w * x * x
            sbb += w * y * y
            sab += w * x * y
        va, vb, cov = saa - ma * ma, sbb - mb * mb, sab - ma * mb
        scores.append((2 * ma * mb + C1) * (2 * cov + C2) / ((ma * ma + mb * mb + C1) * (va + vb + C2)))
    return sum(scores) / len(scores)


def test_ssim_matches_sliding_window_loop(rng):
    a = rng.uniform(0, 1, (3, 14, 15))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert abs(ssim(a, b) - _ssim_loop(a, b)) <= 1e-6


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 12, 12), elements=st.floats(0, 1)),
       arrays(np.float64, (2, 12, 12), elements=st.floats(0, 1)))
def test_ssim_symmetric_and_bounded(a, b):
    s = ssim(a, b)
    assert abs(s - ssim(b, a)) <= 1e-9
    assert -1.0 - 1e-9 <= s <= 1.0 + 1e-9


def test_ssim_rejects_tiny_images():
    with pytest.raises(ValueError):
        ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))


def test_stereo_scores_average_views(rng):
    gl, gr = rng.uniform(0, 1, (2, 3, 16, 16))
    ol, orr = np.clip(gl + 0.05, 0, 1), gr
    s = stereo_scores(ol, orr, gl, gr)
    assert s["psnr_r"] == 100.0 and s["ssim_r"] == pytest.approx(1.0)
    assert s["psnr_avg"] == pytest.approx(0.5 * (s["psnr_l"] + s["psnr_r"]))
    assert s["ssim_avg"] == pytest.approx(0.5 * (s["ssim_l"] + s["ssim_r"]))
