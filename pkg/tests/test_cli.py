import re
import subprocess
import sys

import numpy as np
import pytest

from mqinet import cli
from mqinet.checkpoint import load_checkpoint
from mqinet.cli import RunConfig, UsageError, format_result, parse_config_text, run
from mqinet.data import read_image

RESULT_RE = re.compile(
    r"^RESULT psnr_l=(-?\d+\.\d{2}) psnr_r=(-?\d+\.\d{2}) psnr_avg=(-?\d+\.\d{2}) "
    r"ssim_l=(-?\d+\.\d{4}) ssim_r=(-?\d+\.\d{4}) ssim_avg=(-?\d+\.\d{4})$"
)

TINY = "channels = 12\nstages = 1\nquery_base = 4\nsteps = 3\nbatch = 2\n"


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _result_line(out: str) -> str:
    lines = [ln for ln in out.splitlines() if ln.startswith("RESULT")]
    assert len(lines) == 1
    return lines[0]


@pytest.fixture
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    assert run(["synth", "--out", str(root), "--count", "2", "--size", "32x32", "--seed", "3"]) == 0
    return root


def test_synth_twice_identical(tmp_path):
    for name in ("a", "b"):
        assert run(["synth", "--out", str(tmp_path / name), "--count", "2", "--size", "64x64", "--seed", "7"]) == 0
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert len(a) == 9 and a == b


def test_synth_seed_changes_pixels(tmp_path):
    run(["synth", "--out", str(tmp_path / "a"), "--count", "1", "--size", "32x32", "--seed", "1"])
    run(["synth", "--out", str(tmp_path / "b"), "--count", "1", "--size", "32x32", "--seed", "2"])
    assert _tree(tmp_path / "a") != _tree(tmp_path / "b")


def test_eval_clean_vs_clean(tmp_path, capsys):
    root = tmp_path / "clean"
    assert run(["synth", "--out", str(root), "--count", "2", "--size", "32x32", "--streaks", "0", "--haze", "0"]) == 0
    capsys.readouterr()
    assert run(["eval", "--data", str(root)]) == 0
    out = capsys.readouterr().out
    m = RESULT_RE.match(_result_line(out))
    assert m and m.groups() == ("100.00",) * 3 + ("1.0000",) * 3
    mean_row = [ln for ln in out.splitlines() if ln.startswith("mean")][0]
    assert mean_row.split()[1:] == ["100.00"] * 3 + ["1.000"] * 3


def test_eval_rainy_inputs_grammar(dataset, capsys):
    assert run(["eval", "--data", str(dataset)]) == 0
    out = capsys.readouterr().out
    m = RESULT_RE.match(_result_line(out))
    assert m
    vals = [float(v) for v in m.groups()]
    assert vals[0] < 40 and abs(vals[2] - 0.5 * (vals[0] + vals[1])) <= 0.01
    assert out.splitlines()[0].split() == ["id", "psnr_l", "psnr_r", "psnr_avg", "ssim_l", "ssim_r", "ssim_avg"]


def test_format_result_grammar():
    line = format_result(dict(psnr_l=30.123, psnr_r=29.0, psnr_avg=29.5615,
                              ssim_l=0.91234, ssim_r=0.9, ssim_avg=0.90617))
    assert line == "RESULT psnr_l=30.12 psnr_r=29.00 psnr_avg=29.56 ssim_l=0.9123 ssim_r=0.9000 ssim_avg=0.9062"
    assert RESULT_RE.match(line)


def test_train_eval_infer(tmp_path, dataset, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# tiny run\n" + TINY)
    ckpt = tmp_path / "out" / "m.ckpt"
    assert run(["train", "--data", str(dataset), "--config", str(cfg), "--out", str(ckpt)]) == 0
    model = load_checkpoint(ckpt)
    assert model.config.channels == 12 and model.config.query_base == 4
    rows = (tmp_path / "out" / "m.ckpt.metrics.tsv").read_text().splitlines()
    assert rows[0] == "step\tlr\tloss\tpsnr" and len(rows) == 4

    capsys.readouterr()
    assert run(["eval", "--data", str(dataset), "--ckpt", str(ckpt)]) == 0
    assert RESULT_RE.match(_result_line(capsys.readouterr().out))

    left, right = dataset / "left" / "rainy" / "00000.png", dataset / "right" / "rainy" / "00000.png"
    out_l, out_r = tmp_path / "l.png", tmp_path / "r.png"
    assert run(["infer", "--left", str(left), "--right", str(right), "--ckpt", str(ckpt),
                "--out-left", str(out_l), "--out-right", str(out_r)]) == 0
    assert read_image(out_l).shape == (3, 32, 32) and read_image(out_r).shape == (3, 32, 32)


def test_train_same_seed_same_checkpoint(tmp_path, dataset):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(TINY)
    for name in ("a", "b"):
        assert run(["train", "--data", str(dataset), "--config", str(cfg), "--out", str(tmp_path / name),
                    "--seed", "5"]) == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_train_set_overrides(tmp_path, dataset):
    ckpt = tmp_path / "m.ckpt"
    args = ["train", "--data", str(dataset), "--out", str(ckpt)]
    for item in TINY.split("\n"):
        if item:
            args += ["--set", item.replace(" ", "")]
    assert run(args + ["--set", "use_cmia=false"]) == 0
    cfg = load_checkpoint(ckpt).config
    assert cfg.use_cmia is False and cfg.stages == 1


def test_infer_size_mismatch_is_runtime_error(tmp_path, dataset):
    from mqinet.checkpoint import save_checkpoint
    from mqinet.data import write_image
    from mqinet.network import MQINet, ModelConfig

    save_checkpoint(MQINet(ModelConfig(channels=12, stages=1)), tmp_path / "m.ckpt")
    write_image(np.zeros((3, 32, 40)), tmp_path / "wide.png")
    code = run(["infer", "--left", str(dataset / "left" / "rainy" / "00000.png"), "--right", str(tmp_path / "wide.png"),
                "--ckpt", str(tmp_path / "m.ckpt"), "--out-left", str(tmp_path / "a.png"),
                "--out-right", str(tmp_path / "b.png")])
    assert code == 1


def test_gradcheck_passes(capsys):
    assert run(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "cdqb_forward/params" in out and "FAIL" not in out


@pytest.mark.slow
def test_gradcheck_full_passes(capsys):
    assert run(["gradcheck", "--full"]) == 0
    out = capsys.readouterr().out
    errs = [float(ln.split()[1]) for ln in out.splitlines() if ln.split()[-1] in ("ok", "FAIL")]
    assert "model_loss/views" in out and max(errs) < 1e-4


def test_gradcheck_failure_exit_code(monkeypatch, capsys):
    monkeypatch.setattr(cli, "run_suite", lambda seeds, full: [("fake", 0, 3e-3)])
    assert run(["gradcheck"]) == 1
    assert "FAIL" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    [],
    ["bogus"],
    ["synth", "--out", "x", "--count", "1", "--size", "8x8"],
    ["synth", "--out", "x", "--count", "1", "--size", "big"],
    ["synth", "--count", "1"],
    ["eval"],
    ["train", "--data", "x", "--set", "nope=1"],
    ["train", "--data", "x", "--set", "use_ipa=maybe"],
    ["train", "--data", "x", "--set", "channels=10"],
    ["train"],
])
def test_bad_usage_exits_2(argv, capsys):
    assert run(argv) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_runtime_failures_exit_1(tmp_path, dataset, capsys):
    assert run(["eval", "--data", str(tmp_path / "missing")]) == 1
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    assert run(["eval", "--data", str(dataset), "--ckpt", str(bad)]) == 1
    assert "magic" in capsys.readouterr().err


def test_config_text_parsing():
    cfg = parse_config_text("# comment\n\nchannels = 36  # wider\nuse_cmia=off\nlr = 5e-4\nout = runs/a.ckpt\n")
    assert (cfg.channels, cfg.use_cmia, cfg.lr, cfg.out) == (36, False, 5e-4, "runs/a.ckpt")
    assert cfg.stages == RunConfig().stages


@pytest.mark.parametrize("text", ["colour = red\n", "channels\n", "steps = ten\n"])
def test_config_text_rejects(text):
    with pytest.raises(UsageError):
        parse_config_text(text)


def test_every_key_has_default():
    cfg = RunConfig()
    assert set(vars(cfg)) == {"channels", "stages", "query_base", "seed", "lr", "lr_min", "steps", "batch",
                              "patch", "use_cdqb", "use_ipa", "use_cmia", "cmia_swap", "data_dir", "out"}
    assert cfg.model_config().channels == 24 and cfg.train_config().lr_init == 1e-3


def test_module_entry_point_usage_error():
    proc = subprocess.run([sys.executable, "-m", "mqinet"], capture_output=True, text=True)
    assert proc.returncode == 2 and "error:" in proc.stderr
