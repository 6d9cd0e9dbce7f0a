import filecmp
import subprocess
import sys

import numpy as np
import pytest

from ratnet import _kernels as K
from ratnet.bench import BenchCase, BenchReport, bench_attn
from ratnet.cli import main
from ratnet.region import MaskSet, RegionPartition, load_partition, save_masks, save_partition


# ---------------------------------------------------------------- bench


def test_bench_small_contract():
    rep = bench_attn(sizes=(64, 144), region_counts=(1, 4), repeats=5, channels=16, heads=2)
    assert [(c.n, c.num_regions) for c in rep.cases] == [(64, 1), (64, 4), (144, 1), (144, 4)]
    assert rep.ok()
    for c in rep.cases:
        assert c.dense_seconds > 0 and c.dense_core_seconds > 0 and c.gathered_seconds > 0
        assert sum(c.region_sizes) == c.n
        assert c.divergence <= 1e-5
    lines = rep.lines()
    assert lines[0].startswith("backend=")
    assert lines[-1].startswith("dense_loglog_slope=")


def test_dense_slope_fit():
    rep = BenchReport("numpy", 8, 2, 5)
    for n in (10, 100, 1000):
        rep.cases.append(BenchCase(n, 1, [n], 1.0, 1e-6 * n**2, 1.0, 0, 0, 0.0))
    assert rep.dense_slope() == pytest.approx(2.0, abs=1e-9)


@pytest.mark.skipif(K.numba_impl is None, reason="numba not installed")
def test_backends_agree():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 3, size=20)
    logits = rng.normal(size=(2, 20, 20))
    np.testing.assert_allclose(
        K.numba_impl.region_softmax(logits, labels, -1000.0), K.numpy_impl.region_softmax(logits, labels, -1000.0),
        rtol=1e-12, atol=1e-300,
    )
    q, k, v = (rng.normal(size=(2, 20, 4)) for _ in range(3))
    np.testing.assert_allclose(
        K.numba_impl.dense_masked_core(q, k, v, labels, -1000.0, 0.5),
        K.numpy_impl.dense_masked_core(q, k, v, labels, -1000.0, 0.5), rtol=1e-10,
    )
    masks = (rng.uniform(size=(5, 7, 9)) < 0.4).astype(np.uint8)
    areas = masks.reshape(5, -1).sum(1).astype(np.int64)
    np.testing.assert_array_equal(K.numba_impl.paint_smallest(masks, areas), K.numpy_impl.paint_smallest(masks, areas))


def test_numpy_backend_selected_by_env(tmp_path):
    code = "import ratnet._kernels as K; print(K.BACKEND)"
    out = subprocess.run(
        [sys.executable, "-c", code], env={"RATNET_DISABLE_NUMBA": "1", "PATH": ""}, capture_output=True, text=True
    )
    assert out.stdout.strip() == "numpy"


# ---------------------------------------------------------------- CLI


def test_gen_data_deterministic(tmp_path, capsys):
    for d in ("a", "b"):
        assert main(["gen-data", "--count", "4", "--seed", "7", "--out", str(tmp_path / d)]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(names) == 4 * 3 + 2
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert mismatch == [] and errors == []


def test_mask_tool_validate(tmp_path, capsys):
    good = tmp_path / "good.ratm"
    save_partition(good, RegionPartition(np.array([[0, 1], [1, 0]]), 2))
    assert main(["mask-tool", "validate", str(good)]) == 0
    bad = tmp_path / "bad.ratm"
    raw = bytearray(good.read_bytes())
    raw[-2] = 7
    bad.write_bytes(bytes(raw))
    capsys.readouterr()
    assert main(["mask-tool", "validate", str(bad)]) != 0
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    assert err[0].startswith("FormatError: ") and "pixel (1, 1)" in err[0]


def test_mask_tool_info_and_convert(tmp_path, capsys):
    m = np.zeros((2, 4, 6), dtype=np.uint8)
    m[0] = 1
    m[1, :2, :2] = 1
    save_masks(tmp_path / "m.rats", MaskSet(4, 6, m))
    out = tmp_path / "p.ratm"
    assert main(["mask-tool", "from-binary-masks", str(tmp_path / "m.rats"), "--height", "4", "--width", "6",
                 "--out", str(out)]) == 0
    p = load_partition(out)
    assert p.num_regions == 2 and (p.labels[:2, :2] == 1).all()
    capsys.readouterr()
    assert main(["mask-tool", "info", str(out)]) == 0
    assert capsys.readouterr().out.splitlines() == ["height=4 width=6 regions=2", "sizes=20,4"]
    assert main(["mask-tool", "from-binary-masks", str(tmp_path / "m.rats"), "--height", "5", "--width", "6",
                 "--out", str(out)]) == 1


def test_train_and_eval_commands(tmp_path, capsys):
    data = tmp_path / "data"
    main(["gen-data", "--count", "6", "--seed", "1", "--height", "16", "--width", "16", "--out", str(data)])
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"data = {data}\nbase_channels = 4\nheads = 2\nn3 = 1\nlog_every = 2\neval_every = 2\n")
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--steps", "4", "--loss", "l1", "--attn", "wmsa", "--seed", "3",
                 "--out", str(run)]) == 0
    out = capsys.readouterr().out
    assert "step=4 loss=" in out
    assert main(["eval", "--data", str(data), "--checkpoint", str(run / "final.ratk"), "--per-sample"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 7
    assert lines[-1].startswith("psnr_mean=") and lines[-1].endswith("n=6")


def test_eval_of_inputs(tmp_path, capsys):
    data = tmp_path / "data"
    main(["gen-data", "--count", "3", "--seed", "2", "--out", str(data)])
    capsys.readouterr()
    assert main(["eval", "--data", str(data)]) == 0
    assert capsys.readouterr().out.startswith("psnr_mean=")


def test_errors_are_one_line(tmp_path, capsys):
    assert main(["eval", "--data", str(tmp_path / "nope")]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("FormatError: ")
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("steps = many\n")
    assert main(["train", "--config", str(cfg)]) == 1
    assert capsys.readouterr().err.startswith("ConfigError: ")


def test_bad_choice_is_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["train", "--loss", "l2"])
    assert e.value.code == 2


def test_grad_check_command(capsys):
    assert main(["grad-check", "--seeds", "1", "--params", "20"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out and all(line.startswith("PASS ") for line in out)


def test_bench_command(capsys):
    assert main(["bench-attn", "--sizes", "16", "64", "--repeats", "5", "--channels", "8", "--heads", "2"]) == 0
    assert "all_within_tol=True" in capsys.readouterr().out


def test_console_script_entry():
    out = subprocess.run([sys.executable, "-m", "ratnet.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "mask-tool" in out.stdout
