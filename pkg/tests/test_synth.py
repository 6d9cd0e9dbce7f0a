import filecmp
from dataclasses import replace

import numpy as np
import pytest

from ratnet.errors import ConfigError, FormatError
from ratnet.losses import psnr
from ratnet.region import validate_partition
from ratnet.synth import SynthSpec, _sample_seed, degrade, gen_dataset, gen_sample, load_dataset, load_sample, read_manifest


def test_no_degradation_is_identity():
    s = gen_sample(SynthSpec(degradation="noise", sigma=0.0, seed=3))
    np.testing.assert_array_equal(s.lq.data, s.hq.data)
    s = gen_sample(SynthSpec(degradation="none", seed=3))
    np.testing.assert_array_equal(s.lq.data, s.hq.data)


def test_noise_psnr_on_mid_gray():
    hq = np.full((1, 1, 64, 64), 0.5)
    lq = degrade(hq, "noise", sigma=0.1, seed=0)
    assert psnr(lq.data, hq) == pytest.approx(20.0, abs=0.5)


def test_same_seed_same_pair():
    a = gen_sample(SynthSpec(seed=11))
    b = gen_sample(SynthSpec(seed=11))
    np.testing.assert_array_equal(a.hq.data, b.hq.data)
    np.testing.assert_array_equal(a.lq.data, b.lq.data)
    assert a.part == b.part
    c = gen_sample(SynthSpec(seed=12))
    assert not np.array_equal(a.hq.data, c.hq.data)


@pytest.mark.parametrize("layout", ["voronoi", "rectangles"])
@pytest.mark.parametrize("deg", ["noise", "blur", "down_up"])
def test_sample_invariants(layout, deg):
    s = gen_sample(SynthSpec(layout=layout, degradation=deg, textures="sinusoid,constant,gradient", seed=5))
    assert validate_partition(s.part) == []
    for img in (s.hq.data, s.lq.data):
        assert img.shape == (1, 1, 32, 32)
        assert img.min() >= 0.0 and img.max() <= 1.0


def test_box_blur_k1_identity_and_impulse_plateau():
    img = np.zeros((7, 7))
    img[3, 3] = 1.0
    np.testing.assert_array_equal(degrade(img, "blur", k=1).data, img)
    out = degrade(img, "blur", k=3).data
    ref = np.zeros((7, 7))
    ref[2:5, 2:5] = 1.0 / 9.0
    np.testing.assert_allclose(out, ref, atol=1e-15)


def test_down_up_constant_unchanged():
    img = np.full((1, 1, 16, 16), 0.37)
    for f in (2, 4):
        np.testing.assert_allclose(degrade(img, "down_up", factor=f).data, img, atol=1e-15)


def test_down_up_linear_ramp_reconstructed_inside():
    a, s = 0.1, 0.05
    ramp = np.tile(a + s * np.arange(16.0), (16, 1))
    out = degrade(ramp, "down_up", factor=2).data
    # nearest-down keeps source column 2i+1; half-pixel bilinear-up of that linear
    # sequence lands at a + s*(x + 0.5) away from the clamped borders
    np.testing.assert_allclose(out[:, 1:-1], np.tile(a + s * (np.arange(16.0) + 0.5), (16, 1))[:, 1:-1], atol=1e-12)


def test_spec_validation():
    for bad in (dict(height=8), dict(layout="hex"), dict(textures="plasma"), dict(factor=3), dict(blur_k=4)):
        with pytest.raises(ConfigError):
            SynthSpec(**bad).validate()


def test_dataset_roundtrip(tmp_path):
    spec = SynthSpec(seed=4)
    lines = gen_dataset(spec, 8, tmp_path)
    assert len(lines) == 8
    assert len((tmp_path / "manifest.txt").read_text().splitlines()) == 8
    loaded = load_dataset(tmp_path)
    assert len(loaded) == 8
    for i, s in enumerate(loaded):
        ref = gen_sample(replace(spec, seed=_sample_seed(4, i)))
        np.testing.assert_array_equal(s.hq.data, ref.hq.data)
        np.testing.assert_array_equal(s.lq.data, ref.lq.data)
        assert s.part == ref.part
        assert validate_partition(s.part) == []
    one = load_sample(tmp_path, 5)
    np.testing.assert_array_equal(one.lq.data, loaded[5].lq.data)
    with pytest.raises(FormatError):
        load_sample(tmp_path, 99)


def test_dataset_regeneration_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    gen_dataset(SynthSpec(seed=7), 4, a, pgm=True)
    gen_dataset(SynthSpec(seed=7), 4, b, pgm=True)
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    _, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    assert mismatch == [] and errors == []


def test_pgm_header(tmp_path):
    gen_dataset(SynthSpec(seed=1, height=16, width=24), 1, tmp_path, pgm=True)
    raw = (tmp_path / "hq_0000.pgm").read_bytes()
    assert raw.startswith(b"P5\n24 16\n255\n")
    assert len(raw) == len(b"P5\n24 16\n255\n") + 16 * 24


def test_bad_manifest(tmp_path):
    with pytest.raises(FormatError):
        read_manifest(tmp_path)
    (tmp_path / "manifest.txt").write_text("0\tonly_two\n")
    with pytest.raises(FormatError):
        read_manifest(tmp_path)
