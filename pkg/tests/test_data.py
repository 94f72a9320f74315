import math

import numpy as np
import pytest

from segdino import data as DI
from segdino.errors import ConfigError, FormatError, ShapeError
from segdino.metrics import Mask


def test_synth_is_deterministic_and_seed_dependent():
    cfg = DI.SynthConfig(n_samples=5, size=32, shapes=("disk", "rectangle", "annulus"), texture="checker", seed=3)
    a, b = DI.synth_generate(cfg), DI.synth_generate(cfg)
    assert all(np.array_equal(x.image, y.image) and x.mask == y.mask and x.id == y.id for x, y in zip(a, b))
    c = DI.synth_generate(DI.SynthConfig(n_samples=5, size=32, seed=4))
    assert not np.array_equal(a[0].image, c[0].image)
    # a sample depends only on its index, not on how many were generated
    assert np.array_equal(DI.synth_sample(cfg, 3).image, a[3].image)


def test_synth_sample_invariants():
    for s in DI.synth_generate(DI.SynthConfig(n_samples=20, size=32, seed=1)):
        assert s.image.shape == (32, 32, 3) and s.mask.shape == (32, 32)
        assert s.image.min() >= 0 and s.image.max() <= 1
        assert s.mask.is_binary and s.mask.labels.any()


def test_flat_noiseless_background_is_constant():
    for s in DI.synth_generate(DI.SynthConfig(n_samples=4, size=32, texture="flat", noise_std=0.0, seed=2)):
        bg = s.image[s.mask.labels == 0]
        assert np.all(bg == bg[0])


def test_disk_area_matches_formula():
    for size, r in ((64, 10.0), (64, 20.0), (128, 31.5)):
        m = DI.disk_mask(size, size / 2, size / 2, r)
        frac = m.sum() / size**2
        expected = math.pi * r**2 / size**2
        assert abs(frac - expected) <= 0.02 * expected


def test_synth_config_validation():
    with pytest.raises(ConfigError):
        DI.SynthConfig(n_samples=0)
    with pytest.raises(ConfigError):
        DI.SynthConfig(shapes=("star",))
    with pytest.raises(ConfigError):
        DI.SynthConfig(texture="plaid")
    assert any("divisible" in v for v in DI.SynthConfig(size=60).violations(patch_size=16))


def test_resize_examples(rng):
    img = rng.uniform(size=(10, 12, 3))
    assert np.array_equal(DI.resize_image(img, 10, 12), img)
    const = np.full((9, 7, 3), 0.3)
    assert np.allclose(DI.resize_image(const, 20, 5), 0.3, atol=1e-15, rtol=0)
    mask = (rng.uniform(size=(16, 16)) < 0.4).astype(int)
    up = DI.resize_mask(Mask(mask), 45, 37)
    assert set(np.unique(up.labels)) <= {0, 1}
    multi = rng.integers(0, 5, (8, 8))
    for oh, ow in ((3, 5), (17, 8), (8, 8)):
        assert set(np.unique(DI.resize_mask(multi, oh, ow).labels)) <= set(np.unique(multi))
    assert DI.resize_mask(multi, 8, 8) == Mask(multi)


def test_normalize_examples(rng):
    mean_img = np.broadcast_to(np.array(DI.DEFAULT_MEAN), (3, 3, 3))
    assert np.allclose(DI.normalize(mean_img), 0.0, atol=1e-15)
    assert abs(DI.normalize(np.ones((1, 1, 3)))[0, 0, 0] - 2.2489) <= 1e-4
    img = rng.uniform(size=(5, 6, 3))
    assert np.max(np.abs(DI.denormalize(DI.normalize(img)) - img)) <= 1e-6
    custom = DI.normalize(np.full((1, 1, 3), 0.5), mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25))
    assert np.all(custom == 0)


def test_pgm_mask_roundtrip(rng, tmp_path):
    m = Mask((rng.uniform(size=(13, 21)) < 0.5).astype(np.int64))
    DI.save_mask(m, tmp_path / "m.pgm")
    assert DI.load_mask(tmp_path / "m.pgm") == m
    raw = (tmp_path / "m.pgm").read_bytes()
    assert raw.startswith(b"P5\n21 13\n255\n") and set(raw[len(b"P5\n21 13\n255\n"):]) <= {0, 255}
    multi = Mask(rng.integers(0, 4, (6, 6)))
    assert DI.decode_pgm_mask(DI.encode_pgm_mask(multi)) == multi


def test_pgm_header_and_errors():
    payload = bytes([0, 255] * 2048)
    m = DI.decode_pgm_mask(b"P5\n64 64\n255\n" + payload)
    assert m.shape == (64, 64) and m.labels.sum() == 2048
    assert DI.decode_pgm_mask(b"P5 # comment\n2 1\n255\n\x00\xff").labels.tolist() == [[0, 1]]
    with pytest.raises(FormatError, match="offset"):
        DI.decode_pgm_mask(b"P5\n64 64\n255\n" + payload[:-1])
    with pytest.raises(FormatError) as info:
        DI.decode_pgm_mask(b"P6\n1 1\n255\n\x00")
    assert info.value.offset == 0
    with pytest.raises(FormatError):
        DI.decode_pgm_mask(b"P5\n64\n")


def test_ppm_roundtrip_is_quantised(rng, tmp_path):
    img = rng.uniform(size=(7, 9, 3))
    DI.save_image(img, tmp_path / "x.ppm")
    back = DI.load_image(tmp_path / "x.ppm")
    assert back.shape == img.shape and np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12
    DI.save_image(back, tmp_path / "y.ppm")
    assert (tmp_path / "x.ppm").read_bytes() == (tmp_path / "y.ppm").read_bytes()
    with pytest.raises(ShapeError):
        DI.encode_ppm(np.zeros((4, 4)))
    with pytest.raises(FormatError):
        DI.decode_ppm(b"P6\n2 2\n255\n\x00\x00")


def test_split_is_disjoint_covering_and_seeded():
    samples = DI.synth_generate(DI.SynthConfig(n_samples=200, size=8, seed=0, min_extent=0.2, max_extent=0.3))
    train, test = DI.split(samples, seed=0)
    ids = {s.id for s in samples}
    assert {s.id for s in train} | {s.id for s in test} == ids
    assert not {s.id for s in train} & {s.id for s in test}
    assert 0.7 <= len(train) / 200 <= 0.9
    assert DI.split(samples, seed=0) == (train, test)
    assert [s.id for s in DI.split(samples, seed=1)[1]] != [s.id for s in test]


def test_dataset_write_and_load(tmp_path):
    samples = DI.synth_generate(DI.SynthConfig(n_samples=3, size=16, seed=9))
    manifest = DI.write_dataset(samples, tmp_path / "ds")
    lines = manifest.read_text().splitlines()
    assert lines[0] == "s00000\timages/s00000.ppm\tmasks/s00000.pgm"
    loaded = DI.load_dataset(manifest)
    assert [s.id for s in loaded] == [s.id for s in samples]
    assert all(a.mask == b.mask for a, b in zip(loaded, samples))
    assert all(np.max(np.abs(a.image - b.image)) <= 0.5 / 255 + 1e-12 for a, b in zip(loaded, samples))
    (tmp_path / "bad.tsv").write_text("only-one-field\n")
    with pytest.raises(FormatError):
        DI.read_manifest(tmp_path / "bad.tsv")


def test_sample_shape_check():
    with pytest.raises(ShapeError):
        DI.Sample(np.zeros((4, 4, 3)), Mask(np.zeros((4, 5), int)), "x")
