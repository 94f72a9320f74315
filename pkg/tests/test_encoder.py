import time

import numpy as np
import pytest

from segdino import encoder as E
from segdino.errors import ConfigError, ShapeError


@pytest.fixture(scope="module")
def cfg():
    return E.EncoderConfig(image_h=32, image_w=32, patch_size=8, embed_dim=32, depth=3, heads=4,
                           tap_layers=(1, 2, 3), n_register_tokens=4, seed=3)


@pytest.fixture(scope="module")
def params(cfg):
    return E.init_frozen(cfg, "f64")


@pytest.mark.parametrize("h,p,n", [(256, 16, 256), (64, 8, 64)])
def test_patch_count(h, p, n):
    assert E.patch_count(E.EncoderConfig(image_h=h, image_w=h, patch_size=p, tap_layers=(4,))) == n


def test_indivisible_image_rejected():
    with pytest.raises(ConfigError, match="divisible"):
        E.EncoderConfig(image_h=60, image_w=64, patch_size=16)


@pytest.mark.parametrize("kw", [dict(tap_layers=(2, 1)), dict(tap_layers=(0, 1)), dict(tap_layers=(5,)),
                                dict(embed_dim=30, heads=4), dict(tap_layers=())])
def test_config_invariants(kw):
    with pytest.raises(ConfigError):
        E.EncoderConfig(**kw)


def test_patchify_layout_enumerated():
    # 4x4 single-channel image with value 10*row + col; p=2
    img = np.array([[10 * r + c for c in range(4)] for r in range(4)], dtype=float)[..., None]
    patches = E.patchify(img, 2)
    assert patches[0].tolist() == [0, 1, 10, 11]
    assert patches[1].tolist() == [2, 3, 12, 13]
    assert patches[2].tolist() == [20, 21, 30, 31]


def test_patchify_channel_minor():
    img = np.arange(2 * 2 * 3, dtype=float).reshape(2, 2, 3)
    assert E.patchify(img, 2)[0].tolist() == list(range(12))


def test_patchify_roundtrip_and_constant(rng):
    x = rng.standard_normal((16, 24, 3))
    assert E.depatchify(E.patchify(x, 8), 8, 16, 24).tobytes() == x.tobytes()
    rows = E.patchify(np.full((16, 16, 3), 0.3), 4)
    assert np.all(rows == rows[0])


def test_patchify_divisibility():
    with pytest.raises(ShapeError):
        E.patchify(np.zeros((10, 8, 3)), 4)


def test_init_deterministic_and_seeded(cfg):
    a, b = E.init_frozen(cfg), E.init_frozen(cfg)
    assert a.checksum() == b.checksum()
    c = E.init_frozen(E.EncoderConfig(**{**cfg.__dict__, "seed": 4}))
    assert any(not np.array_equal(a[n], c[n]) for n in a.arrays)


def test_init_rules(cfg, params):
    for name, arr in params.arrays.items():
        short = name.rsplit(".", 1)[-1]
        if short.endswith("_g"):
            assert np.all(arr == 1), name
        elif short.endswith("_b"):
            assert np.all(arr == 0), name
        else:
            assert np.all(np.abs(arr) <= 0.04), name
            assert 0.01 < arr.std() < 0.02, name


def test_params_shapes_and_count(cfg, params):
    for name, shape in E.param_shapes(cfg).items():
        assert params[name].shape == shape
    assert params.count() == E.frozen_param_count(cfg)


def test_params_are_read_only(params):
    with pytest.raises(ValueError):
        params["patch_w"][0, 0] = 1.0
    with pytest.raises(TypeError):
        params.arrays["patch_w"] = np.zeros(1)


def test_block_shape_and_attention_rows(cfg, params, rng):
    z = rng.standard_normal((20, cfg.embed_dim))
    seen = []
    out = E.transformer_block(z, params.block(0), cfg.heads, hook=seen.append)
    assert out.shape == z.shape
    (w,) = seen
    assert w.shape == (cfg.heads, 20, 20)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)


def _zero_outputs(params):
    arrays = dict(params.arrays)
    for name in arrays:
        if name.endswith(("proj_w", "fc2_w")):
            arrays[name] = np.zeros_like(arrays[name])
    return E.EncoderParams(arrays, params.depth)


def test_zeroed_block_is_identity(cfg, params, rng):
    z = rng.standard_normal((7, cfg.embed_dim))
    bp = _zero_outputs(params).block(1)
    assert np.array_equal(E.transformer_block(z, bp, cfg.heads), z)


def test_forward_collect_shapes_and_discard(cfg, params, rng):
    img = rng.uniform(size=(32, 32, 3))
    taps = E.forward_collect(img, params, cfg)
    assert len(taps) == len(cfg.tap_layers)
    assert all(t.shape == (E.patch_count(cfg), cfg.embed_dim) for t in taps)


def test_last_tap_equals_full_forward(cfg, params, rng):
    img = rng.uniform(size=(32, 32, 3))
    last_only = E.EncoderConfig(**{**cfg.__dict__, "tap_layers": (cfg.depth,)})
    (tap,) = E.forward_collect(img, params, last_only)
    z = E.embed(img, params, cfg)
    for i in range(cfg.depth):
        z = E.transformer_block(z, params.block(i), cfg.heads)
    assert np.array_equal(tap, z[cfg.n_register_tokens:])
    assert np.array_equal(tap, E.forward_collect(img, params, cfg)[-1])


def test_residual_identity_makes_all_taps_equal(cfg, params, rng):
    img = rng.uniform(size=(32, 32, 3))
    taps = E.forward_collect(img, _zero_outputs(params), cfg)
    z0 = E.embed(img, params, cfg)[cfg.n_register_tokens:]
    for t in taps:
        assert np.array_equal(t, z0)


def test_register_tokens_change_nothing_in_shape(rng):
    base = dict(image_h=16, image_w=16, patch_size=4, embed_dim=16, depth=2, heads=2, tap_layers=(1, 2))
    for r in (0, 4):
        cfg = E.EncoderConfig(**base, n_register_tokens=r)
        taps = E.forward_collect(rng.uniform(size=(16, 16, 3)), E.init_frozen(cfg), cfg)
        assert taps[0].shape == (16, 16)


def test_forward_is_pure(cfg, params, rng):
    img = rng.uniform(size=(32, 32, 3))
    before = params.checksum()
    a = E.forward_collect(img, params, cfg)
    b = E.forward_collect(img, params, cfg)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
    assert params.checksum() == before


def test_image_shape_mismatch(cfg, params):
    with pytest.raises(ShapeError):
        E.forward_collect(np.zeros((16, 32, 3)), params, cfg)


def test_tap_snapshots_cost_no_extra_blocks(rng):
    cfg_all = E.EncoderConfig(image_h=64, image_w=64, depth=4, tap_layers=(1, 2, 3, 4))
    cfg_last = E.EncoderConfig(image_h=64, image_w=64, depth=4, tap_layers=(4,))
    p = E.init_frozen(cfg_all)
    img = rng.uniform(size=(64, 64, 3))

    def best(cfg):
        times = []
        for _ in range(15):
            t0 = time.perf_counter()
            E.forward_collect(img, p, cfg)
            times.append(time.perf_counter() - t0)
        return min(times)

    # snapshots are copies, not re-runs: 4 taps must not cost anything like 4 forwards
    assert best(cfg_all) < 1.5 * best(cfg_last)
