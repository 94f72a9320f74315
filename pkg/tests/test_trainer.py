import math

import numpy as np
import pytest

from segdino import decoder as D
from segdino import trainer as TR
from segdino.data import SynthConfig, normalize, synth_generate
from segdino.encoder import EncoderConfig, forward_collect, init_frozen
from segdino.errors import DataError, NumericError, ShapeError

SMALL_ENC = EncoderConfig(image_h=32, image_w=32, patch_size=8, embed_dim=16, depth=2, heads=2, tap_layers=(1, 2),
                          n_register_tokens=2, seed=5)
SMALL_DEC = D.DecoderConfig(common_channels=6, tap_count=2, hidden_dim=10)


# --------------------------------------------------------------------------- cross-entropy

def test_ce_uniform_is_log_n():
    for n in (2, 3, 7):
        loss, _ = TR.cross_entropy(np.zeros((5, n)), np.arange(5) % n)
        assert abs(loss - math.log(n)) <= 1e-12


def test_ce_confident_and_large_logits():
    logits = np.array([[100.0, 0.0], [0.0, 100.0]])
    loss, _ = TR.cross_entropy(logits, np.array([0, 1]))
    assert loss < 1e-10
    big = np.array([[1e3, -1e3], [-1e3, 1e3], [1e3, 1e3]])
    loss, grad = TR.cross_entropy(big, np.array([1, 1, 0]))
    assert math.isfinite(loss) and np.all(np.isfinite(grad))
    assert abs(loss - (2000 + 0 + math.log(2)) / 3) < 1e-9


def test_ce_gradient_rows_sum_to_zero(rng):
    logits = rng.standard_normal((40, 4)) * 3
    _, grad = TR.cross_entropy(logits, rng.integers(0, 4, 40))
    assert np.max(np.abs(grad.sum(axis=1))) <= 1e-12


@pytest.mark.parametrize("weights", [None, np.array([0.3, 1.7, 1.0])])
def test_ce_gradient_matches_finite_differences(rng, weights):
    logits = rng.standard_normal((6, 3))
    labels = rng.integers(0, 3, 6)
    _, grad = TR.cross_entropy(logits, labels, weights)
    h = 1e-6
    for i in range(6):
        for j in range(3):
            up, down = logits.copy(), logits.copy()
            up[i, j] += h
            down[i, j] -= h
            fd = (TR.cross_entropy(up, labels, weights)[0] - TR.cross_entropy(down, labels, weights)[0]) / (2 * h)
            assert abs(fd - grad[i, j]) < 1e-8


def test_ce_label_out_of_range_reports_index():
    with pytest.raises(DataError, match="index 2") as info:
        TR.cross_entropy(np.zeros((3, 2)), np.array([0, 1, 2]))
    assert info.value.index == 2


# --------------------------------------------------------------------------- label pooling

def test_pool_labels_rules():
    assert np.all(TR.pool_labels(np.ones((8, 8), int), (2, 2)) == 1)
    assert TR.pool_labels(np.array([[0, 0], [1, 1]]), (1, 1)).tolist() == [0]
    assert TR.pool_labels(np.array([[1, 1], [1, 0]]), (1, 1)).tolist() == [1]
    m = np.zeros((4, 4), int)
    m[:2, 2:] = 1
    assert TR.pool_labels(m, (2, 2)).tolist() == [0, 1, 0, 0]
    with pytest.raises(ShapeError):
        TR.pool_labels(np.zeros((6, 6), int), (4, 4))


# --------------------------------------------------------------------------- finite differences

def test_finite_diff_quadratic_and_linear(rng):
    theta = rng.standard_normal(5)
    p = D.DecoderParams({"head_w1": theta.copy()})
    for i in range(5):
        g = TR.finite_diff_grad(lambda q: 0.5 * float(q["head_w1"] @ q["head_w1"]), p, "head_w1", (i,), 1e-5)
        assert abs(g - theta[i]) <= 1e-10
    c = np.array([3.0, -2.0, 0.5, 1.0, 4.0])
    p = D.DecoderParams({"head_w1": np.array([0.5, 0.25, -1.0, 2.0, 0.0])})
    for i in range(5):
        assert TR.finite_diff_grad(lambda q: float(c @ q["head_w1"]), p, "head_w1", (i,), 0.25) == c[i]
    assert np.array_equal(p["head_w1"], [0.5, 0.25, -1.0, 2.0, 0.0])


# --------------------------------------------------------------------------- backward

def _batch(rng, enc, dec, b=2):
    encoder = init_frozen(enc, "f64")
    grid = dec.grid_for(enc)
    taps, pixel = [], []
    for _ in range(b):
        taps.append(forward_collect(normalize(rng.uniform(size=(enc.image_h, enc.image_w, 3))), encoder, enc))
        m = np.zeros((enc.image_h, enc.image_w), int)
        y0, x0 = rng.integers(0, enc.image_h // 2, 2)
        m[y0:y0 + enc.image_h // 2, x0:x0 + enc.image_w // 3] = 1
        pixel.append(m)
    stacked = [np.stack([t[k] for t in taps]) for k in range(len(taps[0]))]
    divides = enc.image_h % grid[0] == 0 and enc.image_w % grid[1] == 0
    tokens = np.stack([TR.pool_labels(m, grid) for m in pixel]) if divides else None
    return TR.Batch(stacked, tokens, np.stack(pixel))


def test_zero_upstream_gradient_gives_zero_grads(rng):
    batch = _batch(rng, SMALL_ENC, SMALL_DEC)
    params = TR.random_decoder_params(SMALL_DEC, SMALL_ENC.embed_dim, 0)
    trace = D.decode(batch.taps, params, SMALL_ENC.grid, SMALL_ENC.grid)
    grads = TR.backward_decoder(trace, np.zeros_like(trace.logits), params, SMALL_ENC.grid, SMALL_ENC.grid)
    assert all(np.all(g == 0) for _, g in grads.items())
    assert list(grads) == list(params)


def _check_all(batch, params, grid, mode, enc=SMALL_ENC):
    _, grads = TR.loss_and_grads(batch, params, enc.grid, grid, mode)

    def loss_fn(p):
        return TR.loss_and_grads(batch, p, enc.grid, grid, mode, want_grads=False)[0]

    worst = {}
    for name in params:
        g = grads[name]
        errs = []
        for flat in range(g.size):
            idx = np.unravel_index(flat, g.shape)
            step = 1e-5 * max(1.0, abs(params[name][idx]))
            errs.append(TR.relative_error(g[idx], TR.finite_diff_grad(loss_fn, params, name, idx, step)))
        worst[name] = max(errs)
    return grads, worst


@pytest.mark.parametrize("mode,grid", [("token", None), ("pixel", None), ("token", (8, 8)), ("pixel", (3, 5))])
def test_backward_matches_finite_differences_every_element(rng, mode, grid):
    dec = D.DecoderConfig(common_channels=6, tap_count=2, hidden_dim=10, common_grid=grid)
    batch = _batch(rng, SMALL_ENC, dec)
    params = TR.random_decoder_params(dec, SMALL_ENC.embed_dim, 1)
    _, worst = _check_all(batch, params, dec.grid_for(SMALL_ENC), mode)
    assert max(worst.values()) <= 1e-4, worst


def test_unused_tap_gets_exactly_zero_gradient(rng):
    # head_w1 rows reading tap 1's columns are zero, so tap 1's fused block gets no upstream gradient
    batch = _batch(rng, SMALL_ENC, SMALL_DEC)
    params = TR.random_decoder_params(SMALL_DEC, SMALL_ENC.embed_dim, 2)
    c = SMALL_DEC.common_channels
    params["head_w1"][c:2 * c] = 0.0
    params["proj1_w"][:] = 0.0
    params["proj1_b"][:] = 0.0
    grads, worst = _check_all(batch, params, SMALL_ENC.grid, "token")
    assert np.all(grads["proj1_w"] == 0) and np.all(grads["proj1_b"] == 0)
    assert np.all(grads["head_w1"][c:2 * c] == 0)  # tap 1 features are identically zero
    assert np.any(grads["proj0_w"] != 0) and np.any(grads["proj0_b"] != 0)
    assert max(worst.values()) <= 1e-4


def test_class_weighted_backward(rng):
    batch = _batch(rng, SMALL_ENC, SMALL_DEC)
    params = TR.random_decoder_params(SMALL_DEC, SMALL_ENC.embed_dim, 3)
    w = np.array([0.4, 2.5])
    _, grads = TR.loss_and_grads(batch, params, SMALL_ENC.grid, SMALL_ENC.grid, "token", w)

    def loss_fn(p):
        return TR.loss_and_grads(batch, p, SMALL_ENC.grid, SMALL_ENC.grid, "token", w, want_grads=False)[0]

    for name in ("proj0_w", "head_b1", "head_w2"):
        idx = np.unravel_index(int(np.argmax(np.abs(grads[name]))), grads[name].shape)
        fd = TR.finite_diff_grad(loss_fn, params, name, idx, 1e-5)
        assert TR.relative_error(grads[name][idx], fd) <= 1e-4


def test_gradcheck_reports_groups_and_catches_perturbation():
    groups = TR.gradcheck(SMALL_ENC, SMALL_DEC, elements_per_group=8)
    assert len(groups) == 2 * SMALL_DEC.tap_count + 4
    assert all(g.passed for g in groups)
    bad = TR.gradcheck(SMALL_ENC, SMALL_DEC, elements_per_group=8, perturb="proj0_w")
    assert [g.name for g in bad if not g.passed] == ["proj0_w"]


# --------------------------------------------------------------------------- AdamW

def _one_param(value, dtype=np.float64):
    return D.DecoderParams({"w": np.array(value, dtype=dtype)})


def test_adamw_zero_grad_no_decay_is_noop(rng):
    p = D.DecoderParams({"w": rng.standard_normal((3, 4))})
    cfg = TR.TrainConfig(learning_rate=1e-2, weight_decay=0.0)
    new, state = TR.adamw_step(p, p.zeros_like(), TR.AdamWState.zeros_like(p), cfg)
    assert np.array_equal(new["w"], p["w"]) and state.t == 1


def test_adamw_zero_grad_decay_is_exact_scale(rng):
    p = D.DecoderParams({"w": rng.standard_normal((3, 4))})
    cfg = TR.TrainConfig(learning_rate=1e-2, weight_decay=0.1)
    new, _ = TR.adamw_step(p, p.zeros_like(), TR.AdamWState.zeros_like(p), cfg)
    assert np.array_equal(new["w"], p["w"] * (1 - 1e-2 * 0.1))


def test_adamw_first_step_hand_value():
    # t=1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    cfg = TR.TrainConfig(learning_rate=0.1, weight_decay=0.0)
    p = _one_param([1.0])
    new, state = TR.adamw_step(p, _one_param([1.0]), TR.AdamWState.zeros_like(p), cfg)
    assert abs(new["w"][0] - 0.9) <= 1e-6
    assert abs(new["w"][0] - (1 - 0.1 / (1 + 1e-8))) <= 1e-15
    assert np.all(state.v["w"] >= 0)


def test_adamw_does_not_mutate_inputs(rng):
    p = D.DecoderParams({"w": rng.standard_normal(4)})
    g = D.DecoderParams({"w": rng.standard_normal(4)})
    s = TR.AdamWState.zeros_like(p)
    before = p["w"].copy()
    TR.adamw_step(p, g, s, TR.TrainConfig())
    assert np.array_equal(p["w"], before) and s.t == 0 and np.all(s.m["w"] == 0)


def test_adamw_matches_torch_trajectory(rng):
    torch = pytest.importorskip("torch")
    theta0 = rng.standard_normal((4, 3))
    grads = [rng.standard_normal((4, 3)) for _ in range(25)]
    cfg = TR.TrainConfig(learning_rate=3e-3, weight_decay=0.05, beta1=0.8, beta2=0.95, eps_adam=1e-7)
    p = D.DecoderParams({"w": theta0.copy()})
    s = TR.AdamWState.zeros_like(p)
    for g in grads:
        p, s = TR.adamw_step(p, D.DecoderParams({"w": g}), s, cfg)

    t = torch.tensor(theta0, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.AdamW([t], lr=3e-3, betas=(0.8, 0.95), eps=1e-7, weight_decay=0.05)
    for g in grads:
        opt.zero_grad()
        t.grad = torch.tensor(g, dtype=torch.float64)
        opt.step()
    np.testing.assert_allclose(p["w"], t.detach().numpy(), rtol=0, atol=1e-12)


def test_train_config_invariants():
    from segdino.errors import ConfigError
    for kw in (dict(learning_rate=0), dict(beta1=1.0), dict(beta2=-0.1), dict(batch_size=0)):
        with pytest.raises(ConfigError):
            TR.TrainConfig(**kw)


# --------------------------------------------------------------------------- training loop

@pytest.fixture(scope="module")
def tiny_data():
    return synth_generate(SynthConfig(n_samples=6, size=32, seed=7))


def test_train_is_deterministic_and_leaves_encoder_alone(tiny_data):
    cfg = TR.TrainConfig(epochs=3, batch_size=4, seed=1)
    encoder = init_frozen(SMALL_ENC)
    before = encoder.checksum()
    a = TR.train(tiny_data, SMALL_ENC, SMALL_DEC, cfg, encoder=encoder, preprocess=normalize)
    b = TR.train(tiny_data, SMALL_ENC, SMALL_DEC, cfg, encoder=encoder, preprocess=normalize)
    assert [r.loss for r in a.losses] == [r.loss for r in b.losses]
    assert len(a.losses) == 3 * 2
    assert [(r.step, r.epoch) for r in a.losses][:3] == [(1, 1), (2, 1), (3, 2)]
    assert all(np.array_equal(a.params[n], b.params[n]) for n in a.params)
    assert encoder.checksum() == before == a.encoder_checksum
    c = TR.train(tiny_data, SMALL_ENC, SMALL_DEC, TR.TrainConfig(epochs=3, seed=2), encoder=encoder, preprocess=normalize)
    assert [r.loss for r in a.losses] != [r.loss for r in c.losses]


def test_train_pixel_mode_and_class_weights_run(tiny_data):
    cfg = TR.TrainConfig(epochs=2, loss_resolution="pixel", class_weighting="inverse_frequency")
    dec = D.DecoderConfig(common_channels=6, tap_count=2, hidden_dim=10, loss_resolution="pixel")
    res = TR.train(tiny_data, SMALL_ENC, dec, cfg, preprocess=normalize)
    assert res.class_weights is not None and res.class_weights.shape == (2,)
    assert all(math.isfinite(r.loss) for r in res.losses)


def test_train_errors(tiny_data, monkeypatch):
    with pytest.raises(DataError):
        TR.train([], SMALL_ENC, SMALL_DEC, TR.TrainConfig())
    monkeypatch.setattr(TR, "cross_entropy", lambda *a, **k: (float("nan"), np.zeros(a[0].shape)))
    with pytest.raises(NumericError, match="step 1") as info:
        TR.train(tiny_data, SMALL_ENC, SMALL_DEC, TR.TrainConfig(epochs=1), preprocess=normalize)
    assert info.value.step == 1


def test_loss_csv_format():
    text = TR.loss_csv([TR.LossRecord(1, 1, 0.5), TR.LossRecord(2, 1, 0.25)])
    assert text == "step,epoch,loss\n1,1,0.5\n2,1,0.25\n"


def test_loss_csv_loss_roundtrips():
    v = 0.1 + 0.2
    line = TR.loss_csv([TR.LossRecord(1, 1, v)]).splitlines()[1]
    assert float(line.split(",")[2]) == v


@pytest.fixture(scope="module")
def overfit_run():
    one = synth_generate(SynthConfig(n_samples=1))
    res = TR.train(one, EncoderConfig(), D.DecoderConfig(), TR.TrainConfig(epochs=500), preprocess=normalize)
    return np.array([r.loss for r in res.losses])


def test_overfit_one_sample(overfit_run):
    assert len(overfit_run) == 500
    assert overfit_run.min() < 0.01


def test_overfit_moving_average_strictly_decreases(overfit_run):
    ma = np.convolve(overfit_run[:300], np.ones(50) / 50, mode="valid")
    assert np.all(np.diff(ma) < 0)
