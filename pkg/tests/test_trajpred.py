import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from blockpred.trajpred import (
    GaussianParams, LstmModel, TrainConfig, decode_gaussian, decode_raw, embed_backward, embed_velocity,
    forecast, forecast_batch, init_model, load_model, lstm_step, lstm_step_backward, make_windows, nll_loss,
    nll_raw, save_model, sequence_loss, split_items, train, write_loss_log, zero_model,
)
from oracles import finite_difference, rel_error

GRAD_TOL = 1e-4
EPS = 1e-5


def tiny(seed=0, jitter=0.3):
    m = init_model(4, 8, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for v in m.params.values():
        v += rng.normal(0, jitter, v.shape)
    return m


def zero_grads(m):
    return {k: np.zeros_like(v) for k, v in m.params.items()}


def test_zero_embedding_is_zero():
    m = zero_model(4, 8)
    assert np.all(embed_velocity([0.3, -2.0], m) == 0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 1000))
def test_embedding_nonnegative(x, y, seed):
    assert np.all(embed_velocity([x, y], tiny(seed)) >= 0)


def test_embedding_jacobian():
    m = tiny(1)
    dv = np.array([0.4, -0.7])
    u = np.random.default_rng(0).normal(size=m.d_emb)
    # d(u . e)/d dv
    analytic = embed_backward(u, dv, m, zero_grads(m))
    x = dv.copy()
    fd = finite_difference(lambda: float(u @ embed_velocity(x, m)), x, EPS)
    assert rel_error(analytic, fd) < 1e-5


def test_zero_cell_fixed_point():
    m = zero_model(4, 8)
    h, c = lstm_step(np.zeros(8), np.zeros(8), np.ones(4), m)
    assert np.all(h == 0) and np.all(c == 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_hidden_state_bounded(seed):
    rng = np.random.default_rng(seed)
    m = tiny(seed, jitter=3.0)
    h, _ = lstm_step(rng.normal(size=8), rng.normal(size=8) * 5, rng.normal(size=4) * 5, m)
    assert np.all(np.abs(h) < 1)


def test_cell_gradients():
    m = tiny(2)
    rng = np.random.default_rng(3)
    h0, c0, e = rng.normal(size=8), rng.normal(size=8), rng.normal(size=4)
    uh, uc = rng.normal(size=8), rng.normal(size=8)

    def f():
        h, c = lstm_step(h0, c0, e, m)
        return float(uh @ h + uc @ c)

    cache = {}
    lstm_step(h0, c0, e, m, cache)
    grads = zero_grads(m)
    dh, dc, de = lstm_step_backward(uh, uc, cache, m, grads)
    for name in ("W_x", "W_h", "b"):
        assert rel_error(grads[name], finite_difference(f, m.params[name], EPS)) < GRAD_TOL
    for analytic, arr in ((dh, h0), (dc, c0), (de, e)):
        assert rel_error(analytic, finite_difference(f, arr, EPS)) < GRAD_TOL


def test_zero_decoder():
    gp = decode_gaussian(np.ones(8), zero_model(4, 8))
    assert np.all(gp.mu == 0) and np.all(gp.sigma == 1) and gp.rho == 0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_decoder_always_valid(seed):
    rng = np.random.default_rng(seed)
    m = tiny(seed, jitter=5.0)
    gp = decode_gaussian(rng.uniform(-1, 1, 8), m)
    assert np.all(gp.sigma > 0) and abs(gp.rho) < 1


def test_decoder_and_loss_gradients():
    m = tiny(4)
    rng = np.random.default_rng(5)
    h = rng.uniform(-1, 1, 8)
    target = rng.normal(size=2)

    def f():
        return nll_loss(decode_gaussian(h, m), target)

    loss, graw = nll_raw(decode_raw(h, m), target)
    assert loss[0] == pytest.approx(f(), rel=1e-12)
    assert rel_error(np.outer(graw[0], h), finite_difference(f, m.params["W_dec"], EPS)) < GRAD_TOL
    assert rel_error(graw[0], finite_difference(f, m.params["b_dec"], EPS)) < GRAD_TOL


def test_nll_at_mode_of_standard_normal():
    gp = GaussianParams(np.array([0.2, -0.1]), np.array([1.0, 1.0]), 0.0)
    assert nll_loss(gp, [0.2, -0.1]) == pytest.approx(math.log(2 * math.pi))


def test_nll_minimised_at_target():
    rng = np.random.default_rng(6)
    target = np.array([0.3, 0.1])
    gp = GaussianParams(target, np.array([0.5, 2.0]), 0.6)
    best = nll_loss(gp, target)
    for _ in range(100):
        mu = target + rng.normal(0, 0.3, 2)
        assert nll_loss(GaussianParams(mu, gp.sigma, gp.rho), target) > best


def test_nll_rejects_bad_params():
    with pytest.raises(ValueError):
        GaussianParams(np.zeros(2), np.array([1.0, 0.0]), 0.0)
    with pytest.raises(ValueError):
        GaussianParams(np.zeros(2), np.ones(2), 1.0)


def test_density_integrates_to_one():
    rng = np.random.default_rng(7)
    for _ in range(3):
        gp = GaussianParams(rng.normal(size=2), rng.uniform(0.3, 1.5, 2), float(rng.uniform(-0.8, 0.8)))
        mx, my = gp.mu
        sx, sy = gp.sigma
        val, _ = integrate.dblquad(lambda y, x: math.exp(-nll_loss(gp, [x, y])),
                                   mx - 9 * sx, mx + 9 * sx, my - 9 * sy, my + 9 * sy, epsabs=1e-7)
        assert val == pytest.approx(1.0, abs=1e-3)


def test_sequence_gradients_tiny_model():
    m = tiny(8)
    rng = np.random.default_rng(9)
    x = rng.normal(size=(3, 12, 2))
    y = rng.normal(size=(3, 12, 2))
    _, grads = sequence_loss(m, x, y, loss_from=4)
    for name, arr in m.params.items():
        fd = finite_difference(lambda: sequence_loss(m, x, y, 4, want_grads=False)[0], arr, EPS)
        assert rel_error(grads[name], fd) < GRAD_TOL, name


def line_history(n=10, v=(0.13, 0.0), start=(0.0, 0.0)):
    return np.asarray(start) + np.outer(np.arange(n), v)


def test_forecast_bookkeeping():
    m = tiny(10)
    hist = line_history()
    fc = forecast(hist, 9, m, mode="sample", seed=3)
    steps = np.diff(np.vstack([hist[-1], fc.positions]), axis=0)
    assert len(fc.positions) == len(fc.params) == 9
    assert fc.positions.shape == (9, 2)
    # mean mode: each step is exactly the emitted mean velocity
    mean = forecast(hist, 9, m)
    steps = np.diff(np.vstack([hist[-1], mean.positions]), axis=0)
    np.testing.assert_allclose(steps, [p.mu for p in mean.params], atol=1e-15)


def test_sample_mode_reproducible():
    m = tiny(11)
    hist = line_history()
    a = forecast(hist, 5, m, mode="sample", seed=42).positions
    b = forecast(hist, 5, m, mode="sample", seed=42).positions
    c = forecast(hist, 5, m, mode="sample", seed=43).positions
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_forecast_needs_two_positions():
    with pytest.raises(ValueError):
        forecast([[0.0, 0.0]], 3, tiny())


@settings(max_examples=30, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20))
def test_translation_equivariance(dx, dy):
    m = tiny(12)
    hist = line_history(v=(0.1, 0.05))
    a = forecast(hist, 9, m).positions
    b = forecast(hist + [dx, dy], 9, m).positions
    np.testing.assert_allclose(b - [dx, dy], a, atol=1e-9)


def test_batch_forecast_matches_single():
    m = tiny(13)
    rng = np.random.default_rng(0)
    hists = np.cumsum(rng.normal(0, 0.1, (5, 10, 2)), axis=1)
    batch = forecast_batch(hists, 9, m)
    for k in range(5):
        np.testing.assert_allclose(batch[k], forecast(hists[k], 9, m).positions, atol=1e-12)


def synthetic_lines(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        a = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(0.08, 0.16)
        out.append(rng.uniform(-5, 5, 2) + np.outer(np.arange(40), speed * np.array([np.cos(a), np.sin(a)])))
    return out


@pytest.fixture(scope="module")
def line_model():
    tr, va = split_items(120, 0.4, 0)
    lines = synthetic_lines(120, 1)
    cfg = TrainConfig(epochs=30, stride=4, seed=0)
    return train(make_windows([lines[i] for i in tr], stride=4), make_windows([lines[i] for i in va], stride=4), cfg)


def test_training_reduces_loss(line_model):
    assert line_model.train_loss[-1] < line_model.train_loss[0]
    v0 = line_model.val_loss[0]
    best = min(line_model.val_loss)
    assert (v0 - best) / abs(v0) >= 0.2
    assert line_model.val_loss[line_model.best_epoch - 1] == best


def test_trained_model_follows_straight_line(line_model):
    fc = forecast(line_history(), 1, line_model.model)
    assert np.linalg.norm(fc.params[0].mu - [0.13, 0.0]) < 0.05


def test_training_is_deterministic():
    lines = synthetic_lines(20, 2)
    w = make_windows(lines, stride=6)
    cfg = TrainConfig(epochs=2, d_emb=4, d_h=8)
    a, b = train(w, w, cfg), train(w, w, cfg)
    assert a.val_loss == b.val_loss
    for k in a.model.params:
        assert np.array_equal(a.model.params[k], b.model.params[k])


def test_training_refuses_empty():
    with pytest.raises(ValueError):
        train(np.zeros((0, 19, 2)), np.zeros((0, 19, 2)))


def test_weights_round_trip(tmp_path, line_model):
    save_model(line_model.model, tmp_path / "m.bin")
    back = load_model(tmp_path / "m.bin")
    assert back.scale == line_model.model.scale
    for k, v in line_model.model.params.items():
        assert np.array_equal(back.params[k], v)
    write_loss_log(line_model, tmp_path / "loss.csv")
    rows = (tmp_path / "loss.csv").read_text().splitlines()
    assert rows[0] == "epoch,train_nll,val_nll" and len(rows) == 31


def test_weights_file_rejects_garbage(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_model(tmp_path / "x.bin")


def test_model_shape_validation():
    m = init_model(4, 8)
    p = dict(m.params)
    p["W_h"] = np.zeros((32, 7))
    with pytest.raises(ValueError):
        LstmModel(p)


def test_windows_and_split():
    w = make_windows([np.zeros((25, 2)), np.zeros((10, 2))], 10, 9, stride=2)
    assert w.shape == (4, 19, 2)
    tr, va = split_items(10, 0.4, 0)
    assert len(tr) == 6 and len(va) == 4 and not set(tr) & set(va)
