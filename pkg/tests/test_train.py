import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mintnet import autodiff as ad
from mintnet import data, flow, mint, train
from mintnet.errors import NonFiniteError
from mintnet.train import OptimState, TrainConfig


def _tiny_model(seed=0, shape=(1, 4, 4)):
    return flow.build_model(shape, pairs_per_stage=1, squeezes=0, k_groups=2, filters=2, rng=seed)


def test_amsgrad_zero_gradient_keeps_params():
    params = {"a": np.array([1.0, -2.0])}
    state = OptimState.zeros(params)
    new, state = train.amsgrad_step(params, {"a": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_array_equal(new["a"], params["a"])
    assert state.step == 1


def test_amsgrad_one_step_by_hand():
    params = {"a": np.zeros(3)}
    new, state = train.amsgrad_step(params, {"a": np.ones(3)}, OptimState.zeros(params), lr=0.1)
    m = (1 - 0.9) * 1.0
    v = (1 - 0.999) * 1.0
    np.testing.assert_allclose(new["a"], -0.1 * m / (math.sqrt(v) + 1e-8), rtol=1e-15)
    np.testing.assert_array_equal(state.vhat["a"], state.v["a"])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=12))
def test_amsgrad_vhat_monotone(gs):
    params = {"a": np.zeros(1)}
    state = OptimState.zeros(params)
    prev = state.vhat["a"].copy()
    for g in gs:
        params, state = train.amsgrad_step(params, {"a": np.array([g])}, state, lr=0.01)
        assert np.all(state.vhat["a"] >= prev)
        assert np.all(state.vhat["a"] >= state.v["a"]) and np.all(state.v["a"] >= 0)
        prev = state.vhat["a"].copy()


def test_amsgrad_rejects_nonfinite():
    params = {"a": np.zeros(2)}
    with pytest.raises(NonFiniteError):
        train.amsgrad_step(params, {"a": np.array([1.0, np.nan])}, OptimState.zeros(params))


def test_cosine_schedule():
    assert train.cosine_lr(0, 100, 0.001) == 0.001
    assert train.cosine_lr(100, 100, 0.001) == pytest.approx(0.0, abs=1e-18)
    assert train.cosine_lr(50, 100, 0.001) == pytest.approx(0.0005, rel=1e-12)
    with pytest.raises(ValueError):
        train.cosine_lr(101, 100, 0.001)


def test_train_config_validation():
    for bad in ({"steps": 0}, {"batch_size": 0}, {"lr": -1.0}, {"schedule": "step"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_loss_is_hand_composed_nll():
    rng = np.random.default_rng(1)
    model = flow.build_model((1, 4, 4), pairs_per_stage=1, squeezes=1, k_groups=2, filters=2,
                             rng=rng, scheme="random", scale=0.5)
    raw = rng.integers(0, 256, (3, 1, 4, 4)).astype(float)
    y, ldp = flow.preprocess(raw, model.preprocess, noise=rng.random(raw.shape))
    loss, grads = train.loss_and_grad(model, y, ldp)
    x, logdets = y, np.zeros(3)
    for block in model.blocks:
        if isinstance(block, flow.Squeeze):
            x = flow.squeeze(x)
            continue
        for layer in (block.lower, block.upper):
            logdets += np.log(mint.jac_diag(layer, x)).reshape(3, -1).sum(axis=1)
            x = mint.forward(layer, x)
    log_pi = -0.5 * (x ** 2).reshape(3, -1).sum(axis=1) - 0.5 * 16 * math.log(2 * math.pi)
    assert loss == pytest.approx(-np.mean(log_pi + logdets + ldp), rel=1e-12)
    assert set(grads) == set(model.parameters())


def test_loop_gradient_matches_grad_check():
    rng = np.random.default_rng(2)
    model = flow.build_model((1, 2, 2), pairs_per_stage=1, squeezes=0, k_groups=1, filters=1,
                             rng=rng, scheme="random", scale=0.7)
    y = rng.normal(size=(2, 1, 2, 2))
    ldp = np.zeros(2)
    _, grads = train.loss_and_grad(model, y, ldp)

    def f(p):
        return -ad.sum(flow.log_prob(model.with_parameters(p), y)) * 0.5

    err, _ = ad.grad_check(f, model.parameters(), grad=grads)
    assert err < 1e-3


def test_lr_zero_keeps_model_and_loss_tracks_fixed_model():
    ds = data.synth_bars(40, 4, rng=3)
    model = _tiny_model()
    cfg = TrainConfig(steps=5, batch_size=8, lr=0.0, seed=4)
    res = train.train_loop(model, ds, cfg)
    for k, v in model.parameters().items():
        np.testing.assert_array_equal(res.model.parameters()[k], v)
    rng = np.random.default_rng(4)
    for row in res.history:
        raw = ds.images[rng.permutation(40)[:8]]
        y, ldp = flow.preprocess(raw, model.preprocess, noise=rng.random(raw.shape))
        assert row["loss"] == train.loss_and_grad(model, y, ldp)[0]


def test_training_reduces_bpd_and_prefers_bars_to_noise():
    bars = data.synth_bars(500, 8, rng=1)
    model = flow.build_model((1, 8, 8), pairs_per_stage=1, squeezes=0, k_groups=3, filters=8, rng=0)
    res = train.train_loop(model, bars, TrainConfig(steps=300, batch_size=32, lr=3e-3))
    before = train.eval_bpd(model, bars.images, 0)
    after = train.eval_bpd(res.model, bars.images, 0)
    assert after < before
    noise = data.synth_noise(200, 8, rng=3)
    held_out = data.synth_bars(200, 8, rng=2)
    assert train.eval_bpd(res.model, held_out.images, 0) < train.eval_bpd(res.model, noise.images, 0)


def test_metrics_and_determinism(tmp_path):
    ds = data.synth_bars(30, 4, rng=5)
    cfg = TrainConfig(steps=6, batch_size=4, eval_every=3, checkpoint_every=2)
    a = train.train_loop(_tiny_model(), ds, cfg, out_dir=tmp_path / "a", eval_images=ds.images[:5])
    b = train.train_loop(_tiny_model(), ds, cfg, out_dir=tmp_path / "b", eval_images=ds.images[:5])
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "a/metrics.csv")))
    assert list(rows[0]) == train.METRIC_FIELDS and len(rows) == 6
    assert rows[2]["bpd_eval"] and not rows[0]["bpd_eval"]
    for k, v in a.model.parameters().items():
        assert np.array_equal(v, b.model.parameters()[k])


def test_resume_reproduces_uninterrupted_run(tmp_path):
    ds = data.synth_bars(30, 4, rng=6)
    cfg = TrainConfig(steps=8, batch_size=4, checkpoint_every=4)
    full = train.train_loop(_tiny_model(), ds, cfg, out_dir=tmp_path / "full")
    train.train_loop(_tiny_model(), ds, cfg, out_dir=tmp_path / "part", stop_after=4)
    resumed = train.train_loop(None, ds, cfg, out_dir=tmp_path / "part", resume_from=tmp_path / "part/checkpoint")
    for k, v in full.model.parameters().items():
        assert np.array_equal(v, resumed.model.parameters()[k])
    assert (tmp_path / "full/metrics.csv").read_bytes() == (tmp_path / "part/metrics.csv").read_bytes()


def test_nonfinite_loss_keeps_last_checkpoint(tmp_path, monkeypatch):
    ds = data.synth_bars(20, 4, rng=7)
    real = train.loss_and_grad
    calls = {"n": 0}

    def flaky(model, y, ldp):
        calls["n"] += 1
        loss, grads = real(model, y, ldp)
        return (math.nan if calls["n"] == 4 else loss), grads

    monkeypatch.setattr(train, "loss_and_grad", flaky)
    cfg = TrainConfig(steps=10, batch_size=4, checkpoint_every=1)
    with pytest.raises(NonFiniteError, match="step 3"):
        train.train_loop(_tiny_model(), ds, cfg, out_dir=tmp_path)
    _, optim, _ = train.load_checkpoint(tmp_path / "checkpoint")
    assert optim.step == 3
