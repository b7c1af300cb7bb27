import math
from dataclasses import replace

import numpy as np
import pytest

from riskmeta import autodiff as ad
from riskmeta import data, learned, models, risk, trainer

from _oracles import fd_grad, unrolled_linear

EV = risk.RiskFunctional("expected_value")


def _setup(n=400, C=3, d=4, hidden=None, seed=0):
    ds = data.gen_blobs(seed, n, C, d, 1.0)
    view = data.split_90_5_5(ds, seed).training_view()
    widths = [d, C] if hidden is None else [d, hidden, C]
    spec = models.MlpSpec(widths, init_seed=seed)
    return spec, models.init_params(spec), view


def _same(a, b):
    # records carry nan entropies for fixed-risk runs
    return [repr(r) for r in a] == [repr(r) for r in b]


def _cfg(**kw):
    base = dict(total_steps=20, batch_size=8, meta_val_batch=16, inner_steps=2, early_stopping=False)
    base.update(kw)
    return trainer.TrainerConfig(**base)


# --------------------------------------------------------------------------- schedule

def test_one_cycle_values():
    s = trainer.OneCycleSchedule()
    assert trainer.one_cycle_lr(0, s, 1000) == 0.005
    assert trainer.one_cycle_lr(300, s, 1000) == pytest.approx(0.1, abs=1e-15)
    assert trainer.one_cycle_lr(1000, s, 1000) == pytest.approx(5e-6, abs=1e-18)
    eps = 1e-6
    left = trainer.one_cycle_lr(300 - eps, s, 1000)
    right = trainer.one_cycle_lr(300 + eps, s, 1000)
    assert abs(left - right) < 1e-6
    with pytest.raises(ValueError):
        trainer.one_cycle_lr(1001, s, 1000)
    with pytest.raises(ValueError):
        trainer.one_cycle_lr(-1, s, 1000)


def test_config_validation_lists_every_field():
    with pytest.raises(ValueError) as e:
        trainer.TrainerConfig(outer_lr_eta=0, inner_steps=0, warm_start_steps=10, total_steps=5)
    msg = str(e.value)
    for name in ("outer_lr_eta", "inner_steps", "warm_start_steps"):
        assert name in msg


# --------------------------------------------------------------------------- inner / outer

def _lin_inner(theta, phi_vals, batches, beta):
    tape = ad.Tape()
    phi = tape.variable(phi_vals)

    def loss(th, X, y):
        return ad.sum(ad.square(tape.constant(X) @ th[0] - tape.constant(y[:, None])), axis=1)

    return trainer.inner_adapt(None, theta, phi, batches, beta, loss_fn=loss)


def test_inner_adapt_hand_example():
    batch = (np.array([[1.0]]), np.array([0.0]))
    th = _lin_inner([np.array([[1.0]])], np.zeros(1), [batch], 0.1)
    assert th[0].value[0, 0] == pytest.approx(0.8, abs=1e-15)


def test_inner_adapt_zero_beta_is_identity(rng):
    spec, theta, view = _setup()
    tape = ad.Tape()
    phi = tape.variable(rng.normal(size=8))
    batches = [(view.train.features[:8], view.train.labels[:8])] * 2
    th = trainer.inner_adapt(spec, theta, phi, batches, 0.0)
    for a, b in zip(th, theta):
        np.testing.assert_array_equal(a.value, b)
    g, _ = trainer.meta_gradient(spec, phi, th, view.val.features, view.val.labels, EV)
    assert not np.any(g)


def test_inner_adapt_saturation_matches_single_sample_step():
    spec, theta, view = _setup()
    X, y = view.train.features[:8], view.train.labels[:8]
    tape = ad.Tape()
    phi = tape.variable(np.array([20.0] + [-20.0] * 7))
    th = trainer.inner_adapt(spec, theta, phi, [(X, y)], 0.05)
    losses = models.cross_entropy_per_sample(models.forward_array(spec, theta, X), y)
    top = int(np.argmax(losses))
    t2 = ad.Tape()
    nodes = [t2.variable(p) for p in theta]
    single = ad.sum(trainer.batch_losses(spec, nodes, X[top:top + 1], y[top:top + 1]))
    grads = ad.backward(single, nodes)
    for a, p, g in zip(th, theta, grads):
        np.testing.assert_allclose(a.value, p - 0.05 * g, rtol=0, atol=1e-6)


def test_non_finite_loss_reports_diagnostics():
    spec, theta, view = _setup()
    bad = [p.copy() for p in theta]
    bad[0][0, 0] = np.nan
    phi = ad.Tape().variable(np.zeros(8))
    with pytest.raises(trainer.NonFiniteLossError, match="inner step 0 .step=7"):
        trainer.inner_adapt(spec, bad, phi, [(view.train.features[:8], view.train.labels[:8])], 0.1, step=7)


@pytest.mark.parametrize("k", [1, 2, 5])
@pytest.mark.parametrize("rho_text", ["ev", "cvar:0.25", "meanvar:0.5"])
def test_meta_gradient_matches_unrolled_fd(k, rho_text, rng):
    spec = models.MlpSpec([2, 2])
    rho = risk.parse_risk(rho_text)
    for _ in range(3):
        W = rng.normal(size=(2, 2))
        b = rng.normal(size=2)
        batches = [(rng.normal(size=(4, 2)), rng.integers(0, 2, size=4)) for _ in range(k)]
        Xv, yv = rng.normal(size=(6, 2)), rng.integers(0, 2, size=6)
        phi0 = rng.normal(size=4)
        beta = 0.3
        tape = ad.Tape()
        phi = tape.variable(phi0)
        th = trainer.inner_adapt(spec, [W, b], phi, batches, beta)
        g, r = trainer.meta_gradient(spec, phi, th, Xv, yv, rho)
        ref = fd_grad(lambda p: unrolled_linear(p, W, b, batches, beta, Xv, yv, rho), phi0)
        assert r == pytest.approx(unrolled_linear(phi0, W, b, batches, beta, Xv, yv, rho), rel=1e-12)
        assert np.max(np.abs(g - ref)) <= 1e-4 * np.max(np.abs(ref)) + 1e-10


def test_outer_step_symmetric_under_exchangeable_samples():
    spec, theta, view = _setup()
    X = np.repeat(view.train.features[:1], 8, axis=0)
    y = np.repeat(view.train.labels[:1], 8)
    tape = ad.Tape()
    phi = tape.variable(np.zeros(8))
    th = trainer.inner_adapt(spec, theta, phi, [(X, y)], 0.1)
    adam = trainer.Adam(0.001)
    new_phi, g, _ = trainer.outer_step(spec, phi, th, view.val.features, view.val.labels, EV, adam)
    assert np.ptp(g) <= 1e-15
    assert np.ptp(new_phi.phi) <= 1e-15


def test_detach_inner_severs_the_path():
    spec, theta, view = _setup()
    tape = ad.Tape()
    phi = tape.variable(np.linspace(-1, 1, 8))
    th = trainer.inner_adapt(spec, theta, phi, [(view.train.features[:8], view.train.labels[:8])], 0.1,
                             detach_phi=True)
    with pytest.raises(ad.GraphError):
        trainer.meta_gradient(spec, phi, th, view.val.features, view.val.labels, EV)
    g, _ = trainer.meta_gradient(spec, phi, th, view.val.features, view.val.labels, EV, require_path=False)
    assert not np.any(g)


def test_adam_first_step_moves_by_lr():
    a = trainer.Adam(0.001)
    out = a.step(np.zeros(3), np.array([2.0, -0.5, 0.0]))
    np.testing.assert_allclose(out, [-0.001, 0.001, 0.0], rtol=1e-6)


# --------------------------------------------------------------------------- full loop

def test_frozen_uniform_head_matches_expected_value_training():
    spec, theta, view = _setup(hidden=6)
    cfg = _cfg(total_steps=30)
    ev = trainer.train_fixed_rho(spec, theta, view, EV, cfg)
    frozen = trainer.train_learned(spec, theta, view, EV, replace(cfg, freeze_phi=True))
    a = np.array([r.train_risk for r in ev.records])
    b = np.array([r.train_risk for r in frozen.records])
    assert np.all(np.abs(a - b) <= 1e-9 * np.abs(a))
    for p, q in zip(ev.theta, frozen.theta):
        np.testing.assert_allclose(p, q, rtol=1e-9, atol=1e-12)


def test_theta_reset_leaves_one_real_step():
    spec, theta, view = _setup(hidden=5)
    cfg = _cfg(total_steps=1)
    res = trainer.train_learned(spec, theta, view, EV, cfg)
    streams = trainer._Streams(cfg.seed, view, cfg)
    idx = streams.main.next()
    lr = trainer.one_cycle_lr(0, cfg.schedule, 1)
    expect, _ = trainer.real_step(spec, theta, res.phi, view.train.features[idx], view.train.labels[idx],
                                  trainer.SGD(cfg.momentum, cfg.weight_decay), lr)
    for p, q in zip(res.theta, expect):
        np.testing.assert_array_equal(p, q)
    assert res.steps_run == 1 and [r.step for r in res.records] == [0]


def test_training_is_deterministic():
    spec, theta, view = _setup(hidden=5)
    cfg = _cfg(total_steps=15)
    a = trainer.train_learned(spec, theta, view, risk.parse_risk("cvar:0.25"), cfg)
    b = trainer.train_learned(spec, theta, view, risk.parse_risk("cvar:0.25"), cfg)
    assert a.records == b.records
    np.testing.assert_array_equal(a.phi.phi, b.phi.phi)


def test_learned_run_snapshots_and_records():
    spec, theta, view = _setup()
    res = trainer.train_learned(spec, theta, view, EV, _cfg(total_steps=100))
    steps = [s.step for s in res.snapshots]
    assert steps == [0, 1, 5, 10, 25, 50, 100]
    assert res.snapshots[0].entropy == pytest.approx(math.log(8), abs=1e-12)
    for s in res.snapshots:
        assert abs(s.weights.sum() - 1) < 1e-9
    assert all(r2.step == r1.step + 1 for r1, r2 in zip(res.records, res.records[1:]))
    assert all(math.isfinite(r.phi_entropy) for r in res.records)


def test_fixed_rho_learning_rate_follows_schedule():
    spec, theta, view = _setup()
    cfg = _cfg(total_steps=40)
    res = trainer.train_fixed_rho(spec, theta, view, EV, cfg)
    for r in res.records:
        assert r.lr == trainer.one_cycle_lr(r.step, cfg.schedule, 40)


def test_cvar_half_on_pairs_trains_on_larger_loss():
    spec, theta, view = _setup()
    cfg = _cfg(total_steps=1, batch_size=2, momentum=0.0, weight_decay=0.0)
    res = trainer.train_fixed_rho(spec, theta, view, risk.parse_risk("cvar:0.5"), cfg)
    idx = trainer._Streams(cfg.seed, view, cfg).main.next()
    X, y = view.train.features[idx], view.train.labels[idx]
    losses = models.cross_entropy_per_sample(models.forward_array(spec, theta, X), y)
    top = int(np.argmax(losses))
    t = ad.Tape()
    nodes = [t.variable(p) for p in theta]
    grads = ad.backward(ad.sum(trainer.batch_losses(spec, nodes, X[top:top + 1], y[top:top + 1])), nodes)
    lr = trainer.one_cycle_lr(0, cfg.schedule, 1)
    for p, q, g in zip(res.theta, theta, grads):
        np.testing.assert_allclose(p, q - lr * g, rtol=0, atol=1e-15)


def test_warm_start_equivalences():
    spec, theta, view = _setup()
    cfg = _cfg(total_steps=30)
    cvar = risk.parse_risk("cvar:0.25")
    full_ev = trainer.train_fixed_rho(spec, theta, view, EV, cfg, monitor=cvar)
    all_warm = trainer.warm_start_then(spec, theta, view, cvar, replace(cfg, warm_start_steps=30))
    assert _same(all_warm.records, full_ev.records)
    no_warm = trainer.warm_start_then(spec, theta, view, cvar, replace(cfg, warm_start_steps=0))
    plain = trainer.train_fixed_rho(spec, theta, view, cvar, cfg)
    assert _same(no_warm.records, plain.records)
    split = trainer.warm_start_then(spec, theta, view, cvar, replace(cfg, warm_start_steps=10))
    assert [r.step for r in split.records] == list(range(30))
    assert split.records[10].lr == cfg.schedule.start_lr
    assert split.steps_run == 30


def test_early_stop_rule():
    assert not trainer.early_stop([5, 4, 3, 2, 1, 0.5, 0.1], 5)
    assert trainer.early_stop([1.0] * 6, 5)
    assert not trainer.early_stop([1.0] * 5, 5)
    assert not trainer.early_stop([5, 5, 5, 5, 5, 4], 5)
    assert trainer.early_stop([5, 4, 4, 4, 4, 4, 4], 5)
    with pytest.raises(ValueError):
        trainer.early_stop([], 5)


def test_early_stopping_halts_at_an_epoch_boundary():
    spec, theta, view = _setup()
    cfg = _cfg(total_steps=3000, early_stopping=True, early_stop_patience=1, early_stop_after_peak=False)
    res = trainer.train_fixed_rho(spec, theta, view, EV, cfg)
    per_epoch = len(view.train) // cfg.batch_size
    assert res.stopped_early
    assert res.steps_run % per_epoch == 0 and res.steps_run < 3000
    assert len(res.epoch_metrics) == res.steps_run // per_epoch


def test_records_csv_roundtrip(tmp_path):
    recs = [trainer.TrainRecord(0, 1.5, 0.1, 0.005, float("nan")), trainer.TrainRecord(1, 1 / 3, 0.2, 0.01, 2.0)]
    path = tmp_path / "r.csv"
    trainer.write_records(path, recs)
    assert path.read_text().splitlines()[0] == "step,train_risk,val_risk,lr,phi_entropy"
    back = trainer.read_records(path)
    assert back[1] == recs[1]
    assert math.isnan(back[0].phi_entropy)


# --------------------------------------------------------------------------- clipping

def test_sgd_clips_global_norm_before_decay():
    opt = trainer.SGD(momentum=0.0, weight_decay=0.0, clip_norm=1.0)
    out = opt.step([np.zeros(2), np.zeros(1)], [np.array([3.0, 0.0]), np.array([4.0])], lr=1.0)
    np.testing.assert_allclose(np.concatenate(out), [-0.6, 0.0, -0.8], rtol=0, atol=1e-15)
    small = trainer.SGD(momentum=0.0, weight_decay=0.0, clip_norm=10.0)
    out = small.step([np.zeros(2)], [np.array([3.0, 4.0])], lr=1.0)
    np.testing.assert_array_equal(out[0], [-3.0, -4.0])


def test_clipped_inner_meta_gradient_matches_fd(rng):
    spec = models.MlpSpec([2, 2])
    rho = risk.parse_risk("cvar:0.25")
    W, b = rng.normal(size=(2, 2)) * 3, rng.normal(size=2)
    batches = [(rng.normal(size=(4, 2)) * 3, rng.integers(0, 2, size=4)) for _ in range(2)]
    Xv, yv = rng.normal(size=(6, 2)), rng.integers(0, 2, size=6)
    phi0 = rng.normal(size=4)

    def value(p, with_grad=False):
        tape = ad.Tape()
        phi = tape.variable(p)
        th = trainer.inner_adapt(spec, [W, b], phi, batches, 0.3, clip_norm=0.05)
        return trainer.meta_gradient(spec, phi, th, Xv, yv, rho) if with_grad else \
            risk.evaluate(trainer.batch_losses(spec, th, Xv, yv), rho).item()

    g, _ = value(phi0, True)
    ref = fd_grad(value, phi0)
    assert np.max(np.abs(g - ref)) <= 1e-4 * np.max(np.abs(ref)) + 1e-10
    assert abs(value(phi0) - unrolled_linear(phi0, W, b, batches, 0.3, Xv, yv, rho)) > 1e-6  # clip binds


def test_grad_clip_validation():
    with pytest.raises(ValueError, match="grad_clip"):
        trainer.TrainerConfig(grad_clip=0.0)
