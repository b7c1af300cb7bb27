"""Quick oracle and invariant checks, runnable from an installed package."""

from dataclasses import replace

import numpy as np

from . import autodiff as ad
from . import data, learned, models, risk, trainer


def _check_risk_oracle(rng):
    params = [("cvar", 0.25), ("icvar", 0.1), ("trimmed", 0.25), ("mean_variance", 0.5),
              ("human_aligned", None), ("expected_value", None)]
    worst = 0.0
    for _ in range(200):
        v = rng.exponential(size=int(rng.integers(1, 13)))
        for kind, p in params:
            if kind == "mean_variance":
                f = risk.RiskFunctional(kind, c=p)
            elif p is None:
                f = risk.RiskFunctional(kind)
            else:
                f = risk.RiskFunctional(kind, alpha=p)
            if kind == "trimmed" and len(v) <= 2 * risk.tail_count(p, len(v)):
                continue
            a = float(risk.evaluate(v, f))
            b = float(risk.brute_force_oracle(v, f))
            worst = max(worst, abs(a - b))
    return worst <= 1e-12, f"max |estimator - oracle| = {worst:.2e}"


def _check_second_derivative(rng):
    x0 = float(rng.uniform(0.5, 2.0))
    t = ad.Tape()
    x = t.variable(np.array([x0]))
    (g,) = ad.backward(ad.sum(x * x * x), [x], create_graph=True)
    (h,) = ad.backward(ad.sum(g), [x])
    err = abs(h[0] - 6 * x0)
    return err <= 1e-12, f"d2/dx2 x^3 at {x0:.3f}: error {err:.2e}"


def _check_meta_gradient(rng):
    spec = models.MlpSpec([2, 2])
    W, b = rng.normal(size=(2, 2)), rng.normal(size=2)
    batches = [(rng.normal(size=(4, 2)), rng.integers(0, 2, size=4)) for _ in range(2)]
    Xv, yv = rng.normal(size=(6, 2)), rng.integers(0, 2, size=6)
    rho = risk.RiskFunctional("expected_value")

    def composite(phi_vals):
        phi = ad.Tape().variable(phi_vals)
        th = trainer.inner_adapt(spec, [W, b], phi, batches, 0.3)
        return float(risk.evaluate(trainer.batch_losses(spec, th, Xv, yv).value, rho))

    phi0 = rng.normal(size=4)
    phi = ad.Tape().variable(phi0)
    th = trainer.inner_adapt(spec, [W, b], phi, batches, 0.3)
    g, _ = trainer.meta_gradient(spec, phi, th, Xv, yv, rho)
    fd = np.zeros(4)
    for i in range(4):
        e = np.zeros(4)
        e[i] = 1e-5
        fd[i] = (composite(phi0 + e) - composite(phi0 - e)) / 2e-5
    rel = np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12)
    return rel <= 1e-4, f"rel error {rel:.2e}"


def _check_uniform_equivalence(rng):
    ds = data.gen_blobs(0, 300, 3, 4, 1.0)
    view = data.split_90_5_5(ds, 0).training_view()
    spec = models.MlpSpec([4, 6, 3])
    theta = models.init_params(spec)
    cfg = trainer.TrainerConfig(total_steps=20, batch_size=8, meta_val_batch=16, inner_steps=1,
                                early_stopping=False)
    ev = risk.RiskFunctional("expected_value")
    a = trainer.train_fixed_rho(spec, theta, view, ev, cfg)
    b = trainer.train_learned(spec, theta, view, ev, replace(cfg, freeze_phi=True))
    ra = np.array([r.train_risk for r in a.records])
    rb = np.array([r.train_risk for r in b.records])
    rel = float(np.max(np.abs(ra - rb) / np.abs(ra)))
    return rel <= 1e-9, f"frozen uniform head vs expected value: max rel diff {rel:.2e}"


def _check_convexity(rng):
    bad = 0
    for _ in range(1000):
        n = int(rng.integers(1, 16))
        phi = learned.PhiParams(rng.normal(scale=3, size=n), n)
        v = rng.normal(size=n)
        out = learned.apply_array(phi.phi, v)
        if not (v.min() - 1e-12 <= out <= v.max() + 1e-12) or abs(phi.weights.sum() - 1) > 1e-12:
            bad += 1
    return bad == 0, f"{bad} of 1000 head evaluations outside [min, max]"


CHECKS = [
    ("risk estimators match brute force", _check_risk_oracle),
    ("second-order autodiff", _check_second_derivative),
    ("meta-gradient finite differences", _check_meta_gradient),
    ("uniform head equals expected value", _check_uniform_equivalence),
    ("learned head convexity", _check_convexity),
]


def run_checks(seed=0, out=print):
    """Run every check; prints one line each and returns True when all pass."""
    rng = np.random.default_rng(seed)
    ok_all = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn(rng)
        except Exception as e:  # a crash is a failed check, not an abort
            ok, detail = False, f"{type(e).__name__}: {e}"
        ok_all &= ok
        out(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return ok_all
