"""Training loops: fixed batch-level risk, and jointly learned risk head.

One learned-head step does the following:

1. copy ``theta`` into fresh graph leaves ``theta'`` and take ``inner_steps``
   differentiable SGD steps on the head's objective, each on a new batch;
2. evaluate the target risk of ``theta'`` on a validation batch and update
   ``phi`` with Adam along the gradient that flows back through ``theta'``;
3. throw ``theta'`` away, draw a new batch and take one real optimizer step
   on ``theta`` under the updated head.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from . import learned, models, risk
from .data import BatchSampler

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class OneCycleSchedule:
    start_lr: float = 0.005
    max_lr: float = 0.1
    final_lr: float = 5e-6
    warm_fraction: float = 0.3


def one_cycle_lr(step, schedule, total_steps):
    """Linear ramp ``start_lr -> max_lr`` then cosine anneal ``max_lr -> final_lr``."""
    if not (0 <= step <= total_steps):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    s = schedule
    peak = s.warm_fraction * total_steps
    if step <= peak:
        if peak == 0:
            return s.max_lr
        return s.start_lr + (s.max_lr - s.start_lr) * (step / peak)
    t = (step - peak) / (total_steps - peak)
    return s.final_lr + (s.max_lr - s.final_lr) * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass(frozen=True)
class TrainerConfig:
    inner_lr_beta: Optional[float] = None  # None: use the scheduled lr of the current step
    outer_lr_eta: float = 0.001
    inner_steps: int = 5
    batch_size: int = 32
    meta_val_batch: int = 256
    total_steps: int = 4000
    schedule: OneCycleSchedule = field(default_factory=OneCycleSchedule)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_clip: Optional[float] = None
    clip_inner: bool = True  # inner steps use the same clip as the real step
    warm_start_steps: int = 0
    early_stop_patience: int = 5
    early_stopping: bool = True
    early_stop_after_peak: bool = True
    seed: int = 0
    fresh_inner_batches: bool = True
    phi_grad_mode: str = "drop_direct"  # or "detach_inner"
    freeze_phi: bool = False

    def __post_init__(self):
        bad = []
        if self.inner_lr_beta is not None and not self.inner_lr_beta >= 0:
            bad.append(f"inner_lr_beta={self.inner_lr_beta}")
        for name in ("outer_lr_eta",):
            if not getattr(self, name) > 0:
                bad.append(f"{name}={getattr(self, name)}")
        for name in ("inner_steps", "batch_size", "meta_val_batch", "total_steps", "early_stop_patience"):
            if int(getattr(self, name)) < 1:
                bad.append(f"{name}={getattr(self, name)}")
        if not (0 <= self.warm_start_steps <= self.total_steps):
            bad.append(f"warm_start_steps={self.warm_start_steps}")
        s = self.schedule
        if not (s.start_lr > 0 and s.max_lr > 0 and s.final_lr > 0 and 0 <= s.warm_fraction <= 1):
            bad.append(f"schedule={s}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            bad.append(f"grad_clip={self.grad_clip}")
        if self.phi_grad_mode not in ("drop_direct", "detach_inner"):
            bad.append(f"phi_grad_mode={self.phi_grad_mode!r}")
        if bad:
            raise ValueError("invalid TrainerConfig: " + ", ".join(bad))


@dataclass
class TrainRecord:
    step: int
    train_risk: float
    val_risk: float
    lr: float
    phi_entropy: float = float("nan")


CSV_HEADER = "step,train_risk,val_risk,lr,phi_entropy"


def write_records(path, records):
    with open(path, "w") as f:
        f.write(CSV_HEADER + "\n")
        for r in records:
            f.write(f"{r.step},{r.train_risk!r},{r.val_risk!r},{r.lr!r},{r.phi_entropy!r}\n")


def read_records(path):
    out = []
    with open(path) as f:
        header = f.readline().strip()
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in f:
            s, tr, vr, lr, ent = line.strip().split(",")
            out.append(TrainRecord(int(s), float(tr), float(vr), float(lr), float(ent)))
    return out


# --------------------------------------------------------------------------- optimizers

class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, param, grad):
        if self.m is None:
            self.m = np.zeros_like(param)
            self.v = np.zeros_like(param)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return param - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class SGD:
    """SGD with momentum and coupled weight decay (``g + wd * p``).

    ``clip_norm`` rescales the raw gradient to at most that global L2 norm
    before decay and momentum are applied.
    """

    def __init__(self, momentum=0.9, weight_decay=5e-4, clip_norm=None):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.buf = None

    def step(self, params, grads, lr):
        if self.buf is None:
            self.buf = [None] * len(params)
        if self.clip_norm is not None:
            norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
            if norm > self.clip_norm:
                grads = [g * (self.clip_norm / norm) for g in grads]
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            if self.weight_decay:
                g = g + self.weight_decay * p
            if self.momentum:
                b = g if self.buf[i] is None else self.momentum * self.buf[i] + g
                self.buf[i] = b
                g = b
            out.append(p - lr * g)
        return out


# --------------------------------------------------------------------------- building blocks

def _check_finite(losses, where, step=None):
    v = losses.value if isinstance(losses, ad.Node) else losses
    if not np.all(np.isfinite(v)):
        finite = v[np.isfinite(v)]
        stats = (
            f"min={finite.min():.4g} max={finite.max():.4g} mean={finite.mean():.4g}"
            if finite.size else "no finite entries"
        )
        raise NonFiniteLossError(
            f"non-finite loss in {where} (step={step}): {np.sum(~np.isfinite(v))} of {v.size} "
            f"entries non-finite; finite {stats}"
        )


def batch_losses(spec, theta_nodes, X, y):
    return models.cross_entropy_per_sample(models.forward(spec, theta_nodes, X), y)


def inner_adapt(spec, theta, phi, batches, beta, detach_phi=False, step=None, loss_fn=None, clip_norm=None):
    """Differentiable SGD steps ``theta' <- theta' - beta * grad g_phi``.

    ``phi`` is a leaf node on the tape the adapted parameters are recorded
    on.  ``batches`` is a list of ``(X, y)`` pairs, one per inner step.
    Returns the adapted parameters as nodes still connected to ``phi``.
    Only gradients with respect to ``theta'`` are taken, so nothing is ever
    accumulated on ``phi`` by the inner passes.  ``loss_fn(theta_nodes, X, y)``
    replaces the classifier's per-sample cross-entropy when given.
    ``clip_norm`` applies the real optimizer's gradient clip, differentiably.
    """
    if not batches:
        raise ValueError("inner_adapt needs at least one batch")
    tape = phi.tape
    theta_p = [tape.variable(p) for p in theta]
    head_phi = ad.detach(phi) if detach_phi else phi
    loss_fn = loss_fn or (lambda th, X, y: batch_losses(spec, th, X, y))
    for i, (X, y) in enumerate(batches):
        losses = loss_fn(theta_p, X, y)
        _check_finite(losses, f"inner step {i}", step)
        objective = learned.apply(head_phi, losses)
        grads = ad.backward(objective, theta_p, create_graph=True)
        if clip_norm is not None:
            norm = ad.sqrt(sum(ad.sum(ad.square(g)) for g in grads))
            if norm.item() > clip_norm:
                scale = tape.constant(clip_norm) / norm
                grads = [g * scale for g in grads]
        theta_p = [t - g * float(beta) for t, g in zip(theta_p, grads)]
    return theta_p


def meta_gradient(spec, phi, theta_prime, X_val, y_val, rho, require_path=True):
    """``(grad_phi, risk_value)`` of ``rho`` on the validation batch through ``theta'``."""
    losses = batch_losses(spec, theta_prime, X_val, y_val)
    _check_finite(losses, "validation batch")
    r = risk.evaluate(losses, rho)
    (g,) = ad.backward(r, [phi], allow_unused=True)
    if g is None:
        if require_path:
            raise ad.GraphError("outer step: validation risk has no gradient path to phi")
        g = np.zeros_like(phi.value)
    return g, r.item()


def outer_step(spec, phi, theta_prime, X_val, y_val, rho, adam, require_path=True):
    """One Adam step on ``phi``.  Returns ``(PhiParams, grad, val_risk)``."""
    g, r = meta_gradient(spec, phi, theta_prime, X_val, y_val, rho, require_path)
    new_phi = adam.step(phi.value, g)
    return learned.PhiParams(new_phi, phi.shape[0]), g, r


def head_objective(objective, losses):
    if isinstance(objective, learned.PhiParams):
        return learned.apply(objective, losses)
    return risk.evaluate(losses, objective)


def real_step(spec, theta, objective, X, y, optimizer, lr, step=None):
    """One optimizer step on the real parameters; returns ``(theta, objective_value)``."""
    tape = ad.Tape("first_order")
    nodes = [tape.variable(p) for p in theta]
    losses = batch_losses(spec, nodes, X, y)
    _check_finite(losses, "train batch", step)
    obj = head_objective(objective, losses)
    grads = ad.backward(obj, nodes)
    return optimizer.step(theta, grads, lr), obj.item()


def early_stop(metrics, patience):
    """True once the best (lowest) epoch metric is ``patience`` or more epochs old."""
    metrics = list(metrics)
    if not metrics:
        raise ValueError("early_stop needs at least one epoch metric")
    best_i = 0
    for i, m in enumerate(metrics):
        if m < metrics[best_i]:
            best_i = i
    return len(metrics) - 1 - best_i >= patience


def snapshot_steps(total_steps):
    # rounded up so short runs still get distinct early snapshots
    fracs = (0.0, 0.01, 0.05, 0.10, 0.25, 0.50, 1.0)
    return sorted({int(math.ceil(f * total_steps - 1e-9)) for f in fracs})


def evaluate_split(spec, theta, ds, rho):
    """``rho`` of the per-sample losses on ``ds``; ``rho == "error"`` gives 1 - accuracy."""
    logits = models.forward_array(spec, theta, ds.features)
    if isinstance(rho, str):
        if rho != "error":
            raise ValueError(f"unknown monitor {rho!r}")
        return 1.0 - models.accuracy(logits, ds.labels)
    return float(risk.evaluate(models.cross_entropy_per_sample(logits, ds.labels), rho))


# --------------------------------------------------------------------------- loop

@dataclass
class TrainResult:
    theta: list
    records: List[TrainRecord]
    phi: Optional[learned.PhiParams] = None
    snapshots: list = field(default_factory=list)
    steps_run: int = 0
    stopped_early: bool = False
    epoch_metrics: list = field(default_factory=list)


class _Streams:
    """Independent random streams so the real-update batches do not depend on the method."""

    def __init__(self, seed, view, cfg):
        main, inner, val = np.random.SeedSequence(seed).spawn(3)
        n_train = len(view.train)
        self.main = BatchSampler(n_train, cfg.batch_size, np.random.default_rng(main))
        self.inner = BatchSampler(n_train, cfg.batch_size, np.random.default_rng(inner))
        n_val = len(view.val)
        replace_val = n_val < cfg.meta_val_batch
        self.val = BatchSampler(n_val, cfg.meta_val_batch, np.random.default_rng(val), replace=replace_val)


def _take(ds, idx):
    return ds.features[idx], ds.labels[idx]


def train(spec, theta0, view, cfg, objective, monitor=None, step_offset=0):
    """Train ``theta0`` on ``view.train`` for ``cfg.total_steps`` steps.

    ``objective`` is either a ``RiskFunctional`` applied to every mini-batch,
    or ``("learned", rho)`` to learn the batch head jointly with target risk
    ``rho``.  ``monitor`` is the risk tracked on ``view.val`` for early
    stopping (defaults to the target).
    """
    learning = isinstance(objective, tuple)
    if learning:
        tag, target = objective
        if tag != "learned":
            raise ValueError(f"unknown objective {objective!r}")
        phi = learned.init_phi(cfg.batch_size)
        adam = Adam(cfg.outer_lr_eta, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    else:
        target = objective
        phi = None
    monitor = monitor or target
    streams = _Streams(cfg.seed, view, cfg)
    sgd = SGD(cfg.momentum, cfg.weight_decay, cfg.grad_clip)
    theta = [np.array(p, dtype=np.float64) for p in theta0]
    total = cfg.total_steps
    per_epoch = streams.main.batches_per_epoch
    snap_at = set(snapshot_steps(total)) if learning else set()
    result = TrainResult(theta, [], phi)
    best_metric = math.inf
    first_armed = 0

    step = 0
    while step < total:
        if learning and step in snap_at:
            result.snapshots.append(learned.snapshot(phi, step + step_offset))
        lr = one_cycle_lr(step, cfg.schedule, total)
        val_risk = float("nan")
        if learning:
            beta = lr if cfg.inner_lr_beta is None else cfg.inner_lr_beta
            tape = ad.Tape("higher_order")
            phi_node = tape.variable(phi.phi)
            if cfg.fresh_inner_batches:
                batches = [_take(view.train, streams.inner.next()) for _ in range(cfg.inner_steps)]
            else:
                batches = [_take(view.train, streams.inner.next())] * cfg.inner_steps
            theta_p = inner_adapt(spec, theta, phi_node, batches, beta,
                                  detach_phi=cfg.phi_grad_mode == "detach_inner", step=step,
                                  clip_norm=cfg.grad_clip if cfg.clip_inner else None)
            Xv, yv = _take(view.val, streams.val.next())
            new_phi, _, val_risk = outer_step(spec, phi_node, theta_p, Xv, yv, target, adam,
                                              require_path=cfg.phi_grad_mode == "drop_direct")
            if not cfg.freeze_phi:
                phi = new_phi
            head = phi
        else:
            head = target
        X, y = _take(view.train, streams.main.next())
        theta, train_risk = real_step(spec, theta, head, X, y, sgd, lr, step=step)
        if math.isnan(val_risk):
            val_risk = evaluate_split(spec, theta, view.val, monitor)
        ent = learned.snapshot(phi, step).entropy if learning else float("nan")
        result.records.append(TrainRecord(step + step_offset, train_risk, val_risk, lr, ent))
        step += 1

        if cfg.early_stopping and per_epoch and step % per_epoch == 0:
            metric = evaluate_split(spec, theta, view.val, monitor)
            result.epoch_metrics.append(metric)
            best_metric = min(best_metric, metric)
            if cfg.early_stop_after_peak and step < cfg.schedule.warm_fraction * total:
                first_armed = len(result.epoch_metrics)
            window = result.epoch_metrics[first_armed:]
            if window and early_stop(window, cfg.early_stop_patience):
                result.stopped_early = True
                log.info("early stop at step %d (best val %.6g)", step, best_metric)
                break

    if learning:
        # scheduled snapshots not reached keep the final head, which no longer changes
        for s in sorted(snap_at):
            if s >= step:
                result.snapshots.append(learned.snapshot(phi, s + step_offset))
    result.theta = theta
    result.phi = phi
    result.steps_run = step
    return result


def train_fixed_rho(spec, theta, view, rho, cfg, monitor=None):
    """Mini-batch training that applies ``rho`` to every batch."""
    return train(spec, theta, view, cfg, rho, monitor=monitor)


def train_learned(spec, theta, view, rho, cfg, monitor=None):
    """Jointly learn the batch head against dataset-level ``rho`` on validation data."""
    return train(spec, theta, view, cfg, ("learned", rho), monitor=monitor)


def warm_start_then(spec, theta, view, objective, cfg, monitor=None):
    """Expected-value phase of ``cfg.warm_start_steps`` then ``objective`` for the rest.

    Each phase gets its own full one-cycle schedule and a fresh optimizer.
    ``objective`` is a ``RiskFunctional`` or ``("learned", rho)``.
    """
    warm = cfg.warm_start_steps
    rest = cfg.total_steps - warm
    if warm == 0:
        return train(spec, theta, view, cfg, objective, monitor=monitor)
    target = objective[1] if isinstance(objective, tuple) else objective
    monitor = monitor or target
    ev = risk.RiskFunctional("expected_value")
    phase1 = train(spec, theta, view, replace(cfg, total_steps=warm, warm_start_steps=0), ev, monitor=monitor)
    if rest == 0:
        return phase1
    phase2 = train(
        spec, phase1.theta, view, replace(cfg, total_steps=rest, warm_start_steps=0), objective,
        monitor=monitor, step_offset=phase1.steps_run,
    )
    phase2.records = phase1.records + phase2.records
    phase2.epoch_metrics = phase1.epoch_metrics + phase2.epoch_metrics
    phase2.steps_run += phase1.steps_run
    return phase2
