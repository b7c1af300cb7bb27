"""Experiment runner: configs, per-seed runs, evaluation and summary tables.

A config is an INI-style file with ``[experiment]``, ``[data]``, ``[model]``
and ``[trainer]`` sections.  Example::

    [experiment]
    kind = label_noise
    rho = ev
    methods = ev,learned,oracle
    seeds = 0,1,2,3,4

    [data]
    source = blobs
    noise = 0.4

    [trainer]
    total_steps = 4000
"""

import configparser
import csv
import io
import itertools
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from . import data, learned, models, risk, trainer

log = logging.getLogger(__name__)

KINDS = ("risk_compare", "label_noise")
METHODS = ("ev", "batch_rho", "batch_rho_warm", "learned", "oracle")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3

_DATA_DEFAULTS = dict(
    source="blobs", n=5000, test_n=1000, classes=10, dim=20, spread=1.2, center_scale=1.0,
    noise=0.0, clean_val=False, clean_fraction=0.02,
    images="", labels="", test_images="", test_labels="", path="", test_path="",
)
_SCHEDULE_KEYS = ("start_lr", "max_lr", "final_lr", "warm_fraction")
# desk-scale trainer defaults that differ from TrainerConfig's; the MLP has no
# normalization, so tail-weighted objectives diverge at max_lr 0.1 without a clip
_TRAINER_DEFAULTS = {"grad_clip": 2.0}
# keys whose value is itself a list; never expanded by --grid
_LIST_KEYS = {("experiment", "methods"), ("experiment", "seeds")}


class ConfigError(ValueError):
    """Raised with every violated field listed, one per line."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


@dataclass
class DataSpec:
    source: str = "blobs"
    n: int = 5000
    test_n: int = 1000
    classes: int = 10
    dim: int = 20
    spread: float = 1.2
    center_scale: float = 1.0
    noise: float = 0.0
    clean_val: bool = False
    clean_fraction: float = 0.02
    images: str = ""
    labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    path: str = ""
    test_path: str = ""


@dataclass
class ExperimentConfig:
    kind: str
    rho: risk.RiskFunctional
    methods: List[str]
    seeds: List[int]
    dataset: DataSpec = field(default_factory=DataSpec)
    hidden: List[int] = field(default_factory=lambda: [64])
    train_cfg: trainer.TrainerConfig = field(default_factory=trainer.TrainerConfig)
    out: str = ""
    name: str = "experiment"


# --------------------------------------------------------------------------- parsing

def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(text, like):
    if isinstance(like, bool):
        return _parse_bool(text)
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text.strip()


def _int_list(text, sep=","):
    return [int(s) for s in text.replace(sep, " ").split()]


def read_sections(text):
    """Parse config text into ``{section: {key: raw value}}``."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    cp.read_string(text)
    return {s: dict(cp.items(s)) for s in cp.sections()}


def build_config(sections, name="experiment"):
    """Validate raw sections into an ``ExperimentConfig``; raises ``ConfigError``."""
    problems = []
    known = {"experiment", "data", "model", "trainer"}
    for s in sections:
        if s not in known:
            problems.append(f"[{s}]: unknown section")
    exp = sections.get("experiment", {})
    kind = exp.get("kind", "").strip()
    if kind not in KINDS:
        problems.append(f"experiment.kind: expected one of {', '.join(KINDS)}, got {kind!r}")
    rho = None
    try:
        rho = risk.parse_risk(exp.get("rho", "ev"))
    except ValueError as e:
        problems.append(f"experiment.rho: {e}")
    methods = [m.strip() for m in exp.get("methods", exp.get("method", "")).split(",") if m.strip()]
    if not methods:
        problems.append("experiment.methods: at least one method required")
    for m in methods:
        if m not in METHODS:
            problems.append(f"experiment.methods: unknown method {m!r}")
    if "oracle" in methods and kind != "label_noise":
        problems.append("experiment.methods: oracle is only valid for kind = label_noise")
    seeds = []
    try:
        seeds = _int_list(exp.get("seeds", "0"))
    except ValueError:
        problems.append(f"experiment.seeds: not an integer list: {exp.get('seeds')!r}")
    if not seeds:
        problems.append("experiment.seeds: at least one seed required")
    if len(set(seeds)) != len(seeds):
        problems.append("experiment.seeds: duplicate seeds")
    for key in exp:
        if key not in ("kind", "rho", "methods", "method", "seeds", "out"):
            problems.append(f"experiment.{key}: unknown key")

    dvals = {}
    for key, raw in sections.get("data", {}).items():
        if key not in _DATA_DEFAULTS:
            problems.append(f"data.{key}: unknown key")
            continue
        try:
            dvals[key] = _coerce(raw, _DATA_DEFAULTS[key])
        except ValueError:
            problems.append(f"data.{key}: cannot parse {raw!r}")
    dspec = DataSpec(**dvals)
    if dspec.source not in ("blobs", "idx", "text"):
        problems.append(f"data.source: expected blobs, idx or text, got {dspec.source!r}")
    if not 0.0 <= dspec.noise <= 1.0:
        problems.append(f"data.noise: must lie in [0, 1], got {dspec.noise}")
    if not 0.0 < dspec.clean_fraction < 1.0:
        problems.append(f"data.clean_fraction: must lie in (0, 1), got {dspec.clean_fraction}")
    if dspec.source == "blobs":
        if dspec.n < 20 or dspec.classes < 2 or dspec.n < dspec.classes:
            problems.append(f"data.n/classes: need n >= max(20, classes) and classes >= 2")
        if dspec.dim < 1:
            problems.append("data.dim: must be >= 1")
        if not dspec.spread > 0:
            problems.append("data.spread: must be > 0")
        if dspec.test_n < 1:
            problems.append("data.test_n: must be >= 1")
    elif dspec.source == "idx":
        for key in ("images", "labels", "test_images", "test_labels"):
            if not getattr(dspec, key):
                problems.append(f"data.{key}: required for source = idx")
    else:
        for key in ("path", "test_path"):
            if not getattr(dspec, key):
                problems.append(f"data.{key}: required for source = text")

    hidden = [64]
    model = sections.get("model", {})
    for key in model:
        if key != "hidden":
            problems.append(f"model.{key}: unknown key")
    if "hidden" in model:
        try:
            hidden = [int(s) for s in model["hidden"].split()]
            if any(h < 1 for h in hidden):
                raise ValueError
        except ValueError:
            problems.append(f"model.hidden: expected space-separated positive widths, got {model['hidden']!r}")

    tcfg = None
    tvals, svals = dict(_TRAINER_DEFAULTS), {}
    defaults = trainer.TrainerConfig()
    for key, raw in sections.get("trainer", {}).items():
        try:
            if key in _SCHEDULE_KEYS:
                svals[key] = float(raw)
            elif key in ("inner_lr_beta", "grad_clip"):
                tvals[key] = None if raw.strip().lower() in ("", "none", "off", "scheduled") else float(raw)
            elif key == "schedule" or not hasattr(defaults, key):
                problems.append(f"trainer.{key}: unknown key")
            else:
                tvals[key] = _coerce(raw, getattr(defaults, key))
        except ValueError:
            problems.append(f"trainer.{key}: cannot parse {raw!r}")
    try:
        tcfg = trainer.TrainerConfig(schedule=trainer.OneCycleSchedule(**svals), **tvals)
    except ValueError as e:
        problems.append(f"trainer: {e}")
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(kind, rho, methods, seeds, dspec, hidden, tcfg, exp.get("out", "").strip(), name)


def load_config(path):
    with open(path) as f:
        text = f.read()
    return build_config(read_sections(text), name=os.path.splitext(os.path.basename(path))[0])


def expand_grid(sections):
    """Every combination of comma-separated values, as ``(tag, sections)`` pairs."""
    axes = []
    for s, kv in sections.items():
        for k, v in kv.items():
            if (s, k) in _LIST_KEYS:
                continue
            values = [x.strip() for x in v.split(",")]
            if len(values) > 1:
                axes.append((s, k, values))
    if not axes:
        return [("", sections)]
    out = []
    for combo in itertools.product(*[vals for _, _, vals in axes]):
        sec = {s: dict(kv) for s, kv in sections.items()}
        parts = []
        for (s, k, _), v in zip(axes, combo):
            sec[s][k] = v
            parts.append(f"{k}={v}")
        out.append(("_".join(parts).replace(":", "-").replace(" ", "-"), sec))
    return out


# --------------------------------------------------------------------------- data

def build_data(cfg, seed):
    """Training view, test set and the measured clean fraction of the training split."""
    d = cfg.dataset
    if d.source == "blobs":
        full = data.gen_blobs(seed, d.n + d.test_n, d.classes, d.dim, d.spread, center_scale=d.center_scale)
        pool = full.subset(np.arange(d.n))
        test = full.subset(np.arange(d.n, d.n + d.test_n))
    elif d.source == "idx":
        pool = data.load_idx(d.images, d.labels)
        test = data.load_idx(d.test_images, d.test_labels, num_classes=pool.num_classes)
    else:
        pool = data.read_text(d.path)
        test = data.read_text(d.test_path)
    noise_seed = seed + 100_000
    if d.clean_val:
        clean, rest = data.carve_clean(pool, d.clean_fraction, seed)
        sp = data.split_90_5_5(rest, seed, test)
        noisy_train = data.inject_label_noise(sp.train, d.noise, noise_seed)
        train_clean = float(np.mean(noisy_train.labels == sp.train.labels))
        sp = replace(sp, train=noisy_train, val=clean)
    else:
        noisy = data.inject_label_noise(pool, d.noise, noise_seed)
        sp = data.split_90_5_5(noisy, seed, test)
        train_clean = float(np.mean(sp.train.labels == pool.labels[sp.train.index]))
    return sp.training_view(), test, train_clean


# --------------------------------------------------------------------------- evaluation

def evaluate_all(spec, theta, test_set, suite=None):
    """Every functional of ``suite`` on one vector of test losses, plus accuracy."""
    suite = suite or risk.default_suite()
    logits = models.forward_array(spec, theta, test_set.features)
    losses = models.cross_entropy_per_sample(logits, test_set.labels)
    report = {f.label: float(risk.evaluate(losses, f)) for f in suite}
    report["accuracy"] = models.accuracy(logits, test_set.labels)
    return report


@dataclass
class ResultRow:
    method: str
    rho: str
    seed: int
    status: str
    test_risk: float
    test_accuracy: float
    steps_run: int
    wall_seconds: float
    suite: dict = field(default_factory=dict)


def _suite_labels():
    return [f.label for f in risk.default_suite()]


def write_results(path, rows):
    labels = _suite_labels()
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "rho", "seed", "status", "test_risk", "test_accuracy", "steps_run"] + labels)
        for r in rows:
            w.writerow([r.method, r.rho, r.seed, r.status, repr(r.test_risk), repr(r.test_accuracy), r.steps_run]
                       + [repr(r.suite.get(k, math.nan)) for k in labels])


def write_timings(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "seed", "wall_seconds"])
        for r in rows:
            w.writerow([r.method, r.seed, f"{r.wall_seconds:.3f}"])


def read_results(path):
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        labels = [c for c in reader.fieldnames if c not in
                  ("method", "rho", "seed", "status", "test_risk", "test_accuracy", "steps_run")]
        for rec in reader:
            rows.append(ResultRow(
                rec["method"], rec["rho"], int(rec["seed"]), rec["status"], float(rec["test_risk"]),
                float(rec["test_accuracy"]), int(rec["steps_run"]), math.nan,
                {k: float(rec[k]) for k in labels},
            ))
    return rows


# --------------------------------------------------------------------------- summary

_TIE = 1e-12


def _std(values):
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1))


def summarize(rows):
    """Per-method ``{metric: (mean, std, n)}`` plus the best-method set per metric.

    Risks are best when lowest, accuracy when highest.  Failed rows are skipped.
    """
    if not rows:
        raise ValueError("no result rows to summarize")
    methods = list(dict.fromkeys(r.method for r in rows))
    metrics = ["test_risk", "test_accuracy"] + list(rows[0].suite)
    table = {}
    for m in methods:
        ok = [r for r in rows if r.method == m and r.status == "ok"]
        table[m] = {}
        for k in metrics:
            vals = [getattr(r, k) if k in ("test_risk", "test_accuracy") else r.suite[k] for r in ok]
            mean = float(np.mean(vals)) if vals else math.nan
            table[m][k] = (mean, _std(vals) if vals else math.nan, len(vals))
    best = {}
    for k in metrics:
        means = {m: table[m][k][0] for m in methods if not math.isnan(table[m][k][0])}
        if not means:
            best[k] = set()
            continue
        target = max(means.values()) if k == "test_accuracy" else min(means.values())
        best[k] = {m for m, v in means.items() if abs(v - target) <= _TIE}
    return methods, metrics, table, best


def _cell(metric, mean, std):
    if math.isnan(mean):
        return "failed"
    if metric == "test_accuracy":
        return f"{100 * mean:.2f} ({100 * std:.3f})"
    return f"{mean:.4f} ({std:.4f})"


def compare_report(rows, out_dir):
    """Write ``summary.csv`` and ``summary.txt``; returns the text rendering."""
    methods, metrics, table, best = summarize(rows)
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "metric", "mean", "std", "n", "best"])
        for m in methods:
            for k in metrics:
                mean, std, n = table[m][k]
                w.writerow([m, k, repr(mean), repr(std), n, int(m in best[k])])
    header = ["method"] + metrics
    body = []
    for m in methods:
        cells = [m]
        for k in metrics:
            mean, std, _ = table[m][k]
            cells.append(_cell(k, mean, std) + (" *" if m in best[k] else "  "))
        body.append(cells)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    buf = io.StringIO()
    rho = rows[0].rho
    buf.write(f"rho = {rho}; mean (std) over seeds; accuracy in percent; * marks the best method\n")
    for r in [header] + body:
        buf.write("  ".join(c.rjust(wd) if i else c.ljust(wd) for i, (c, wd) in enumerate(zip(r, widths))).rstrip())
        buf.write("\n")
    text = buf.getvalue()
    with open(os.path.join(out_dir, "summary.txt"), "w") as f:
        f.write(text)
    return text


# --------------------------------------------------------------------------- runs

def _warm_steps(tcfg):
    # paper protocol: half the budget in the expected-value phase
    return tcfg.warm_start_steps or tcfg.total_steps // 2


def run_method(cfg, method, seed, view, test, train_clean):
    """Train one method on one seed; returns ``(ResultRow, TrainResult)``."""
    spec = models.MlpSpec([view.train.dim] + cfg.hidden + [view.train.num_classes], init_seed=seed)
    theta = models.init_params(spec)
    tcfg = replace(cfg.train_cfg, seed=seed, warm_start_steps=0)
    rho = cfg.rho
    ev = risk.RiskFunctional("expected_value")
    t0 = time.perf_counter()
    if method == "ev":
        res = trainer.train_fixed_rho(spec, theta, view, ev, tcfg, monitor=rho)
    elif method == "batch_rho":
        res = trainer.train_fixed_rho(spec, theta, view, rho, tcfg)
    elif method == "batch_rho_warm":
        res = trainer.warm_start_then(spec, theta, view, rho, replace(tcfg, warm_start_steps=_warm_steps(cfg.train_cfg)))
    elif method == "learned":
        res = trainer.train_learned(spec, theta, view, rho, tcfg)
    elif method == "oracle":
        alpha = min(max(train_clean, 1e-6), 1 - 1e-9)
        icvar = risk.RiskFunctional("icvar", alpha=alpha)
        res = trainer.warm_start_then(spec, theta, view, icvar,
                                      replace(tcfg, warm_start_steps=_warm_steps(cfg.train_cfg)), monitor=rho)
    else:
        raise ValueError(f"unknown method {method!r}")
    seconds = time.perf_counter() - t0
    suite = risk.default_suite()
    report = evaluate_all(spec, res.theta, test, suite + [rho])
    test_risk = report[rho.label]
    if rho.label not in {f.label for f in suite}:
        del report[rho.label]
    row = ResultRow(method, rho.label, seed, "ok", test_risk, report.pop("accuracy"), res.steps_run, seconds, report)
    return row, res


def _failed_row(cfg, method, seed, seconds):
    return ResultRow(method, cfg.rho.label, seed, "failed", math.nan, math.nan, 0, seconds,
                     {k: math.nan for k in _suite_labels()})


def run(cfg, out_dir=None, seeds=None):
    """Run every (method, seed) pair and write the artifacts; returns ``(rows, exit_code)``."""
    out_dir = out_dir or cfg.out or os.path.join("runs", cfg.name)
    seeds = list(seeds) if seeds else cfg.seeds
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for seed in seeds:
        try:
            view, test, train_clean = build_data(cfg, seed)
        except (ValueError, OSError) as e:
            log.error("seed %d: data construction failed: %s", seed, e)
            rows.extend(_failed_row(cfg, m, seed, 0.0) for m in cfg.methods)
            continue
        for method in cfg.methods:
            t0 = time.perf_counter()
            try:
                row, res = run_method(cfg, method, seed, view, test, train_clean)
            except (FloatingPointError, ValueError, ArithmeticError) as e:
                log.error("seed %d method %s failed: %s", seed, method, e)
                rows.append(_failed_row(cfg, method, seed, time.perf_counter() - t0))
                continue
            rows.append(row)
            trainer.write_records(os.path.join(out_dir, f"train_{method}_{seed}.csv"), res.records)
            if method == "learned":
                learned.write_snapshots(os.path.join(out_dir, f"phi_{seed}.csv"), res.snapshots)
            log.info("seed %d %s: acc %.4f risk %.5g steps %d (%.1fs)", seed, method,
                     row.test_accuracy, row.test_risk, row.steps_run, row.wall_seconds)
    write_results(os.path.join(out_dir, "results.csv"), rows)
    write_timings(os.path.join(out_dir, "timings.csv"), rows)
    if any(r.status == "ok" for r in rows):
        compare_report(rows, out_dir)
    failed = any(r.status != "ok" for r in rows)
    return rows, EXIT_PARTIAL if failed else EXIT_OK

