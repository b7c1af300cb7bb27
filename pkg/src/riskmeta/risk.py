"""Empirical risk functionals over a finite vector of per-sample losses.

Each estimator accepts either a plain array (returns a float) or a vector
``Node`` (returns a scalar ``Node`` usable as a training objective).  The
array path sums with ``math.fsum`` so results are correctly rounded and do
not depend on summation order.

Quantile-based functionals use the order statistic ``k = ceil(alpha * n)``:
``cvar`` averages the ``k`` largest losses, ``icvar`` the ``k`` smallest,
``trimmed`` drops ``k`` from each end.
"""

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Optional

import numpy as np

from . import _kernels
from . import autodiff as ad

KINDS = ("expected_value", "cvar", "icvar", "human_aligned", "mean_variance", "trimmed")

_SHORT_NAMES = {
    "ev": "expected_value",
    "cvar": "cvar",
    "icvar": "icvar",
    "trimmed": "trimmed",
    "meanvar": "mean_variance",
    "human": "human_aligned",
}


def prelec_like_weight(gamma=2.0):
    """Distortion ``w(p) = p^g / (p^g + (1-p)^g)^(1/g)``.

    With ``g > 1`` it is convex near 0 and pushes weight onto the largest
    losses.  ``w(0) = 0`` and ``w(1) = 1``.
    """
    gamma = float(gamma)

    def w(p):
        p = np.asarray(p, dtype=np.float64)
        a = p ** gamma
        b = (1.0 - p) ** gamma
        return a / (a + b) ** (1.0 / gamma)

    w.gamma = gamma
    return w


def _identity(p):
    return np.asarray(p, dtype=np.float64)


def _check_distortion(w):
    grid = np.linspace(0.0, 1.0, 201)
    vals = np.asarray(w(grid), dtype=np.float64)
    if abs(vals[0]) > 1e-12 or abs(vals[-1] - 1.0) > 1e-12:
        raise ValueError("distortion must satisfy w(0)=0 and w(1)=1")
    if np.any(np.diff(vals) < -1e-12):
        raise ValueError("distortion must be nondecreasing on [0, 1]")


@dataclass(frozen=True)
class RiskFunctional:
    kind: str
    alpha: Optional[float] = None
    c: Optional[float] = None
    w: Optional[Callable] = None
    label: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown risk kind {self.kind!r}; expected one of {KINDS}")
        needs_alpha = self.kind in ("cvar", "icvar", "trimmed")
        if needs_alpha:
            if self.alpha is None or not (0.0 < self.alpha < 1.0):
                raise ValueError(f"{self.kind} needs 0 < alpha < 1, got {self.alpha}")
            if self.kind == "trimmed" and not self.alpha < 0.5:
                raise ValueError(f"trimmed needs alpha < 0.5, got {self.alpha}")
        elif self.alpha is not None:
            raise ValueError(f"{self.kind} takes no alpha")
        if self.kind == "mean_variance":
            if self.c is None or self.c < 0:
                raise ValueError(f"mean_variance needs c >= 0, got {self.c}")
        if self.kind == "human_aligned":
            if self.w is None:
                object.__setattr__(self, "w", prelec_like_weight())
            _check_distortion(self.w)
        if not self.label:
            object.__setattr__(self, "label", _default_label(self))

    def __call__(self, losses):
        return evaluate(losses, self)

    def __repr__(self):
        return f"RiskFunctional({self.label})"


def _default_label(r):
    if r.kind == "expected_value":
        return "ev"
    if r.kind in ("cvar", "icvar", "trimmed"):
        return f"{r.kind}:{r.alpha:g}"
    if r.kind == "mean_variance":
        return f"meanvar:{r.c:g}"
    gamma = getattr(r.w, "gamma", None)
    return f"human:{gamma:g}" if gamma is not None else "human:custom"


def parse_risk(text):
    """Parse ``ev``, ``cvar:0.1``, ``icvar:0.1``, ``trimmed:0.1``, ``meanvar:1.0``, ``human:2.0``."""
    text = text.strip()
    name, _, arg = text.partition(":")
    name = name.strip().lower()
    if name not in _SHORT_NAMES:
        raise ValueError(f"unknown risk spec {text!r}")
    kind = _SHORT_NAMES[name]
    if kind == "expected_value":
        if arg:
            raise ValueError(f"'ev' takes no parameter: {text!r}")
        return RiskFunctional("expected_value")
    if not arg:
        raise ValueError(f"risk spec {text!r} needs a parameter")
    try:
        value = float(arg)
    except ValueError:
        raise ValueError(f"bad parameter in risk spec {text!r}") from None
    if kind in ("cvar", "icvar", "trimmed"):
        return RiskFunctional(kind, alpha=value, label=f"{name}:{arg.strip()}")
    if kind == "mean_variance":
        return RiskFunctional(kind, c=value, label=f"{name}:{arg.strip()}")
    return RiskFunctional(kind, w=prelec_like_weight(value), label=f"{name}:{arg.strip()}")


def default_suite():
    """The six functionals reported for every evaluation, at the default parameters."""
    return [parse_risk(s) for s in ("ev", "cvar:0.1", "icvar:0.1", "human:2.0", "meanvar:1.0", "trimmed:0.1")]


def tail_count(alpha, n):
    """``ceil(alpha * n)``, robust to the product landing a hair above an integer."""
    x = alpha * n
    r = round(x)
    if abs(x - r) <= 1e-9 * max(1.0, abs(x)):
        return int(r)
    return int(math.ceil(x))


# --------------------------------------------------------------------------- helpers

def _as_losses(losses):
    v = np.asarray(losses, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"losses must be a vector, got shape {v.shape}")
    if v.shape[0] == 0:
        raise ValueError("losses must be non-empty")
    if not np.all(np.isfinite(v)):
        raise ValueError("losses must be finite")
    return v


def _check_node(losses):
    if losses.value.ndim != 1:
        raise ValueError(f"losses must be a vector, got shape {losses.value.shape}")
    if losses.value.shape[0] == 0:
        raise ValueError("losses must be non-empty")


def _check_alpha(alpha, upper=1.0):
    if not (0.0 < alpha < upper):
        raise ValueError(f"alpha must lie in (0, {upper:g}), got {alpha}")


def _sorted_weighted(losses, weights_desc):
    # weights_desc[i] multiplies the i-th largest loss
    srt, _ = ad.sort_desc(losses)
    return ad.sum(srt * losses.tape.constant(weights_desc))


# --------------------------------------------------------------------------- estimators

def expected_value(losses):
    if isinstance(losses, ad.Node):
        _check_node(losses)
        return ad.mean(losses)
    v = _as_losses(losses)
    return math.fsum(v) / v.shape[0]


def var_alpha(losses, alpha):
    """The ``ceil(alpha * n)``-th smallest loss."""
    _check_alpha(alpha)
    v = _as_losses(losses.value if isinstance(losses, ad.Node) else losses)
    k = tail_count(alpha, v.shape[0])
    return float(np.sort(v)[max(k, 1) - 1])


def cvar(losses, alpha):
    """Mean of the ``ceil(alpha * n)`` largest losses."""
    _check_alpha(alpha)
    if isinstance(losses, ad.Node):
        _check_node(losses)
        n = losses.shape[0]
        k = max(tail_count(alpha, n), 1)
        w = np.zeros(n)
        w[:k] = 1.0 / k
        return _sorted_weighted(losses, w)
    v = _as_losses(losses)
    k = max(tail_count(alpha, v.shape[0]), 1)
    top = v[_kernels.argsort_desc(v)[:k]]
    return math.fsum(top) / k


def icvar(losses, alpha):
    """Mean of the ``ceil(alpha * n)`` smallest losses."""
    _check_alpha(alpha)
    if isinstance(losses, ad.Node):
        _check_node(losses)
        n = losses.shape[0]
        k = max(tail_count(alpha, n), 1)
        w = np.zeros(n)
        w[n - k:] = 1.0 / k
        return _sorted_weighted(losses, w)
    v = _as_losses(losses)
    k = max(tail_count(alpha, v.shape[0]), 1)
    return math.fsum(np.sort(v)[:k]) / k


def trimmed(losses, alpha):
    """Mean after dropping the ``ceil(alpha * n)`` largest and smallest losses."""
    _check_alpha(alpha, upper=0.5)
    n = losses.shape[0] if isinstance(losses, ad.Node) else _as_losses(losses).shape[0]
    k = tail_count(alpha, n)
    if n - 2 * k < 1:
        raise ValueError(f"trimming {k} from each end of {n} losses leaves nothing")
    if isinstance(losses, ad.Node):
        _check_node(losses)
        w = np.zeros(n)
        w[k:n - k] = 1.0 / (n - 2 * k)
        return _sorted_weighted(losses, w)
    v = np.sort(_as_losses(losses))
    return math.fsum(v[k:n - k]) / (n - 2 * k)


def mean_variance(losses, c):
    """Mean plus ``c`` times the population variance."""
    if c < 0:
        raise ValueError(f"c must be nonnegative, got {c}")
    if isinstance(losses, ad.Node):
        _check_node(losses)
        m = ad.mean(losses)
        var = ad.mean(ad.square(losses - m))
        return m + var * float(c)
    v = _as_losses(losses)
    n = v.shape[0]
    m = math.fsum(v) / n
    var = math.fsum((v - m) ** 2) / n
    return m + c * var


def human_aligned(losses, w=None):
    """``mean(l_i * w(F(l_i)))`` with ``F`` the empirical CDF (ties share the max rank)."""
    if w is None:
        w = prelec_like_weight()
    raw = losses.value if isinstance(losses, ad.Node) else losses
    v = _as_losses(raw)
    n = v.shape[0]
    ranks = _kernels.max_ranks(v)
    weights = np.asarray(w(ranks / n), dtype=np.float64)
    if isinstance(losses, ad.Node):
        return ad.sum(losses * losses.tape.constant(weights / n))
    return math.fsum(v * weights) / n


def evaluate(losses, rho):
    """Dispatch ``rho`` on ``losses``."""
    if rho.kind == "expected_value":
        return expected_value(losses)
    if rho.kind == "cvar":
        return cvar(losses, rho.alpha)
    if rho.kind == "icvar":
        return icvar(losses, rho.alpha)
    if rho.kind == "trimmed":
        return trimmed(losses, rho.alpha)
    if rho.kind == "mean_variance":
        return mean_variance(losses, rho.c)
    return human_aligned(losses, rho.w)


# --------------------------------------------------------------------------- oracle

def _exact_count(alpha, n):
    # decimal reading of alpha, so 0.1 * 10 is exactly 1
    return math.ceil(Fraction(repr(float(alpha))) * n)


def _select_extremes(values, k, largest):
    pool = list(values)
    picked = []
    for _ in range(k):
        best = 0
        for i in range(1, len(pool)):
            if (pool[i] > pool[best]) if largest else (pool[i] < pool[best]):
                best = i
        picked.append(pool.pop(best))
    return picked, pool


def _exact_mean(values):
    total = Fraction(0)
    for x in values:
        total += Fraction(x)
    return float(total) / len(values)


def brute_force_oracle(losses, functional):
    """Evaluate ``functional`` by naive selection and exact rational sums.

    Written independently of the estimator code paths for use as a test
    oracle; limited to 16 losses.
    """
    vals = [float(x) for x in np.asarray(losses, dtype=np.float64).ravel()]
    n = len(vals)
    if n == 0:
        raise ValueError("losses must be non-empty")
    if n > 16:
        raise ValueError(f"brute_force_oracle handles at most 16 losses, got {n}")
    kind = functional.kind
    if kind == "expected_value":
        return _exact_mean(vals)
    if kind in ("cvar", "icvar"):
        k = max(_exact_count(functional.alpha, n), 1)
        picked, _ = _select_extremes(vals, k, largest=(kind == "cvar"))
        return _exact_mean(picked)
    if kind == "trimmed":
        k = _exact_count(functional.alpha, n)
        _, rest = _select_extremes(vals, k, largest=True)
        _, rest = _select_extremes(rest, k, largest=False)
        if not rest:
            raise ValueError("trim leaves nothing")
        return _exact_mean(rest)
    if kind == "mean_variance":
        xs = [Fraction(x) for x in vals]
        m = sum(xs, Fraction(0)) / n
        var = sum(((x - m) ** 2 for x in xs), Fraction(0)) / n
        return float(m + Fraction(functional.c) * var)
    # human_aligned
    total = Fraction(0)
    for x in vals:
        rank = 0
        for y in vals:
            if y <= x:
                rank += 1
        weight = float(np.asarray(functional.w(np.float64(rank / n))))
        total += Fraction(x) * Fraction(weight)
    return float(total / n)


def var_alpha_oracle(losses, alpha):
    """Smallest loss ``x`` with at least ``ceil(alpha * n)`` losses at or below it."""
    vals = [float(x) for x in losses]
    k = max(_exact_count(alpha, len(vals)), 1)
    for x in sorted(set(vals)):
        if sum(1 for y in vals if y <= x) >= k:
            return x
    raise AssertionError("unreachable")
