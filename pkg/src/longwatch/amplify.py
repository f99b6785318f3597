"""Expected recall and precision of a k-of-n confirmation rule.

A cell is confirmed when at least ``threshold`` of its last ``window``
observations are positive.  Treating observations as independent draws from
a detector with per-image recall ``r`` and precision ``p``:

    recall(TH)    = P[Bin(n, r)     >= TH]
    precision(TH) = 1 - P[Bin(n, 1-p) >= TH]
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError

MAX_WINDOW = 64

# per-image detector performance at the 0.85 confidence cut
DEFAULT_RECALL = 0.5676
DEFAULT_PRECISION = 0.9329


@dataclass(frozen=True)
class BaseMetrics:
    recall: float = DEFAULT_RECALL
    precision: float = DEFAULT_PRECISION

    def __post_init__(self):
        for name in ("recall", "precision"):
            v = getattr(self, name)
            if not (math.isfinite(v) and 0.0 < v <= 1.0):
                raise ConfigError(f"base {name} must lie in (0, 1], got {v}")


@dataclass(frozen=True)
class AmplifiedMetrics:
    threshold: int
    window: int
    recall: float
    precision: float

    @property
    def f1(self) -> float:
        s = self.recall + self.precision
        return 0.0 if s == 0 else 2.0 * self.recall * self.precision / s


def _check(window: int, threshold: int):
    if not 1 <= window <= MAX_WINDOW:
        raise ConfigError(f"window must lie in [1, {MAX_WINDOW}], got {window}")
    if not 1 <= threshold <= window:
        raise ConfigError(f"threshold must lie in [1, window={window}], got {threshold}")


def binomial_pmf(n: int, k: int, x: float) -> float:
    """P[Bin(n, x) = k]; exact integer coefficient up to ``MAX_WINDOW``, log-gamma beyond."""
    if x == 0.0:
        return 1.0 if k == 0 else 0.0
    if x == 1.0:
        return 1.0 if k == n else 0.0
    if n <= MAX_WINDOW:
        return math.comb(n, k) * x**k * (1.0 - x) ** (n - k)
    log_c = math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)
    return math.exp(log_c + k * math.log(x) + (n - k) * math.log1p(-x))


def binomial_upper_tail(n: int, k: int, x: float) -> float:
    """P[Bin(n, x) >= k], summed with compensated addition."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"success rate must lie in [0, 1], got {x}")
    if k <= 0:
        return 1.0
    if k > n:
        return 0.0
    # sum whichever side is smaller so the result keeps full relative precision
    mean = n * x
    if k > mean:
        tail = math.fsum(binomial_pmf(n, j, x) for j in range(k, n + 1))
    else:
        tail = 1.0 - math.fsum(binomial_pmf(n, j, x) for j in range(0, k))
    return min(1.0, max(0.0, tail))


def amplified_recall(base: BaseMetrics, window: int, threshold: int) -> float:
    _check(window, threshold)
    return binomial_upper_tail(window, threshold, base.recall)


def amplified_precision(base: BaseMetrics, window: int, threshold: int) -> float:
    _check(window, threshold)
    return 1.0 - binomial_upper_tail(window, threshold, 1.0 - base.precision)


def amplify(base: BaseMetrics, window: int, threshold: int) -> AmplifiedMetrics:
    return AmplifiedMetrics(
        threshold, window, amplified_recall(base, window, threshold), amplified_precision(base, window, threshold)
    )


def pr_curve(base: BaseMetrics, window: int) -> list[AmplifiedMetrics]:
    if window < 1:
        raise ConfigError(f"window must be at least 1, got {window}")
    return [amplify(base, window, th) for th in range(1, window + 1)]


def select_threshold(base: BaseMetrics, window: int) -> AmplifiedMetrics:
    """Threshold with the best harmonic mean of amplified recall and precision.

    Equal scores resolve toward the stricter (larger) threshold.
    """
    best = None
    for m in pr_curve(base, window):
        if best is None or m.f1 >= best.f1:
            best = m
    return best
