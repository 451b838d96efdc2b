"""One-sided paired tests and simple linear regression for comparing variants across subjects.

``alternative="greater"`` tests whether ``x`` tends to exceed ``y``;
``"less"`` the opposite.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .errors import ContractError, UndefinedStatisticError

EXACT_WILCOXON_MAX_N = 20


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p: float
    n: int
    name: str
    symbol: str

    def caption(self) -> str:
        return f"{self.name}: {self.symbol}={self.statistic:.4g}, p={self.p:.4g} (n={self.n})"


@dataclass(frozen=True)
class RegressionResult:
    slope: float
    intercept: float
    se: float
    t: float
    p: float
    r2: float
    adj_r2: float
    n: int

    def caption(self) -> str:
        return (f"linear regression: slope={self.slope:.4g}, SE={self.se:.4g}, t={self.t:.4g}, "
                f"p={self.p:.4g}, R2={self.r2:.4g}, adj R2={self.adj_r2:.4g} (n={self.n})")


def _paired(x, y) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise ContractError("paired samples must have equal length")
    return x - y


def _check_alternative(alternative: str) -> int:
    if alternative not in ("greater", "less"):
        raise ContractError("alternative must be 'greater' or 'less'")
    return 1 if alternative == "greater" else -1


def paired_t_one_sided(x, y, alternative: str = "greater") -> TestResult:
    """Paired t statistic on ``x - y`` with a one-tailed Student-t p-value (n - 1 dof).

    Identical samples give t = 0 and p = 0.5.  Differences that are all equal
    but nonzero have no spread and raise UndefinedStatisticError.
    """
    sign = _check_alternative(alternative)
    d = _paired(x, y)
    n = d.size
    if n < 2:
        raise ContractError("paired t-test needs at least 2 pairs")
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        if mean == 0:
            return TestResult(0.0, 0.5, n, "paired t-test", "t")
        raise UndefinedStatisticError("paired differences have zero variance; t is undefined")
    t = mean / (sd / np.sqrt(n))
    p = float(sps.t.sf(sign * t, n - 1))
    return TestResult(float(t), p, n, "paired t-test", "t")


def _signed_ranks(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = d[d != 0]
    if d.size == 0:
        raise UndefinedStatisticError("all paired differences are zero")
    ranks = sps.rankdata(np.abs(d))  # average ranks for ties
    return d, ranks


def _exact_upper_tail(ranks: np.ndarray, w: float) -> float:
    """P(W >= w) under the null, by dynamic programming over doubled (integer) ranks."""
    r2 = np.rint(2 * ranks).astype(int)
    total = int(r2.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in r2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r]
        counts += shifted
    counts /= 2.0 ** len(r2)
    k = int(np.ceil(2 * w - 1e-9))
    return float(counts[k:].sum())


def wilcoxon_signed_rank_one_sided(x, y, alternative: str = "greater") -> TestResult:
    """Signed-rank test on ``x - y``; W is the sum of ranks of positive differences.

    Zero differences are dropped and tied magnitudes get average ranks.  The
    p-value is exact for up to 20 nonzero differences and otherwise uses the
    normal approximation with tie correction (no continuity correction).
    """
    sign = _check_alternative(alternative)
    d, ranks = _signed_ranks(_paired(x, y))
    n = d.size
    w = float(ranks[d > 0].sum())
    total = float(ranks.sum())
    if n <= EXACT_WILCOXON_MAX_N:
        # W and total - W have the same null distribution
        p = _exact_upper_tail(ranks, w if sign > 0 else total - w)
    else:
        _, tie_counts = np.unique(ranks, return_counts=True)
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts ** 3 - tie_counts).sum() / 48.0
        z = (w - mean) / np.sqrt(var)
        p = float(sps.norm.sf(sign * z))
    return TestResult(w, min(max(p, 0.0), 1.0), n, "Wilcoxon signed-rank test", "W")


def sign_test_one_sided(x, y, alternative: str = "greater") -> TestResult:
    """Exact binomial test on the count of positive differences (ties dropped)."""
    sign = _check_alternative(alternative)
    d = _paired(x, y)
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise UndefinedStatisticError("no nonzero paired differences for the sign test")
    k = int((d > 0).sum())
    p = sps.binom.sf(k - 1, n, 0.5) if sign > 0 else sps.binom.cdf(k, n, 0.5)
    return TestResult(float(k), float(p), n, "sign test", "S")


def linreg_slope_test(x, y) -> RegressionResult:
    """Ordinary least squares ``y = b0 + b1 x`` with a two-sided t test of ``b1 = 0``."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    n = x.size
    if y.size != n or n < 3:
        raise ContractError("regression needs x and y of equal length >= 3")
    xm, ym = x.mean(), y.mean()
    sxx = float(((x - xm) ** 2).sum())
    if sxx == 0:
        raise UndefinedStatisticError("x has no spread; the slope is undefined")
    sxy = float(((x - xm) * (y - ym)).sum())
    syy = float(((y - ym) ** 2).sum())
    slope = sxy / sxx
    intercept = float(ym - slope * xm)
    sse = float(((y - intercept - slope * x) ** 2).sum())
    dof = n - 2
    se = np.sqrt(sse / dof / sxx)
    if se > 0:
        t = slope / se
        p = float(2 * sps.t.sf(abs(t), dof))
    elif slope == 0:
        t, p = 0.0, 1.0
    else:
        t, p = float(np.copysign(np.inf, slope)), 0.0
    r2 = 1.0 - sse / syy if syy > 0 else 0.0
    adj = 1.0 - (1.0 - r2) * (n - 1) / dof
    return RegressionResult(slope, intercept, float(se), float(t), p, r2, adj, n)
