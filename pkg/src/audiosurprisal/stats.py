"""Statistical primitives: t-tests, Wilcoxon signed-rank, Fisher z, BH-FDR, Anderson-Darling."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy import special
from scipy import stats as sps

Tail = Literal["two-sided", "less", "greater"]
_TAILS = ("two-sided", "less", "greater")


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    effect_size: float
    method: Literal["t_test", "wilcoxon"]
    extra: dict = field(default_factory=dict)

    __test__ = False  # keep pytest from collecting this class


def _check_tail(tail: str) -> None:
    if tail not in _TAILS:
        raise ValueError(f"tail must be one of {_TAILS}, got {tail!r}")


def _clip_p(p: float) -> float:
    return float(min(1.0, max(0.0, p)))


def one_sample_t(xs: Sequence[float], mu0: float = 0.0, tail: Tail = "two-sided") -> TestResult:
    """Student t-test of mean(xs) against mu0; effect size is Cohen's d."""
    _check_tail(tail)
    x = np.asarray(xs, dtype=np.float64)
    n = x.size
    if n < 2:
        raise ValueError("one_sample_t needs at least two values")
    s = x.std(ddof=1)
    if not s > 0:
        raise ValueError("zero sample variance")
    diff = x.mean() - mu0
    t = diff / (s / math.sqrt(n))
    dist = sps.t(df=n - 1)
    if tail == "two-sided":
        p = 2.0 * dist.sf(abs(t))
    elif tail == "greater":
        p = dist.sf(t)
    else:
        p = dist.cdf(t)
    return TestResult(float(t), _clip_p(p), float(diff / s), "t_test", {"n": n})


def signed_rank_sums(xs: Sequence[float], mu0: float = 0.0) -> tuple[float, float, np.ndarray, np.ndarray]:
    """(W+, W-, ranks, nonzero differences) with tie-averaged ranks of |x - mu0|."""
    d = np.asarray(xs, dtype=np.float64) - mu0
    d = d[d != 0]
    ranks = sps.rankdata(np.abs(d))
    return float(ranks[d > 0].sum()), float(ranks[d < 0].sum()), ranks, d


def wilcoxon_signed_rank(xs: Sequence[float], mu0: float = 0.0, tail: Tail = "two-sided") -> TestResult:
    """Signed-rank test, normal approximation with tie and continuity corrections.

    The effect size is the Z score.
    """
    _check_tail(tail)
    w_plus, w_minus, ranks, d = signed_rank_sums(xs, mu0)
    n = d.size
    if n == 0:
        raise ValueError("all differences are zero")
    if n < 5:
        raise ValueError("wilcoxon_signed_rank needs at least 5 non-zero differences")
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(counts ** 3 - counts) / 48.0
    sd = math.sqrt(var)
    dev = w_plus - mean
    if tail == "two-sided":
        z = math.copysign(max(abs(dev) - 0.5, 0.0), dev) / sd
        p = 2.0 * sps.norm.sf(abs(z))
    elif tail == "greater":
        z = (dev - 0.5) / sd
        p = sps.norm.sf(z)
    else:
        z = (dev + 0.5) / sd
        p = sps.norm.cdf(z)
    return TestResult(w_plus, _clip_p(p), float(z), "wilcoxon",
                      {"w_plus": w_plus, "w_minus": w_minus, "n": n})


def fisher_z(r: float) -> float:
    if not abs(r) < 1:
        raise ValueError(f"Fisher z undefined for |r| >= 1 (r={r})")
    return math.atanh(r)


def bh_fdr(pvals: Sequence[float], q: float = 0.05) -> list[int]:
    """Indices rejected by the Benjamini-Hochberg step-up procedure, ascending."""
    p = np.asarray(pvals, dtype=np.float64)
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    if m == 0:
        return []
    order = np.argsort(p, kind="stable")
    below = p[order] <= q * np.arange(1, m + 1) / m
    if not below.any():
        return []
    k = int(np.nonzero(below)[0].max())
    threshold = p[order][k]
    return [int(i) for i in np.nonzero(p <= threshold)[0]]


@dataclass(frozen=True)
class NormalityResult:
    a2: float
    p_approx: float
    is_normal: bool

    def __iter__(self):
        return iter((self.a2, self.p_approx, self.is_normal))


# critical value for the corrected statistic at alpha = 0.05, mean and variance estimated
_AD_CRIT_05 = 0.752


def anderson_darling_normality(xs: Sequence[float]) -> NormalityResult:
    """A^2 against a normal with estimated parameters, small-sample corrected."""
    x = np.sort(np.asarray(xs, dtype=np.float64))
    n = x.size
    if n < 8:
        raise ValueError("Anderson-Darling needs at least 8 values")
    s = x.std(ddof=1)
    if not s > 0:
        raise ValueError("degenerate sample (zero variance)")
    z = (x - x.mean()) / s
    i = np.arange(1, n + 1)
    a2 = -n - np.mean((2 * i - 1) * (special.log_ndtr(z) + special.log_ndtr(-z[::-1])))
    a = a2 * (1.0 + 0.75 / n + 2.25 / n ** 2)
    if a >= 0.6:
        p = math.exp(1.2937 - 5.709 * a + 0.0186 * a * a)
    elif a >= 0.34:
        p = math.exp(0.9177 - 4.279 * a - 1.38 * a * a)
    elif a >= 0.2:
        p = 1.0 - math.exp(-8.318 + 42.796 * a - 59.938 * a * a)
    else:
        p = 1.0 - math.exp(-13.436 + 101.14 * a - 223.73 * a * a)
    return NormalityResult(float(a), _clip_p(p), bool(a < _AD_CRIT_05))


def location_test(xs: Sequence[float], tail: Tail = "two-sided") -> TestResult:
    """Test mean/median of xs against zero, choosing the test by normality.

    Normal samples (Anderson-Darling at 5%) get a t-test with Cohen's d,
    others a Wilcoxon signed-rank test with its Z score. Samples too small for
    the normality check use the t-test.
    """
    x = np.asarray(xs, dtype=np.float64)
    if x.size >= 8 and x.std() > 0 and not anderson_darling_normality(x).is_normal:
        return wilcoxon_signed_rank(x, 0.0, tail)
    return one_sample_t(x, 0.0, tail)
