"""Temporal response functions: lagged ridge regression from IC + envelope to EEG.

Designs put predictors major and lags minor: column ``p * L + l`` holds
predictor ``p`` delayed by ``lags[l]`` samples, where a positive lag means the
response follows the stimulus (row ``t`` holds ``x[t - lag]``, zero outside).

Fitting and scoring work from per-trial sufficient statistics (sums, Gram
matrices and cross-products), so cross-validation folds and permutation
baselines never refit from raw rows.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .io import EegTrial
from .segments import IcTrace
from .stats import TestResult, bh_fdr, location_test, one_sample_t

PREDICTORS = ("ic", "envelope")
_R_CLIP = 1.0 - 1e-12


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class TrfConfig:
    lag_min_ms: float = -100.0
    lag_max_ms: float = 700.0
    margin_ms: float = 50.0
    lambdas: tuple[float, ...] = tuple(10.0 ** np.arange(-2, 7))
    n_permutations: int = 100
    seed: int = 0
    fdr_q: float = 0.05
    shuffle_block_ms: float = 1000.0

    def __post_init__(self):
        if not self.lag_min_ms < self.lag_max_ms:
            raise ValueError("lag_min_ms must be below lag_max_ms")
        if self.margin_ms < 0:
            raise ValueError("margin_ms must be non-negative")
        lams = tuple(float(l) for l in self.lambdas)
        if not lams or any(not l > 0 for l in lams):
            raise ValueError("lambdas must be a non-empty list of positive values")
        if self.n_permutations < 1:
            raise ValueError("n_permutations must be at least 1")
        object.__setattr__(self, "lambdas", lams)

    def lags(self, fs_hz: float) -> np.ndarray:
        """Sample lags of the extended window [lag_min - margin, lag_max + margin]."""
        lo = int(round((self.lag_min_ms - self.margin_ms) * fs_hz / 1000.0))
        hi = int(round((self.lag_max_ms + self.margin_ms) * fs_hz / 1000.0))
        return np.arange(lo, hi + 1)

    def inner_lag_mask(self, fs_hz: float) -> np.ndarray:
        lags_ms = self.lags(fs_hz) * 1000.0 / fs_hz
        return (lags_ms >= self.lag_min_ms - 1e-9) & (lags_ms <= self.lag_max_ms + 1e-9)

    def to_json(self) -> dict:
        d = asdict(self)
        d["lambdas"] = list(self.lambdas)
        return d


@dataclass
class RegressorSet:
    """Per-stimulus IC and envelope series at the EEG rate."""

    ic: dict[str, np.ndarray]
    envelope: dict[str, np.ndarray]
    fs_hz: float

    def __post_init__(self):
        if set(self.ic) != set(self.envelope):
            raise ValueError("IC and envelope must cover the same stimuli")
        for sid in self.ic:
            a = np.asarray(self.ic[sid], dtype=np.float64)
            b = np.asarray(self.envelope[sid], dtype=np.float64)
            if a.shape != b.shape or a.ndim != 1:
                raise ValueError(f"regressors for {sid} must be 1-D of equal length")
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
                raise ValueError(f"regressors for {sid} contain non-finite values")
            self.ic[sid], self.envelope[sid] = a, b

    def stacked(self, sid: str) -> np.ndarray:
        return np.stack([self.ic[sid], self.envelope[sid]])


@dataclass
class TrfModel:
    weights: np.ndarray     # C x (P*L)
    intercept: np.ndarray   # C
    lam: float
    lags: np.ndarray
    fs_hz: float
    n_predictors: int = 2

    def predict(self, design: np.ndarray) -> np.ndarray:
        """Predicted response (N x C)."""
        return design @ self.weights.T + self.intercept

    def kernel(self, predictor: int = 0, mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """(lags in ms, C x L weights) for one predictor, optionally restricted by a lag mask."""
        L = self.lags.size
        w = self.weights[:, predictor * L:(predictor + 1) * L]
        lags_ms = self.lags * 1000.0 / self.fs_hz
        if mask is not None:
            return lags_ms[mask], w[:, mask]
        return lags_ms, w


@dataclass
class EvalResult:
    z: np.ndarray                 # per channel, averaged over held-out trials
    mean: float
    per_trial_z: np.ndarray       # trials x channels
    lambdas: list[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Regressor preparation
# ---------------------------------------------------------------------------


def interpolate_unvoiced(trace: IcTrace, voiced_mask: Sequence[bool]) -> IcTrace:
    """Hold the last voiced IC value through unvoiced spans; a leading span takes the first voiced value."""
    mask = np.asarray(voiced_mask, dtype=bool)
    if mask.shape != trace.values.shape:
        raise ValueError("mask length must equal trace length")
    if not mask.any():
        raise ValueError("trace has no voiced frames")
    idx = np.where(mask, np.arange(mask.size), -1)
    idx = np.maximum.accumulate(idx)
    idx[idx < 0] = int(np.argmax(mask))
    return IcTrace(trace.values[idx], trace.frame_rate_hz)


def resample_zoh(values: Sequence[float], rate_hz: float, fs_hz: float, n: int | None = None) -> np.ndarray:
    """Zero-order hold of a rate_hz series onto an fs_hz grid of length n."""
    v = np.asarray(values, dtype=np.float64)
    if n is None:
        n = int(math.floor(v.size * fs_hz / rate_hz))
    idx = np.floor(np.arange(n) * rate_hz / fs_hz + 1e-9).astype(int)
    return v[np.minimum(idx, v.size - 1)]


# ---------------------------------------------------------------------------
# Design and fitting
# ---------------------------------------------------------------------------


def lag_matrix(x: np.ndarray, lags: Sequence[int]) -> np.ndarray:
    """N x L matrix whose column l is x delayed by lags[l] samples, zero-padded."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    out = np.zeros((n, len(lags)))
    for j, lag in enumerate(lags):
        if lag >= 0:
            if lag < n:
                out[lag:, j] = x[:n - lag]
        elif -lag < n:
            out[:lag, j] = x[-lag:]
    return out


def design_from_predictors(predictors: np.ndarray, lags: Sequence[int]) -> np.ndarray:
    """P x N predictors to an N x (P*L) design, predictor-major."""
    predictors = np.atleast_2d(np.asarray(predictors, dtype=np.float64))
    lags = np.asarray(lags)
    span = int(lags.max() - min(lags.min(), 0)) if lags.size else 0
    if predictors.shape[1] <= span:
        raise ValueError(f"stimulus of {predictors.shape[1]} samples is shorter than the lag span")
    return np.concatenate([lag_matrix(p, lags) for p in predictors], axis=1)


def lagged_design(regressors: RegressorSet, config: TrfConfig) -> dict[str, np.ndarray]:
    lags = config.lags(regressors.fs_hz)
    return {sid: design_from_predictors(regressors.stacked(sid), lags) for sid in regressors.ic}


def eval_rows(n: int, lags: np.ndarray) -> slice:
    """Rows whose every lag column is populated (no zero padding)."""
    return slice(max(int(lags.max()), 0), n + min(int(lags.min()), 0))


@dataclass
class _Stats:
    n: float
    sx: np.ndarray
    sy: np.ndarray
    sxx: np.ndarray
    sxy: np.ndarray
    syy: np.ndarray

    @classmethod
    def of(cls, X: np.ndarray, Y: np.ndarray) -> "_Stats":
        return cls(float(X.shape[0]), X.sum(0), Y.sum(0), X.T @ X, X.T @ Y, (Y * Y).sum(0))

    def __add__(self, other: "_Stats") -> "_Stats":
        return _Stats(self.n + other.n, self.sx + other.sx, self.sy + other.sy,
                      self.sxx + other.sxx, self.sxy + other.sxy, self.syy + other.syy)


def _pool(stats: Sequence[_Stats]) -> _Stats:
    out = stats[0]
    for s in stats[1:]:
        out = out + s
    return out


class _RidgeSystem:
    """Standardized ridge normal equations of pooled statistics, diagonalized once."""

    def __init__(self, st: _Stats):
        n = st.n
        self.mx, self.my = st.sx / n, st.sy / n
        cxx = st.sxx - n * np.outer(self.mx, self.mx)
        cxy = st.sxy - n * np.outer(self.mx, self.my)
        sd = np.sqrt(np.maximum(np.diag(cxx), 0.0) / n)
        sd[sd <= 1e-12 * max(1.0, sd.max(initial=0.0))] = 1.0
        self.sd = sd
        self.A = cxx / np.outer(sd, sd)
        self.b = cxy / sd[:, None]
        self.evals, self.evecs = np.linalg.eigh(self.A)
        self.vtb = self.evecs.T @ self.b

    def standardized_weights(self, lam: float) -> np.ndarray:
        denom = self.evals + lam
        if lam == 0 and self.evals.min() <= 1e-10 * max(self.evals.max(), 1.0):
            raise SingularSystemError("singular system at lambda = 0")
        return self.evecs @ (self.vtb / denom[:, None])

    def weights(self, lam: float) -> tuple[np.ndarray, np.ndarray]:
        """(M x C raw-unit weights, C intercepts)."""
        w = self.standardized_weights(lam) / self.sd[:, None]
        return w, self.my - self.mx @ w


def _score(st: _Stats, w: np.ndarray) -> np.ndarray:
    """Per-channel Pearson r between responses and X @ w from held-out statistics."""
    n = st.n
    xw_sum = st.sx @ w
    cov = np.einsum("mc,mc->c", st.sxy, w) - st.sy * xw_sum / n
    var_pred = np.einsum("mc,mc->c", w, st.sxx @ w) - xw_sum ** 2 / n
    var_y = st.syy - st.sy ** 2 / n
    denom = np.sqrt(np.maximum(var_pred, 0.0) * np.maximum(var_y, 0.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > 0, cov / denom, 0.0)
    return np.clip(r, -1.0, 1.0)


def _z(r: np.ndarray) -> np.ndarray:
    return np.arctanh(np.clip(r, -_R_CLIP, _R_CLIP))


def ridge_fit(designs: Sequence[np.ndarray], responses: Sequence[np.ndarray], lam: float,
              lags: np.ndarray | None = None, fs_hz: float = 1.0) -> TrfModel:
    """Ridge solution with column-standardized designs and centered responses (N x C each)."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    st = _pool([_Stats.of(np.asarray(X, float), np.asarray(Y, float).reshape(len(X), -1))
                for X, Y in zip(designs, responses)])
    if lam == 0 and st.n < st.sx.size:
        raise SingularSystemError("fewer rows than columns at lambda = 0")
    w, c = _RidgeSystem(st).weights(lam)
    lags = np.arange(w.shape[0]) if lags is None else np.asarray(lags)
    return TrfModel(w.T.copy(), c, float(lam), lags, fs_hz, w.shape[0] // lags.size)


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------


def _trial_stats(pairs: Sequence[tuple[np.ndarray, EegTrial]], lags: np.ndarray):
    fit, ev = [], []
    for X, trial in pairs:
        Y = trial.data.T.astype(np.float64)
        n = min(X.shape[0], Y.shape[0])
        X, Y = X[:n], Y[:n]
        fit.append(_Stats.of(X, Y))
        rows = eval_rows(n, lags)
        ev.append(_Stats.of(X[rows], Y[rows]))
    return fit, ev


def _select_lambda(fit: Sequence[_Stats], ev: Sequence[_Stats], train_idx: Sequence[int],
                   lambdas: Sequence[float]) -> float:
    scores = np.zeros(len(lambdas))
    for j in train_idx:
        system = _RidgeSystem(_pool([fit[k] for k in train_idx if k != j]))
        for li, lam in enumerate(lambdas):
            scores[li] += _z(_score(ev[j], system.weights(lam)[0])).mean()
    return float(lambdas[int(np.argmax(scores))])


def _loo_from_stats(fit, ev, config: TrfConfig) -> EvalResult:
    n = len(fit)
    if n < 2:
        raise ValueError("leave-one-out needs at least 2 trials")
    per_trial, chosen = [], []
    for i in range(n):
        train_idx = [k for k in range(n) if k != i]
        lam = _select_lambda(fit, ev, train_idx, config.lambdas) if len(train_idx) >= 2 else config.lambdas[0]
        w, _ = _RidgeSystem(_pool([fit[k] for k in train_idx])).weights(lam)
        per_trial.append(_z(_score(ev[i], w)))
        chosen.append(lam)
    per_trial = np.array(per_trial)
    z = per_trial.mean(axis=0)
    return EvalResult(z, float(z.mean()), per_trial, chosen)


def _infer_lags(config: TrfConfig, pairs) -> np.ndarray:
    return config.lags(pairs[0][1].fs_hz)


def loo_evaluate(trials: Sequence[tuple[np.ndarray, EegTrial]], config: TrfConfig) -> EvalResult:
    """Leave-one-trial-out prediction accuracy as Fisher-z Pearson r per channel.

    The ridge strength of each outer fold is chosen by a nested leave-one-out
    over the remaining trials. Scores use only rows free of lag zero-padding.
    """
    if len(trials) < 2:
        raise ValueError("leave-one-out needs at least 2 trials")
    fit, ev = _trial_stats(trials, _infer_lags(config, trials))
    return _loo_from_stats(fit, ev, config)


def fit_all(trials: Sequence[tuple[np.ndarray, EegTrial]], config: TrfConfig,
            lam: float | None = None) -> TrfModel:
    """Fit on every trial; lambda chosen by leave-one-out unless given."""
    lags = _infer_lags(config, trials)
    fit, ev = _trial_stats(trials, lags)
    if lam is None:
        lam = _select_lambda(fit, ev, range(len(fit)), config.lambdas) if len(fit) >= 2 else config.lambdas[0]
    w, c = _RidgeSystem(_pool(fit)).weights(lam)
    return TrfModel(w.T.copy(), c, float(lam), lags, trials[0][1].fs_hz, w.shape[0] // lags.size)


def _pairs_for(regressors: RegressorSet, trials: Sequence[EegTrial], designs: Mapping[str, np.ndarray]):
    out = []
    for t in trials:
        if t.stimulus_id not in designs:
            raise ValueError(f"no regressors for stimulus {t.stimulus_id!r}")
        out.append((designs[t.stimulus_id], t))
    return out


# ---------------------------------------------------------------------------
# Permutation baselines
# ---------------------------------------------------------------------------


@dataclass
class PermutationResult:
    z_full: np.ndarray
    z_baseline_mean: np.ndarray
    gain: np.ndarray
    mean_gain: float
    per_trial_gain: np.ndarray      # trials x channels
    channel_p: np.ndarray
    channel_p_fdr: np.ndarray
    rejected_channels: list[int]
    overall: TestResult
    n_baselines: int
    full: EvalResult | None = None

    def summary(self) -> dict:
        return {
            "mean_gain": self.mean_gain,
            "mean_z_full": float(self.z_full.mean()),
            "mean_z_baseline": float(self.z_baseline_mean.mean()),
            "n_baselines": self.n_baselines,
            "n_trials": int(self.per_trial_gain.shape[0]),
            "n_channels": int(self.gain.size),
            "test": {"method": self.overall.method, "statistic": self.overall.statistic,
                     "p_value": self.overall.p_value, "effect_size": self.overall.effect_size},
            "significant_channels": self.rejected_channels,
        }


def bh_adjust(pvals: Sequence[float]) -> np.ndarray:
    """Benjamini-Hochberg adjusted p-values."""
    p = np.asarray(pvals, dtype=np.float64)
    m = p.size
    order = np.argsort(p, kind="stable")
    adj = p[order] * m / np.arange(1, m + 1)
    adj = np.minimum.accumulate(adj[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(adj, 1.0)
    return out


def shuffled_ic(regressors: RegressorSet, seed: int, baseline: int, block_ms: float = 0.0) -> RegressorSet:
    """IC permuted over time within each stimulus; envelope untouched.

    With ``block_ms`` > 0 contiguous blocks of that length are permuted
    instead of single samples.
    """
    ic = {}
    block = max(1, int(round(block_ms * regressors.fs_hz / 1000.0)))
    for s_idx, sid in enumerate(sorted(regressors.ic)):
        rng = np.random.default_rng([seed, baseline, s_idx])
        x = regressors.ic[sid]
        if block == 1:
            ic[sid] = rng.permutation(x)
        else:
            starts = np.arange(0, x.size, block)
            ic[sid] = np.concatenate([x[s:s + block] for s in rng.permutation(starts)])
    return RegressorSet(ic, dict(regressors.envelope), regressors.fs_hz)


def _channel_tests(per_trial_gain: np.ndarray) -> np.ndarray:
    p = np.ones(per_trial_gain.shape[1])
    for c in range(per_trial_gain.shape[1]):
        g = per_trial_gain[:, c]
        if g.size >= 2 and g.std() > 0:
            p[c] = one_sample_t(g, 0.0, "two-sided").p_value
    return p


def _overall_test(trial_gain: np.ndarray) -> TestResult:
    if trial_gain.size >= 2 and np.ptp(trial_gain) > 0:
        return location_test(trial_gain, "two-sided")
    # identical gains in every trial (e.g. noiseless data): only the sign is informative
    mu = float(trial_gain.mean())
    if mu == 0.0:
        return TestResult(0.0, 1.0, 0.0, "t_test", {"degenerate": True})
    return TestResult(math.copysign(math.inf, mu), 0.0, math.copysign(math.inf, mu), "t_test", {"degenerate": True})


def permutation_gain(regressors: RegressorSet, trials: Sequence[EegTrial], config: TrfConfig) -> PermutationResult:
    """Accuracy gain of the full model over the mean of IC-shuffled baselines.

    The gain is tested per channel across trials (t-test, BH-FDR corrected)
    and for the channel average across trials, with the test picked by an
    Anderson-Darling normality check.
    """
    if len(trials) < 2:
        raise ValueError("leave-one-out needs at least 2 trials")
    lags = config.lags(regressors.fs_hz)
    full_fit, full_ev = _trial_stats(_pairs_for(regressors, trials, lagged_design(regressors, config)), lags)
    full = _loo_from_stats(full_fit, full_ev, config)
    base_sum = np.zeros_like(full.per_trial_z)
    for b in range(config.n_permutations):
        shuffled = shuffled_ic(regressors, config.seed, b, config.shuffle_block_ms)
        fit, ev = _trial_stats(_pairs_for(shuffled, trials, lagged_design(shuffled, config)), lags)
        base_sum += _loo_from_stats(fit, ev, config).per_trial_z
    base = base_sum / config.n_permutations
    per_trial_gain = full.per_trial_z - base
    gain = per_trial_gain.mean(axis=0)
    channel_p = _channel_tests(per_trial_gain)
    overall = _overall_test(per_trial_gain.mean(axis=1))
    return PermutationResult(
        z_full=full.z, z_baseline_mean=base.mean(axis=0), gain=gain, mean_gain=float(gain.mean()),
        per_trial_gain=per_trial_gain, channel_p=channel_p, channel_p_fdr=bh_adjust(channel_p),
        rejected_channels=bh_fdr(channel_p, config.fdr_q), overall=overall,
        n_baselines=config.n_permutations, full=full)


def write_gain_csv(result: PermutationResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["channel", "z_full", "z_baseline_mean", "gain", "p_fdr"])
        for c in range(result.gain.size):
            w.writerow([c, repr(float(result.z_full[c])), repr(float(result.z_baseline_mean[c])),
                        repr(float(result.gain[c])), repr(float(result.channel_p_fdr[c]))])


def write_summary_json(result: PermutationResult, config: TrfConfig, path: str | Path) -> None:
    payload = {"config": config.to_json(), **result.summary()}
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")
