"""Pearson correlations between windowed features and mean IC, overall and per time bin."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats as sps

from .features import FeatureWindow
from .segments import IcTrace


class UndefinedCorrelationError(ValueError):
    pass


@dataclass(frozen=True)
class CorrelationReport:
    kind: str
    r: float
    p_value: float
    n: int


@dataclass
class BinnedCorrelationCurve:
    bin_width_s: float = 4.0
    # (bin_start_s, r or None, n)
    points: list[tuple[float, float | None, int]] = field(default_factory=list)

    def defined(self) -> list[tuple[float, float, int]]:
        return [(t, r, n) for t, r, n in self.points if r is not None]

    def slope(self) -> float:
        """Least-squares slope of r against bin start over the defined bins."""
        pts = self.defined()
        if len(pts) < 2:
            raise UndefinedCorrelationError("need at least two defined bins for a slope")
        t = np.array([p[0] for p in pts])
        r = np.array([p[1] for p in pts])
        return float(np.polyfit(t, r, 1)[0])


def pearson(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    """Sample Pearson r and its two-sided p-value (t distribution, n-2 dof)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("xs and ys must be 1-D of equal length")
    n = x.size
    if n < 3:
        raise UndefinedCorrelationError(f"need at least 3 pairs, got {n}")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx <= 0 or syy <= 0:
        raise UndefinedCorrelationError("zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return r, float(min(1.0, 2.0 * sps.t.sf(abs(t), n - 2)))


def window_mean_ic(trace: IcTrace, t_start: float, t_end: float) -> float | None:
    """Mean IC over frames whose time index/rate lies in [t_start, t_end)."""
    times = trace.frame_times()
    sel = (times >= t_start - 1e-9) & (times < t_end - 1e-9)
    if not sel.any():
        return None
    return float(trace.values[sel].mean())


def window_pairs(trace: IcTrace, windows: Sequence[FeatureWindow]) -> list[tuple[float, float]]:
    pairs = []
    for w in windows:
        m = window_mean_ic(trace, w.t_start_s, w.t_end_s)
        if m is not None:
            pairs.append((w.value, m))
    return pairs


def feature_ic_correlation(trace: IcTrace, windows: Sequence[FeatureWindow]) -> CorrelationReport:
    pairs = window_pairs(trace, windows)
    if len(pairs) < 3:
        raise UndefinedCorrelationError(f"fewer than 3 usable windows ({len(pairs)})")
    kinds = {w.kind for w in windows}
    v, m = zip(*pairs)
    r, p = pearson(v, m)
    return CorrelationReport(kinds.pop() if len(kinds) == 1 else "mixed", r, p, len(pairs))


def pooled_correlation(pieces: Sequence[tuple[IcTrace, Sequence[FeatureWindow]]]) -> CorrelationReport:
    """One correlation over the (feature, mean IC) pairs of all pieces."""
    pairs, kinds = [], set()
    for trace, windows in pieces:
        pairs.extend(window_pairs(trace, windows))
        kinds.update(w.kind for w in windows)
    if len(pairs) < 3:
        raise UndefinedCorrelationError(f"fewer than 3 usable windows ({len(pairs)})")
    v, m = zip(*pairs)
    r, p = pearson(v, m)
    return CorrelationReport(kinds.pop() if len(kinds) == 1 else "mixed", r, p, len(pairs))


def binned_correlation(pieces: Sequence[tuple[IcTrace, Sequence[FeatureWindow]]],
                       bin_width_s: float = 4.0) -> BinnedCorrelationCurve:
    """Each window goes to the bin holding its start time; pairs are pooled across pieces per bin."""
    if not bin_width_s > 0:
        raise ValueError("bin_width_s must be positive")
    bins: dict[int, list[tuple[float, float]]] = {}
    for trace, windows in pieces:
        for w in windows:
            m = window_mean_ic(trace, w.t_start_s, w.t_end_s)
            if m is None:
                continue
            b = int(math.floor(w.t_start_s / bin_width_s + 1e-9))
            bins.setdefault(b, []).append((w.value, m))
    curve = BinnedCorrelationCurve(bin_width_s)
    for b in range(max(bins) + 1 if bins else 0):
        pairs = bins.get(b, [])
        r = None
        if len(pairs) >= 3:
            v, m = zip(*pairs)
            try:
                r = pearson(v, m)[0]
            except UndefinedCorrelationError:
                r = None
        curve.points.append((b * bin_width_s, r, len(pairs)))
    return curve


def write_reports_csv(reports: Sequence[CorrelationReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "r", "p", "n"])
        for rep in reports:
            w.writerow([rep.kind, repr(rep.r), repr(rep.p_value), rep.n])


def write_curve_csv(curve: BinnedCorrelationCurve, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_start_s", "r", "n"])
        for t, r, n in curve.points:
            w.writerow([repr(t), "" if r is None else repr(r), n])
