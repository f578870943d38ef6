"""Repetition and contrast statistics over segment-mean IC."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .io import FormatError, SegmentLabeling
from .stats import one_sample_t


@dataclass(frozen=True)
class IcTrace:
    """Per-frame information content in nats."""

    values: np.ndarray
    frame_rate_hz: float = 11.0

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if vals.size < 1:
            raise ValueError("IC trace must have at least one value")
        if not np.all(np.isfinite(vals)):
            raise ValueError("IC trace contains non-finite values")
        if not self.frame_rate_hz > 0:
            raise ValueError("frame_rate_hz must be positive")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "frame_rate_hz", float(self.frame_rate_hz))

    def __len__(self) -> int:
        return self.values.size

    def mean(self) -> float:
        return float(self.values.mean())

    def frame_times(self) -> np.ndarray:
        return np.arange(self.values.size) / self.frame_rate_hz


@dataclass
class SegmentStatReport:
    mu: float
    p_value: float
    n_pairs: int
    pair_differences: list[float] = field(default_factory=list)
    statistic: float = float("nan")

    def to_json(self) -> dict:
        p = None if math.isnan(self.p_value) else self.p_value
        return {"mu": self.mu, "p_value": p, "n_pairs": self.n_pairs}


class NoPairsError(ValueError):
    pass


def repetition_pairs(labeling: SegmentLabeling) -> list[tuple[int, int]]:
    """Consecutive occurrences of each repeated label."""
    occurrences: dict[str, list[int]] = defaultdict(list)
    for seg in labeling.segments:
        occurrences[seg.label].append(seg.index)
    pairs = [(a, b) for idx in occurrences.values() for a, b in zip(idx, idx[1:])]
    return sorted(pairs)


def _is_outro(label: str) -> bool:
    return label.strip().lower() == "outro"


def contrast_pairs(labeling: SegmentLabeling) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Consecutive first occurrences, split by whether an outro is involved."""
    seen = set()
    firsts = []
    for seg in labeling.segments:
        if seg.label not in seen:
            seen.add(seg.label)
            firsts.append(seg)
    non_outro, outro = [], []
    for a, b in zip(firsts, firsts[1:]):
        target = outro if (_is_outro(a.label) or _is_outro(b.label)) else non_outro
        target.append((a.index, b.index))
    return non_outro, outro


def segment_mean_ic(trace: IcTrace, start_frame: int, end_frame: int) -> float:
    if not 0 <= start_frame < end_frame <= len(trace):
        raise ValueError(f"invalid span [{start_frame}, {end_frame}) for trace of length {len(trace)}")
    return float(trace.values[start_frame:end_frame].mean())


def _pair_differences(pieces: Iterable[tuple[IcTrace, SegmentLabeling]], pair_fn) -> list[float]:
    diffs = []
    for trace, labeling in pieces:
        labeling.validate_against(len(trace))
        for i, j in pair_fn(labeling):
            si, sj = labeling[i], labeling[j]
            diffs.append(segment_mean_ic(trace, sj.start_frame, sj.end_frame)
                         - segment_mean_ic(trace, si.start_frame, si.end_frame))
    return diffs


def _report(diffs: Sequence[float], tail: str) -> SegmentStatReport:
    d = np.asarray(diffs, dtype=np.float64)
    mu = float(d.mean())
    if d.size >= 2 and np.ptp(d) > 1e-12 * max(1.0, float(np.abs(d).max())):
        res = one_sample_t(d, 0.0, tail)
        p, stat = res.p_value, res.statistic
    elif d.size >= 2:
        # zero spread: the sign of the mean settles the test
        if mu == 0.0:
            p, stat = 0.5, 0.0
        else:
            hit = (mu < 0) if tail == "less" else (mu > 0)
            p, stat = (0.0, math.copysign(math.inf, mu)) if hit else (1.0, math.copysign(math.inf, mu))
    else:
        p, stat = float("nan"), float("nan")
    return SegmentStatReport(mu, p, int(d.size), [float(v) for v in d], stat)


def repetition_stat(pieces: Sequence[tuple[IcTrace, SegmentLabeling]]) -> SegmentStatReport:
    """Mean IC change (later minus earlier) over repetition pairs, H1: decrease."""
    diffs = _pair_differences(pieces, repetition_pairs)
    if not diffs:
        raise NoPairsError("no repetition pairs found")
    return _report(diffs, "less")


def contrast_stat(pieces: Sequence[tuple[IcTrace, SegmentLabeling]]
                  ) -> tuple[SegmentStatReport | None, SegmentStatReport | None]:
    """(non-outro, outro) reports; a group without pairs is returned as None."""
    non = _pair_differences(pieces, lambda lab: contrast_pairs(lab)[0])
    out = _pair_differences(pieces, lambda lab: contrast_pairs(lab)[1])
    if not non and not out:
        raise NoPairsError("no contrast pairs found")
    return (_report(non, "greater") if non else None,
            _report(out, "less") if out else None)
