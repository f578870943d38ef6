"""Deterministic synthetic corpora with planted repetition/contrast structure and EEG."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .io import EegTrial, FrameSequence, PieceAnnotations, SegmentLabeling

DEFAULT_GRAMMAR = (
    ("Intro", "A", "A", "B", "A", "Outro"),
    ("Intro", "A", "B", "A", "B", "Outro"),
    ("A", "A", "B", "C", "B", "Outro"),
)


@dataclass(frozen=True)
class CorpusSpec:
    n_pieces: int = 50
    labels_grammar: tuple[tuple[str, ...], ...] = DEFAULT_GRAMMAR
    segment_len_frames: int = 16
    D: int = 8
    generator_scale: float = 0.3
    repetition_jitter: float = 0.05
    contrast_entropy_step: float = 0.5
    seed: int = 0
    mean_spread: float = 1.0
    outro_scale: float = 0.5
    frame_rate_hz: float = 11.0
    tempo_bpm: float = 120.0
    beats_per_measure: int = 4

    def __post_init__(self):
        grammar = tuple(tuple(str(l) for l in seq) for seq in self.labels_grammar)
        object.__setattr__(self, "labels_grammar", grammar)
        if self.n_pieces < 1:
            raise ValueError("n_pieces must be at least 1")
        if not grammar or any(len(seq) == 0 for seq in grammar):
            raise ValueError("labels_grammar needs at least one non-empty label sequence")
        if self.repetition_jitter < 0:
            raise ValueError("repetition_jitter must be non-negative")
        if self.segment_len_frames < 1 or self.D < 1:
            raise ValueError("segment_len_frames and D must be positive")
        if not (self.generator_scale > 0 and self.outro_scale > 0 and self.frame_rate_hz > 0):
            raise ValueError("scales and frame rate must be positive")
        if self.contrast_entropy_step <= -1:
            raise ValueError("contrast_entropy_step must exceed -1")

    def to_json(self) -> dict:
        d = asdict(self)
        d["labels_grammar"] = [list(seq) for seq in self.labels_grammar]
        return d


def _is_outro(label: str) -> bool:
    return label.lower() == "outro"


def label_generators(labels: Sequence[str], spec: CorpusSpec, rng: np.random.Generator
                     ) -> dict[str, tuple[np.ndarray, float]]:
    """Per-label (mean, scale): the n-th newly introduced label has scale s*(1+step)^n.

    Outros reuse the first label's mean with the scale shrunk by ``outro_scale``.
    """
    gens: dict[str, tuple[np.ndarray, float]] = {}
    n_new = 0
    first = None
    for lab in labels:
        if lab in gens or _is_outro(lab):
            continue
        mean = rng.normal(0.0, spec.mean_spread, spec.D)
        gens[lab] = (mean, spec.generator_scale * (1.0 + spec.contrast_entropy_step) ** n_new)
        first = first or lab
        n_new += 1
    for lab in labels:
        if _is_outro(lab) and lab not in gens:
            if first is None:
                gens[lab] = (rng.normal(0.0, spec.mean_spread, spec.D), spec.generator_scale * spec.outro_scale)
            else:
                gens[lab] = (gens[first][0], gens[first][1] * spec.outro_scale)
    return gens


def gaussian_entropy(scale: float, dim: int) -> float:
    return 0.5 * dim * math.log(2 * math.pi * math.e * scale * scale)


def gen_piece(spec: CorpusSpec, index: int) -> tuple[FrameSequence, PieceAnnotations]:
    rng = np.random.default_rng([spec.seed, index])
    labels = spec.labels_grammar[index % len(spec.labels_grammar)]
    gens = label_generators(labels, spec, rng)
    L = spec.segment_len_frames
    chunks, spans = [], []
    for pos, lab in enumerate(labels):
        mean, scale = gens[lab]
        jitter = rng.uniform(-spec.repetition_jitter, spec.repetition_jitter, spec.D)
        chunks.append(mean + jitter + scale * rng.standard_normal((L, spec.D)))
        spans.append((lab, pos * L, (pos + 1) * L))
    frames = np.concatenate(chunks)
    seq = FrameSequence(f"piece_{index:03d}", frames, spec.frame_rate_hz)
    duration = seq.duration_s
    beat = 60.0 / spec.tempo_bpm
    beats = tuple(np.arange(0.0, duration, beat))
    bpm = spec.beats_per_measure
    measures = tuple((beats[i], beats[i] + bpm * beat)
                     for i in range(0, len(beats), bpm) if beats[i] + bpm * beat <= duration + 1e-9)
    chords = tuple(s / spec.frame_rate_hz for _, s, _ in spans[1:])
    ann = PieceAnnotations(SegmentLabeling.from_spans(spans), beats, measures, chords)
    return seq, ann


def gen_corpus(spec: CorpusSpec) -> list[tuple[FrameSequence, PieceAnnotations]]:
    return [gen_piece(spec, i) for i in range(spec.n_pieces)]


# ---------------------------------------------------------------------------
# EEG
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EegSimSpec:
    ic_kernel: tuple[float, ...]
    env_kernel: tuple[float, ...]
    noise_sigma: float = 0.0
    n_trials: int = 18
    n_channels: int = 16
    fs_hz: float = 64.0
    seed: int = 0
    kernel_start_lag: int = 0
    snr_db: float | None = None

    def __post_init__(self):
        ic = tuple(float(v) for v in self.ic_kernel)
        env = tuple(float(v) for v in self.env_kernel)
        if not all(math.isfinite(v) for v in ic + env):
            raise ValueError("kernels must be finite")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.n_trials < 1 or self.n_channels < 1:
            raise ValueError("n_trials and n_channels must be positive")
        object.__setattr__(self, "ic_kernel", ic)
        object.__setattr__(self, "env_kernel", env)


def lagged_convolve(x: np.ndarray, kernel: Sequence[float], start_lag: int) -> np.ndarray:
    """y[t] = sum_j kernel[j] * x[t - (start_lag + j)], zero outside the signal."""
    x = np.asarray(x, dtype=np.float64)
    y = np.zeros_like(x)
    n = x.size
    for j, k in enumerate(kernel):
        if k == 0.0:
            continue
        lag = start_lag + j
        if lag >= 0:
            if lag < n:
                y[lag:] += k * x[:n - lag]
        elif -lag < n:
            y[:lag] += k * x[-lag:]
    return y


def channel_gains(spec: EegSimSpec) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([spec.seed, 7919])
    return rng.uniform(0.5, 1.5, spec.n_channels), rng.uniform(0.5, 1.5, spec.n_channels)


def gen_eeg(ic_series: Mapping[str, np.ndarray], env_series: Mapping[str, np.ndarray],
            spec: EegSimSpec) -> list[EegTrial]:
    """Trials cycle through the stimuli in key order.

    Each channel is ``g_c * (IC * ic_kernel) + h_c * (E * env_kernel) + noise``.
    With ``snr_db`` set, the noise level is chosen per channel so that clean
    signal power over noise power equals the requested ratio.
    """
    stimuli = list(ic_series)
    if set(stimuli) != set(env_series):
        raise ValueError("IC and envelope series must cover the same stimuli")
    g, h = channel_gains(spec)
    clean = []
    for k in range(spec.n_trials):
        sid = stimuli[k % len(stimuli)]
        ic = np.asarray(ic_series[sid], dtype=np.float64)
        env = np.asarray(env_series[sid], dtype=np.float64)
        if ic.shape != env.shape:
            raise ValueError(f"IC and envelope lengths differ for stimulus {sid}")
        a = lagged_convolve(ic, spec.ic_kernel, spec.kernel_start_lag)
        b = lagged_convolve(env, spec.env_kernel, spec.kernel_start_lag)
        clean.append((sid, g[:, None] * a[None, :] + h[:, None] * b[None, :]))
    if spec.snr_db is not None:
        power = np.mean(np.concatenate([c for _, c in clean], axis=1) ** 2, axis=1)
        sigma = np.sqrt(power / 10 ** (spec.snr_db / 10.0))
    else:
        sigma = np.full(spec.n_channels, spec.noise_sigma)
    trials = []
    for k, (sid, sig) in enumerate(clean):
        rng = np.random.default_rng([spec.seed, k])
        noise = sigma[:, None] * rng.standard_normal(sig.shape)
        trials.append(EegTrial(f"trial_{k:03d}", sid, sig + noise, spec.fs_hz))
    return trials


def gen_stimuli(n_stimuli: int, duration_s: float, fs_hz: float = 64.0, ic_rate_hz: float = 11.0,
                seed: int = 0) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Synthetic regressors at the EEG rate.

    IC is a zero-order hold of random ~11 Hz values (as a frame-rate IC trace
    would be); the envelope is smoothed rectified noise.
    """
    ic, env = {}, {}
    n = int(round(duration_s * fs_hz))
    t = np.arange(n) / fs_hz
    for s in range(n_stimuli):
        rng = np.random.default_rng([seed, s, 31])
        n_frames = int(math.ceil(duration_s * ic_rate_hz)) + 1
        values = rng.gamma(2.0, 1.0, n_frames)
        ic[f"stim_{s:02d}"] = values[np.minimum((t * ic_rate_hz).astype(int), n_frames - 1)]
        raw = np.abs(rng.standard_normal(n))
        width = max(1, int(fs_hz * 0.05))
        kern = np.hanning(2 * width + 1)
        env[f"stim_{s:02d}"] = np.convolve(raw, kern / kern.sum(), mode="same")
    return ic, env


DEFAULT_ERP_PEAKS = ((150.0, 1.0, 40.0), (350.0, -0.6, 60.0))


def erp_curve(lags_ms, peaks: Sequence[tuple[float, float, float]] = DEFAULT_ERP_PEAKS) -> np.ndarray:
    """Sum of Gaussian bumps (latency_ms, amplitude, width_ms) evaluated at lags_ms."""
    lags_ms = np.asarray(lags_ms, dtype=np.float64)
    k = np.zeros(lags_ms.shape)
    for lat, amp, width in peaks:
        k += amp * np.exp(-0.5 * ((lags_ms - lat) / width) ** 2)
    return k


def erp_kernel(fs_hz: float, lag_min_ms: float = -100.0, lag_max_ms: float = 700.0,
               peaks: Sequence[tuple[float, float, float]] = DEFAULT_ERP_PEAKS) -> tuple[np.ndarray, int]:
    """Sampled ERP-like kernel; returns (kernel, start_lag in samples)."""
    start = int(round(lag_min_ms * fs_hz / 1000.0))
    stop = int(round(lag_max_ms * fs_hz / 1000.0))
    return erp_curve(np.arange(start, stop + 1) * 1000.0 / fs_hz, peaks), start
