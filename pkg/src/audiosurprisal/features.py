"""Windowed audio and musical complexity features, plus the energy envelope for EEG.

All window emitters return :class:`FeatureWindow` lists sorted by start time.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np
from scipy import ndimage, signal

from .io import AudioClip

Kind = Literal["dissonance", "ioi_entropy", "onset_density", "loudness", "spectral_flux"]
KINDS = ("dissonance", "ioi_entropy", "onset_density", "loudness", "spectral_flux")

SILENCE_LUFS = -120.0
TIV_WEIGHTS = np.array([3.0, 8.0, 11.5, 15.0, 14.5, 7.5])
SUBDIVISIONS_PER_BEAT = 12


@dataclass(frozen=True)
class FeatureWindow:
    t_start_s: float
    t_end_s: float
    value: float
    kind: Kind
    truncated: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if not self.t_start_s < self.t_end_s:
            raise ValueError("window must have t_start_s < t_end_s")
        if not math.isfinite(self.value):
            raise ValueError("feature value must be finite")


@dataclass(frozen=True)
class EnvelopeSeries:
    values: np.ndarray
    fs_hz: float


def _samples(audio) -> tuple[np.ndarray, int]:
    if isinstance(audio, AudioClip):
        return audio.samples, audio.sample_rate_hz
    raise TypeError("expected an AudioClip")


def _window_starts(duration: float, window_s: float, hop_s: float | None) -> np.ndarray:
    hop = window_s if hop_s is None else hop_s
    if not (window_s > 0 and hop > 0):
        raise ValueError("window and hop must be positive")
    n = int(math.floor((duration - window_s) / hop + 1e-9)) + 1
    return np.arange(max(n, 0)) * hop


# ---------------------------------------------------------------------------
# Spectrogram plumbing
# ---------------------------------------------------------------------------


def stft_magnitude(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """|STFT| with centered, zero-padded Hann frames; shape (frames, n_fft//2+1).

    Frame ``i`` is centered on sample ``i * hop``.
    """
    if x.size < n_fft:
        raise ValueError(f"audio too short: {x.size} samples < n_fft={n_fft}")
    padded = np.pad(x, n_fft // 2)
    n_frames = 1 + x.size // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = padded[idx] * signal.get_window("hann", n_fft)[None, :]
    return np.abs(np.fft.rfft(frames, axis=1))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_centers(n_mels: int, sample_rate: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    fmax = sample_rate / 2 if fmax is None else fmax
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float = 0.0,
                   fmax: float | None = None) -> np.ndarray:
    """Triangular filters with unit peak, shape (n_mels, n_fft//2+1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    fb = np.zeros((n_mels, freqs.size))
    for m in range(n_mels):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (c - lo)
        down = (hi - freqs) / (hi - c)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def log_mel(audio: AudioClip, n_fft: int = 2048, hop: int = 512, n_mels: int = 64,
            fmax: float | None = None) -> np.ndarray:
    """log(1 + mel-filtered |STFT|), shape (frames, n_mels), at sample_rate/hop frames per second."""
    x, sr = _samples(audio)
    mag = stft_magnitude(x, n_fft, hop)
    return np.log1p(mag @ mel_filterbank(n_mels, n_fft, sr, fmax=fmax).T)


# ---------------------------------------------------------------------------
# Spectral flux
# ---------------------------------------------------------------------------


def window_flux(mel: np.ndarray) -> float:
    """Mean L2 norm of successive-frame differences after per-bin standardization."""
    if mel.shape[0] < 2:
        raise ValueError("window shorter than two frames")
    mu = mel.mean(axis=0)
    sd = mel.std(axis=0)
    z = np.zeros_like(mel)
    ok = sd > 1e-12
    z[:, ok] = (mel[:, ok] - mu[ok]) / sd[ok]
    return float(np.linalg.norm(np.diff(z, axis=0), axis=1).mean())


def spectral_flux_windows(audio: AudioClip, window_s: float = 1.0, hop_s: float | None = None,
                          n_fft: int = 2048, hop: int = 512, n_mels: int = 64) -> list[FeatureWindow]:
    mel = log_mel(audio, n_fft, hop, n_mels)
    times = np.arange(mel.shape[0]) * hop / audio.sample_rate_hz
    out = []
    for t0 in _window_starts(audio.duration_s, window_s, hop_s):
        sel = (times >= t0) & (times < t0 + window_s)
        out.append(FeatureWindow(float(t0), float(t0 + window_s), window_flux(mel[sel]), "spectral_flux"))
    return out


# ---------------------------------------------------------------------------
# Onsets
# ---------------------------------------------------------------------------


def superflux_odf(audio: AudioClip, frame_rate: float = 100.0, n_mels: int = 80,
                  max_bins: int = 3, lag: int = 2) -> tuple[np.ndarray, float]:
    """Onset detection function: positive flux against a frequency-max-filtered reference frame."""
    sr = audio.sample_rate_hz
    hop = int(round(sr / frame_rate))
    n_fft = 2048 if sr >= 44100 else 1024
    x = audio.samples
    if x.size < n_fft:
        x = np.pad(x, (0, n_fft - x.size))
    mag = stft_magnitude(x, n_fft, hop)
    spec = np.log1p(mag @ mel_filterbank(n_mels, n_fft, sr, fmin=30.0, fmax=min(16000.0, sr / 2)).T)
    ref = ndimage.maximum_filter1d(spec, size=max_bins, axis=1)
    diff = np.zeros_like(spec)
    diff[lag:] = spec[lag:] - ref[:-lag]
    return np.maximum(diff, 0.0).sum(axis=1), sr / hop


def detect_onsets(audio: AudioClip, delta: float = 0.1, min_gap_s: float = 0.03,
                  pre_max_s: float = 0.03, post_max_s: float = 0.03,
                  pre_avg_s: float = 0.15, post_avg_s: float = 0.07) -> list[float]:
    """Onset times in seconds, strictly increasing.

    A frame is an onset when it is the local maximum of the detection function,
    exceeds the local median by ``delta`` times the global maximum, and lies at
    least ``min_gap_s`` after the previous onset.
    """
    odf, fps = superflux_odf(audio)
    peak = float(odf.max()) if odf.size else 0.0
    if peak <= 0:
        return []
    pre_m, post_m = int(round(pre_max_s * fps)), int(round(post_max_s * fps))
    pre_a, post_a = int(round(pre_avg_s * fps)), int(round(post_avg_s * fps))
    onsets: list[float] = []
    for t in range(odf.size):
        v = odf[t]
        if v <= 0 or v < odf[max(0, t - pre_m):t + post_m + 1].max():
            continue
        if v < np.median(odf[max(0, t - pre_a):t + post_a + 1]) + delta * peak:
            continue
        time = t / fps
        if onsets and time - onsets[-1] < min_gap_s:
            continue
        onsets.append(time)
    return onsets


def onset_density_windows(onsets: Sequence[float], duration_s: float, window_s: float = 4.0,
                          hop_s: float | None = None) -> list[FeatureWindow]:
    """Onsets per second in half-open windows [t0, t0 + window_s)."""
    on = np.asarray(onsets, dtype=np.float64)
    out = []
    for t0 in _window_starts(duration_s, window_s, hop_s):
        n = int(np.count_nonzero((on >= t0) & (on < t0 + window_s)))
        out.append(FeatureWindow(float(t0), float(t0 + window_s), n / window_s, "onset_density"))
    return out


# ---------------------------------------------------------------------------
# Rhythmic complexity
# ---------------------------------------------------------------------------


def quantize_to_grid(times: Sequence[float], beats: Sequence[float],
                     subdivisions: int = SUBDIVISIONS_PER_BEAT) -> np.ndarray:
    """Nearest subdivision index, interpolating linearly between beats."""
    beats = np.asarray(beats, dtype=np.float64)
    pos = np.interp(np.asarray(times, dtype=np.float64), beats, np.arange(beats.size))
    return np.rint(pos * subdivisions).astype(int)


def normalized_ioi_entropy(grid: Sequence[int], n_possible: int) -> float:
    """Shannon entropy of the IOI histogram over log(min(#IOIs, n_possible))."""
    g = np.unique(np.asarray(grid, dtype=int))
    if g.size < 2:
        return 0.0
    iois = np.diff(g)
    _, counts = np.unique(iois, return_counts=True)
    p = counts / counts.sum()
    h = float(-(p * np.log(p)).sum())
    denom_bins = min(iois.size, n_possible)
    if denom_bins < 2:
        return 0.0
    return min(1.0, max(0.0, h / math.log(denom_bins)))


def ioi_entropy_per_measure(onsets: Sequence[float], beats: Sequence[float],
                            measures: Sequence[tuple[float, float]]) -> list[FeatureWindow]:
    beats = np.asarray(beats, dtype=np.float64)
    if beats.size < 2 or np.any(np.diff(beats) <= 0):
        raise ValueError("need at least two strictly increasing beats")
    on = np.asarray(onsets, dtype=np.float64)
    out = []
    for start, end in measures:
        if start < beats[0] - 1e-9 or end > beats[-1] + 1e-9:
            raise ValueError(f"measure ({start}, {end}) outside beat range")
        inside = on[(on >= start) & (on < end)]
        lo, hi = quantize_to_grid([start, end], beats)
        grid = quantize_to_grid(inside, beats) if inside.size else np.array([], dtype=int)
        value = normalized_ioi_entropy(grid, int(hi - lo))
        out.append(FeatureWindow(float(start), float(end), value, "ioi_entropy"))
    return out


# ---------------------------------------------------------------------------
# Loudness
# ---------------------------------------------------------------------------


def k_weighting_coefficients(fs: float) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shelving and high-pass biquads of the K-weighting curve, derived for sample rate fs."""
    # high shelf
    f0, gain_db, q = 1681.974450955533, 3.999843853973347, 0.7071752369554196
    k = math.tan(math.pi * f0 / fs)
    vh = 10.0 ** (gain_db / 20.0)
    vb = vh ** 0.4996667741545416
    a0 = 1.0 + k / q + k * k
    shelf = (np.array([(vh + vb * k / q + k * k) / a0, 2.0 * (k * k - vh) / a0, (vh - vb * k / q + k * k) / a0]),
             np.array([1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0]))
    # high pass
    f0, q = 38.13547087602444, 0.5003270373238773
    k = math.tan(math.pi * f0 / fs)
    a0 = 1.0 + k / q + k * k
    hp = (np.array([1.0, -2.0, 1.0]),
          np.array([1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0]))
    return [shelf, hp]


def k_weight(x: np.ndarray, fs: float) -> np.ndarray:
    for b, a in k_weighting_coefficients(fs):
        x = signal.lfilter(b, a, x)
    return x


def loudness_windows(audio: AudioClip, window_s: float = 1.0, hop_s: float | None = None) -> list[FeatureWindow]:
    """Ungated K-weighted loudness (LUFS) per window; digital silence gives -120."""
    x, sr = _samples(audio)
    y = k_weight(x, sr)
    n = int(round(window_s * sr))
    out = []
    for t0 in _window_starts(audio.duration_s, window_s, hop_s):
        i0 = int(round(t0 * sr))
        if not np.any(x[i0:i0 + n]):
            value = SILENCE_LUFS
        else:
            ms = float(np.mean(y[i0:i0 + n] ** 2))
            value = -0.691 + 10.0 * math.log10(ms) if ms > 0 else SILENCE_LUFS
        out.append(FeatureWindow(float(t0), float(t0 + window_s), value, "loudness"))
    return out


# ---------------------------------------------------------------------------
# Tonal dissonance
# ---------------------------------------------------------------------------


def tiv(chroma: Sequence[float]) -> np.ndarray:
    """Weighted DFT coefficients 1..6 of a chroma vector, normalized by its DC term."""
    c = np.asarray(chroma, dtype=np.float64)
    if c.shape != (12,):
        raise ValueError("chroma must have 12 entries")
    if np.any(c < 0) or not c.sum() > 0:
        raise ValueError("chroma must be non-negative with positive sum")
    spectrum = np.fft.fft(c)
    return TIV_WEIGHTS * spectrum[1:7] / spectrum[0].real


def tiv_dissonance(chroma: Sequence[float]) -> float:
    """1 - |TIV| / |w|: 0 for a single pitch class, 1 for a flat chroma."""
    t = tiv(chroma)
    value = 1.0 - float(np.sqrt(np.sum(np.abs(t) ** 2)) / np.linalg.norm(TIV_WEIGHTS))
    return min(1.0, max(0.0, value))


def chroma_from_magnitudes(mag: np.ndarray, sample_rate: int, n_fft: int,
                           fmin: float = 55.0, fmax: float = 5000.0) -> np.ndarray:
    """Sum |STFT| over frames into equal-tempered pitch classes (C = 0, A = 440 Hz)."""
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    sel = (freqs >= fmin) & (freqs <= fmax)
    pc = np.rint(69.0 + 12.0 * np.log2(freqs[sel] / 440.0)).astype(int) % 12
    chroma = np.bincount(pc, weights=mag[:, sel].sum(axis=0), minlength=12)
    total = chroma.sum()
    return chroma / total if total > 0 else chroma


def tiv_dissonance_windows(audio: AudioClip, chord_changes: Sequence[float], window_s: float = 2.0,
                           n_fft: int = 4096, hop: int = 1024) -> list[FeatureWindow]:
    """Dissonance in windows centered on chord changes.

    Windows reaching past the signal are truncated and flagged; silent
    windows carry no pitch content and are skipped.
    """
    x, sr = _samples(audio)
    dur = audio.duration_s
    out = []
    for c in sorted(chord_changes):
        if c < 0 or c > dur:
            raise ValueError(f"chord change at {c}s outside the piece")
        t0, t1 = c - window_s / 2, c + window_s / 2
        truncated = t0 < 0 or t1 > dur
        t0, t1 = max(t0, 0.0), min(t1, dur)
        seg = x[int(round(t0 * sr)):int(round(t1 * sr))]
        if seg.size < 2 or not np.any(seg):
            continue
        fft_len = min(n_fft, 1 << int(math.floor(math.log2(seg.size))))
        mag = stft_magnitude(seg, fft_len, min(hop, fft_len // 2))
        chroma = chroma_from_magnitudes(mag, sr, fft_len)
        if not chroma.sum() > 0:
            continue
        out.append(FeatureWindow(t0, t1, tiv_dissonance(chroma), "dissonance", truncated))
    return out


# ---------------------------------------------------------------------------
# Energy envelope
# ---------------------------------------------------------------------------


def energy_envelope(audio: AudioClip, target_fs_hz: float) -> EnvelopeSeries:
    """Analytic-signal magnitude, low-passed below the target Nyquist and resampled."""
    x, sr = _samples(audio)
    if not 0 < target_fs_hz <= sr:
        raise ValueError("target_fs_hz must lie in (0, sample_rate]")
    env = np.abs(signal.hilbert(x)) if x.size else x.copy()
    if target_fs_hz < sr and x.size > 30:
        sos = signal.butter(4, 0.4 * target_fs_hz, btype="low", fs=sr, output="sos")
        padlen = min(x.size - 1, 3 * 2 * sos.shape[0])
        env = signal.sosfiltfilt(sos, env, padlen=padlen)
    n_out = int(math.floor(x.size * target_fs_hz / sr))
    t_out = np.arange(n_out) / target_fs_hz
    values = np.interp(t_out, np.arange(x.size) / sr, env) if x.size else np.zeros(0)
    return EnvelopeSeries(np.maximum(values, 0.0), float(target_fs_hz))


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def write_features_csv(windows: Iterable[FeatureWindow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "t_start_s", "t_end_s", "value"])
        for fw in windows:
            w.writerow([fw.kind, repr(fw.t_start_s), repr(fw.t_end_s), repr(fw.value)])


def read_features_csv(path: str | Path) -> list[FeatureWindow]:
    with open(path, newline="") as fh:
        return [FeatureWindow(float(r["t_start_s"]), float(r["t_end_s"]), float(r["value"]), r["kind"])
                for r in csv.DictReader(fh)]
