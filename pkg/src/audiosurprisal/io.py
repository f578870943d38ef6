"""Data model and file formats.

Frames, EEG and model checkpoints share one container layout: a single UTF-8
JSON header line terminated by ``\\n`` followed by a raw little-endian float32
payload in row-major order. A file may hold several such records back to back
(EEG sessions do this, one record per trial).
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from scipy.io import wavfile

_F32 = np.dtype("<f4")

HEADER_KEYS = {
    "frames": {"kind", "rows", "cols", "rate_hz", "id"},
    "eeg": {"kind", "rows", "cols", "rate_hz", "id", "stimulus_id"},
    "ic": {"kind", "rows", "cols", "rate_hz", "id"},
    "series": {"kind", "rows", "cols", "rate_hz", "id"},
    "model": {"kind", "rows", "cols", "rate_hz", "id", "config"},
}


class FormatError(ValueError):
    """Raised for any malformed or invalid input file or value."""


class StrictModeWarning(UserWarning):
    pass


def _unknown_fields(found: Iterable[str], allowed: set[str], where: str, strict: bool) -> None:
    extra = sorted(set(found) - allowed)
    if not extra:
        return
    msg = f"unknown fields in {where}: {', '.join(extra)}"
    if strict:
        raise FormatError(msg)
    warnings.warn(msg, StrictModeWarning, stacklevel=3)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FrameSequence:
    """T x D matrix of latent frames sampled at ``frame_rate_hz``."""

    id: str
    frames: np.ndarray
    frame_rate_hz: float = 11.0

    def __post_init__(self):
        arr = np.array(self.frames, dtype=np.float32, copy=True)
        if arr.ndim != 2:
            raise FormatError(f"frames must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise FormatError(f"frames must be non-empty, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise FormatError("frames contain non-finite values")
        if not (self.frame_rate_hz > 0 and math.isfinite(self.frame_rate_hz)):
            raise FormatError(f"frame_rate_hz must be positive, got {self.frame_rate_hz}")
        arr.setflags(write=False)
        object.__setattr__(self, "frames", arr)
        object.__setattr__(self, "frame_rate_hz", float(self.frame_rate_hz))

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_frames / self.frame_rate_hz


@dataclass(frozen=True)
class Segment:
    label: str
    start_frame: int
    end_frame: int
    index: int


@dataclass(frozen=True)
class SegmentLabeling:
    segments: tuple[Segment, ...] = ()

    def __post_init__(self):
        segs = tuple(self.segments)
        object.__setattr__(self, "segments", segs)
        prev_end = None
        for pos, seg in enumerate(segs, start=1):
            if seg.index != pos:
                raise FormatError(f"segment indices must be consecutive from 1, got {seg.index} at {pos}")
            if seg.start_frame < 0:
                raise FormatError(f"segment {pos} starts before frame 0")
            if seg.start_frame >= seg.end_frame:
                raise FormatError(f"empty segment {pos} ({seg.start_frame}, {seg.end_frame})")
            if prev_end is not None and seg.start_frame < prev_end:
                raise FormatError(f"segment {pos} overlaps or is out of order")
            prev_end = seg.end_frame

    @classmethod
    def from_spans(cls, spans: Iterable[tuple[str, int, int]]) -> "SegmentLabeling":
        return cls(tuple(Segment(str(lab), int(s), int(e), i)
                         for i, (lab, s, e) in enumerate(spans, start=1)))

    @property
    def labels(self) -> list[str]:
        return [s.label for s in self.segments]

    def __len__(self) -> int:
        return len(self.segments)

    def __getitem__(self, index: int) -> Segment:
        """1-based lookup, matching segment indices."""
        if not 1 <= index <= len(self.segments):
            raise IndexError(index)
        return self.segments[index - 1]

    def validate_against(self, n_frames: int) -> None:
        if self.segments and self.segments[-1].end_frame > n_frames:
            raise FormatError(
                f"segment ends at frame {self.segments[-1].end_frame} beyond sequence length {n_frames}")


@dataclass(frozen=True)
class PieceAnnotations:
    segment_labeling: SegmentLabeling = field(default_factory=SegmentLabeling)
    beats: tuple[float, ...] = ()
    measures: tuple[tuple[float, float], ...] = ()
    chord_changes: tuple[float, ...] = ()

    def __post_init__(self):
        beats = tuple(float(b) for b in self.beats)
        measures = tuple((float(a), float(b)) for a, b in self.measures)
        chords = tuple(float(c) for c in self.chord_changes)
        for seq, name in ((beats, "beats"), (chords, "chord_changes")):
            if not all(math.isfinite(v) for v in seq):
                raise FormatError(f"{name} contain non-finite values")
        if any(b2 <= b1 for b1, b2 in zip(beats, beats[1:])):
            raise FormatError("beats must be strictly increasing")
        for i, (a, b) in enumerate(measures):
            if not a < b:
                raise FormatError(f"measure {i} has non-positive length")
            if i and a < measures[i - 1][1]:
                raise FormatError(f"measure {i} overlaps its predecessor")
        if any(c < 0 for c in chords):
            raise FormatError("chord changes must be non-negative")
        object.__setattr__(self, "beats", beats)
        object.__setattr__(self, "measures", measures)
        object.__setattr__(self, "chord_changes", chords)

    def validate_duration(self, duration_s: float) -> None:
        if any(c > duration_s for c in self.chord_changes):
            raise FormatError("chord change beyond piece duration")


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        arr = np.array(self.samples, dtype=np.float64, copy=True)
        if arr.ndim != 1:
            raise FormatError("audio must be mono (1-D)")
        if self.sample_rate_hz not in (22050, 44100):
            raise FormatError(f"unsupported sample rate {self.sample_rate_hz}")
        if not np.all(np.isfinite(arr)):
            raise FormatError("audio contains non-finite samples")
        if arr.size and np.max(np.abs(arr)) > 1.0 + 1e-6:
            raise FormatError("audio samples must lie in [-1, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class EegTrial:
    trial_id: str
    stimulus_id: str
    data: np.ndarray
    fs_hz: float

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, copy=True)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise FormatError(f"EEG data must be a non-empty C x N matrix, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise FormatError("EEG data contain non-finite values")
        if not self.fs_hz > 0:
            raise FormatError("fs_hz must be positive")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "fs_hz", float(self.fs_hz))

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]


# ---------------------------------------------------------------------------
# Container records
# ---------------------------------------------------------------------------


def encode_record(header: dict[str, Any], payload: np.ndarray) -> bytes:
    payload = np.ascontiguousarray(payload, dtype=_F32)
    if payload.shape != (header["rows"], header["cols"]):
        raise FormatError("payload shape does not match header")
    line = json.dumps(header, separators=(",", ":"), ensure_ascii=False)
    return line.encode("utf-8") + b"\n" + payload.tobytes()


def decode_records(blob: bytes, strict: bool = False) -> list[tuple[dict[str, Any], np.ndarray]]:
    records = []
    pos = 0
    while pos < len(blob):
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise FormatError("malformed header: missing newline")
        try:
            header = json.loads(blob[pos:nl].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"malformed header: {exc}") from None
        if not isinstance(header, dict):
            raise FormatError("malformed header: not a JSON object")
        kind = header.get("kind")
        if kind not in HEADER_KEYS:
            raise FormatError(f"malformed header: unknown kind {kind!r}")
        rows, cols = header.get("rows"), header.get("cols")
        if not (isinstance(rows, int) and isinstance(cols, int)) or rows < 0 or cols < 0:
            raise FormatError("malformed header: rows/cols must be non-negative integers")
        rate = header.get("rate_hz")
        if not isinstance(rate, (int, float)) or isinstance(rate, bool):
            raise FormatError("malformed header: rate_hz must be a number")
        _unknown_fields(header, HEADER_KEYS[kind], f"{kind} header", strict)
        n_bytes = rows * cols * _F32.itemsize
        start = nl + 1
        chunk = blob[start:start + n_bytes]
        # a following record starts with '{'; anything else means a bad length
        nxt = start + n_bytes
        if len(chunk) != n_bytes or (nxt < len(blob) and blob[nxt:nxt + 1] != b"{"):
            raise FormatError(
                f"payload length mismatch: header declares {n_bytes} bytes")
        data = np.frombuffer(chunk, dtype=_F32).reshape(rows, cols)
        if not np.all(np.isfinite(data)):
            raise FormatError("payload contains non-finite values")
        records.append((header, data))
        pos = nxt
    if not records:
        raise FormatError("empty file")
    return records


def write_frames(seq: FrameSequence, path: str | Path) -> None:
    header = {"kind": "frames", "rows": seq.n_frames, "cols": seq.dim,
              "rate_hz": seq.frame_rate_hz, "id": seq.id}
    Path(path).write_bytes(encode_record(header, seq.frames))


def read_frames(path: str | Path, strict: bool = False) -> FrameSequence:
    records = decode_records(Path(path).read_bytes(), strict=strict)
    if len(records) != 1 or records[0][0]["kind"] != "frames":
        raise FormatError("expected exactly one frames record")
    header, data = records[0]
    return FrameSequence(str(header.get("id", "")), data, float(header["rate_hz"]))


def write_eeg(trials: Sequence[EegTrial], path: str | Path) -> None:
    blob = b"".join(
        encode_record({"kind": "eeg", "rows": t.data.shape[0], "cols": t.data.shape[1],
                       "rate_hz": t.fs_hz, "id": t.trial_id, "stimulus_id": t.stimulus_id},
                      t.data)
        for t in trials)
    Path(path).write_bytes(blob)


def read_eeg(path: str | Path, strict: bool = False) -> list[EegTrial]:
    trials = []
    for header, data in decode_records(Path(path).read_bytes(), strict=strict):
        if header["kind"] != "eeg":
            raise FormatError(f"unexpected record kind {header['kind']!r} in EEG file")
        trials.append(EegTrial(str(header.get("id", "")), str(header.get("stimulus_id", "")),
                               data, float(header["rate_hz"])))
    counts = {t.n_channels for t in trials}
    if len(counts) > 1:
        warnings.warn(f"channel count differs across trials: {sorted(counts)}", stacklevel=2)
    return trials


def write_series(values: np.ndarray, rate_hz: float, path: str | Path,
                 series_id: str = "", kind: str = "series") -> None:
    """Write a 1-D series (IC trace, envelope) as a T x 1 container."""
    values = np.asarray(values, dtype=np.float64).reshape(-1, 1)
    header = {"kind": kind, "rows": values.shape[0], "cols": 1,
              "rate_hz": float(rate_hz), "id": series_id}
    Path(path).write_bytes(encode_record(header, values))


def read_series(path: str | Path, strict: bool = False) -> tuple[str, np.ndarray, float]:
    records = decode_records(Path(path).read_bytes(), strict=strict)
    if len(records) != 1 or records[0][0]["kind"] not in ("series", "ic"):
        raise FormatError("expected exactly one series record")
    header, data = records[0]
    return str(header.get("id", "")), data[:, 0].astype(np.float64), float(header["rate_hz"])


# ---------------------------------------------------------------------------
# Annotations
# ---------------------------------------------------------------------------

_ANNOTATION_KEYS = {"segments", "beats", "measures", "chord_changes"}
_SEGMENT_KEYS = {"label", "start_frame", "end_frame"}


def parse_annotations(obj: Any, strict: bool = False) -> PieceAnnotations:
    if not isinstance(obj, dict):
        raise FormatError("annotations must be a JSON object")
    _unknown_fields(obj, _ANNOTATION_KEYS, "annotations", strict)
    spans = []
    for i, seg in enumerate(obj.get("segments", [])):
        if not isinstance(seg, dict) or not _SEGMENT_KEYS <= set(seg):
            raise FormatError(f"segment {i + 1} must have label, start_frame, end_frame")
        _unknown_fields(seg, _SEGMENT_KEYS, f"segment {i + 1}", strict)
        s, e = seg["start_frame"], seg["end_frame"]
        if not (isinstance(s, int) and isinstance(e, int)):
            raise FormatError(f"segment {i + 1} bounds must be integers")
        spans.append((seg["label"], s, e))
    try:
        measures = [tuple(m) for m in obj.get("measures", [])]
        if any(len(m) != 2 for m in measures):
            raise FormatError("measures must be (start_s, end_s) pairs")
        return PieceAnnotations(
            SegmentLabeling.from_spans(spans),
            tuple(obj.get("beats", [])),
            tuple(measures),
            tuple(obj.get("chord_changes", [])),
        )
    except TypeError as exc:
        raise FormatError(f"malformed annotations: {exc}") from None


def annotations_to_json(ann: PieceAnnotations) -> dict[str, Any]:
    return {
        "segments": [{"label": s.label, "start_frame": s.start_frame, "end_frame": s.end_frame}
                     for s in ann.segment_labeling.segments],
        "beats": list(ann.beats),
        "measures": [list(m) for m in ann.measures],
        "chord_changes": list(ann.chord_changes),
    }


def read_annotations(path: str | Path, strict: bool = False) -> PieceAnnotations:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"annotations are not valid JSON: {exc}") from None
    return parse_annotations(obj, strict=strict)


def write_annotations(ann: PieceAnnotations, path: str | Path) -> None:
    Path(path).write_text(json.dumps(annotations_to_json(ann), indent=1) + "\n", encoding="utf-8")


def frames_to_seconds(frame: float, frame_rate_hz: float) -> float:
    return frame / frame_rate_hz


def seconds_to_frame(t: float, frame_rate_hz: float) -> int:
    """Index of the frame whose span contains time ``t``."""
    return int(math.floor(t * frame_rate_hz + 1e-9))


# ---------------------------------------------------------------------------
# Audio
# ---------------------------------------------------------------------------


def read_wav(path: str | Path) -> AudioClip:
    try:
        sr, data = wavfile.read(str(path))
    except ValueError as exc:
        raise FormatError(f"unreadable WAV: {exc}") from None
    if data.ndim != 1:
        raise FormatError("WAV must be mono")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise FormatError(f"unsupported WAV sample format {data.dtype}")
    return AudioClip(samples, int(sr))


def write_wav(clip: AudioClip, path: str | Path, pcm16: bool = False) -> None:
    if pcm16:
        data = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype(np.int16)
    else:
        data = clip.samples.astype(np.float32)
    wavfile.write(str(path), clip.sample_rate_hz, data)
