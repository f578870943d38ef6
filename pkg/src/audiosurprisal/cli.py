"""Command-line pipeline: synth -> train -> ic -> analyze, plus trf on EEG.

Every command reads one JSON config (sections ``corpus``, ``model``,
``schedule``, ``trf``, ``eeg``, ``features``, ``analysis``), applies flag
overrides, and writes the resolved config into its output directory.

Exit codes: 0 success, 1 analysis-level failure, 2 usage or IO error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import Any

import numpy as np
import torch

from . import __version__, correlation, features, io, model, segments, synth, trf

log = logging.getLogger("audiosurprisal")

SECTIONS = ("corpus", "model", "schedule", "trf", "eeg", "features", "analysis")

EEG_DEFAULTS = {
    "enabled": False,
    "planted_ic": True,
    "n_stimuli": 18,
    "duration_s": 60.0,
    "fs_hz": 64.0,
    "n_trials": 18,
    "n_channels": 16,
    "snr_db": 0.0,
    "seed": 0,
}
FEATURE_DEFAULTS = {
    "flux_window_s": 1.0,
    "loudness_window_s": 1.0,
    "onset_window_s": 4.0,
    "dissonance_window_s": 2.0,
}
ANALYSIS_DEFAULTS = {"bin_width_s": 4.0}
ENV_PEAKS = ((60.0, 1.0, 20.0), (180.0, 0.5, 40.0))


class UsageError(Exception):
    """Bad config, flags or input paths (exit 2)."""


class AnalysisError(Exception):
    """Nothing computable from otherwise valid inputs (exit 1)."""


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------


def _merge_section(name: str, base: dict, override: dict, strict: bool) -> dict:
    unknown = sorted(set(override) - set(base))
    if unknown:
        msg = f"unknown keys in config section {name!r}: {unknown}"
        if strict:
            raise UsageError(msg)
        warnings.warn(msg, io.StrictModeWarning, stacklevel=2)
    return {**base, **{k: v for k, v in override.items() if k in base}}


def _dc_dict(obj) -> dict:
    d = dataclasses.asdict(obj)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def resolve_config(args: argparse.Namespace) -> dict[str, Any]:
    raw: dict[str, Any] = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError("config must be a JSON object")
    unknown = sorted(set(raw) - set(SECTIONS) - {"seed", "preset"})
    if unknown:
        msg = f"unknown top-level config keys: {unknown}"
        if args.strict:
            raise UsageError(msg)
        warnings.warn(msg, io.StrictModeWarning, stacklevel=2)

    preset = args.preset or raw.get("preset", "desk")
    if preset not in model.PRESETS:
        raise UsageError(f"unknown preset {preset!r}")
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))

    bases = {
        "corpus": synth.CorpusSpec().to_json(),
        "model": _dc_dict(model.PRESETS[preset]),
        "schedule": _dc_dict(model.SCHEDULE_PRESETS[preset]),
        "trf": trf.TrfConfig().to_json(),
        "eeg": dict(EEG_DEFAULTS),
        "features": dict(FEATURE_DEFAULTS),
        "analysis": dict(ANALYSIS_DEFAULTS),
    }
    cfg: dict[str, Any] = {"version": __version__, "preset": preset, "seed": seed}
    for name in SECTIONS:
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise UsageError(f"config section {name!r} must be an object")
        merged = _merge_section(name, bases[name], section, args.strict)
        if "seed" in merged and (args.seed is not None or "seed" not in section):
            merged["seed"] = seed
        cfg[name] = merged
    if getattr(args, "n_permutations", None) is not None:
        cfg["trf"]["n_permutations"] = args.n_permutations
    if getattr(args, "n_pieces", None) is not None:
        cfg["corpus"]["n_pieces"] = args.n_pieces
    if getattr(args, "epochs", None) is not None:
        cfg["schedule"]["total_epochs"] = args.epochs
    return cfg


def _build(factory, section: dict, what: str):
    try:
        return factory(**section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {what} config: {exc}") from None


def corpus_spec(cfg) -> synth.CorpusSpec:
    d = dict(cfg["corpus"])
    d["labels_grammar"] = tuple(tuple(seq) for seq in d["labels_grammar"])
    return _build(synth.CorpusSpec, d, "corpus")


def trf_config(cfg) -> trf.TrfConfig:
    d = dict(cfg["trf"])
    d["lambdas"] = tuple(d["lambdas"])
    return _build(trf.TrfConfig, d, "trf")


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _prepare_out(args, cfg) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        _dump_json(cfg, out / "config.json")
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc}") from None
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _require_dir(path: str | None, flag: str) -> Path:
    if not path:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{flag}: no such directory: {p}")
    return p


def _load_corpus(root: Path, strict: bool) -> list[io.FrameSequence]:
    files = sorted((root / "frames").glob("*.frames"))
    if not files:
        raise UsageError(f"no frame files under {root / 'frames'}")
    return [io.read_frames(f, strict=strict) for f in files]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg) -> int:
    spec = corpus_spec(cfg)
    out = _prepare_out(args, cfg)
    (out / "frames").mkdir(exist_ok=True)
    (out / "annotations").mkdir(exist_ok=True)
    written = []
    for seq, ann in synth.gen_corpus(spec):
        f = out / "frames" / f"{seq.id}.frames"
        a = out / "annotations" / f"{seq.id}.json"
        io.write_frames(seq, f)
        io.write_annotations(ann, a)
        written += [f, a]

    eeg = cfg["eeg"]
    if eeg["enabled"]:
        written += _synth_eeg(out, eeg)

    manifest = {"files": {p.relative_to(out).as_posix(): _sha256(p) for p in written},
                "n_pieces": spec.n_pieces}
    _dump_json(manifest, out / "manifest.json")
    log.info("wrote %d files to %s", len(written), out)
    return 0


def _synth_eeg(out: Path, eeg: dict) -> list[Path]:
    fs = float(eeg["fs_hz"])
    ic, env = synth.gen_stimuli(int(eeg["n_stimuli"]), float(eeg["duration_s"]), fs, seed=int(eeg["seed"]))
    k_ic, start = synth.erp_kernel(fs)
    k_env, _ = synth.erp_kernel(fs, peaks=ENV_PEAKS)
    if not eeg["planted_ic"]:
        k_ic = np.zeros_like(k_ic)
    sim = _build(synth.EegSimSpec, dict(ic_kernel=tuple(k_ic), env_kernel=tuple(k_env),
                                        n_trials=int(eeg["n_trials"]), n_channels=int(eeg["n_channels"]),
                                        fs_hz=fs, kernel_start_lag=start, snr_db=eeg["snr_db"],
                                        seed=int(eeg["seed"])), "eeg")
    trials = synth.gen_eeg(ic, env, sim)
    stim = out / "stimuli"
    stim.mkdir(exist_ok=True)
    paths = []
    for sid in sorted(ic):
        p_ic, p_env = stim / f"{sid}.ic.series", stim / f"{sid}.env.series"
        io.write_series(ic[sid], fs, p_ic, sid, kind="ic")
        io.write_series(env[sid], fs, p_env, sid)
        paths += [p_ic, p_env]
    io.write_eeg(trials, out / "eeg.bin")
    kernels = {"start_lag": start, "fs_hz": fs, "ic": list(k_ic), "envelope": list(k_env)}
    _dump_json(kernels, out / "kernels.json")
    return paths + [out / "eeg.bin", out / "kernels.json"]


def cmd_train(args, cfg) -> int:
    corpus_dir = _require_dir(args.corpus, "--corpus")
    seqs = _load_corpus(corpus_dir, args.strict)
    eval_seqs = _load_corpus(_require_dir(args.eval_corpus, "--eval-corpus"), args.strict) \
        if args.eval_corpus else None
    dims = {s.dim for s in seqs + (eval_seqs or [])}
    if len(dims) != 1:
        raise UsageError(f"frame dimensions differ across the corpus: {sorted(dims)}")
    mcfg = dict(cfg["model"])
    if mcfg["D_in"] != dims.pop():
        log.info("setting D_in to the corpus frame dimension %d", seqs[0].dim)
        mcfg["D_in"] = seqs[0].dim
        cfg["model"] = mcfg
    config = _build(model.ModelConfig, mcfg, "model")
    schedule = _build(model.TrainSchedule, dict(cfg["schedule"]), "schedule")
    if args.resume and not Path(args.resume).is_file():
        raise UsageError(f"--resume: no such checkpoint: {args.resume}")
    out = _prepare_out(args, cfg)

    torch.use_deterministic_algorithms(True)
    net = model.init_model(config, schedule.seed)
    result = model.train(net, seqs, schedule, checkpoint_in=args.resume, eval_corpus=eval_seqs,
                         log_every=10)
    # the checkpoint stores float32; report losses for exactly what is saved
    model.set_flat_parameters(net, model.get_flat_parameters(net).astype(np.float32))
    model.save_checkpoint(net, out / "model.ckpt", model_id=corpus_dir.name)
    model.write_loss_curve(result.loss_curve, out / "loss_curve.csv")
    report = {
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.loss_curve),
        "stopped_early": result.stopped_early,
        "train_loss": model.nll_loss(net, seqs),
        "eval_loss": model.nll_loss(net, eval_seqs or seqs),
        "n_parameters": net.n_parameters(),
    }
    _dump_json(report, out / "train_report.json")
    return 0


def _load_mask(path: str) -> dict[str, list[bool]]:
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read unvoiced mask: {exc}") from None
    if not isinstance(obj, dict):
        raise UsageError("mask file must map piece ids to lists of voiced flags")
    return {k: [bool(v) for v in vals] for k, vals in obj.items()}


def cmd_ic(args, cfg) -> int:
    if not args.checkpoint or not Path(args.checkpoint).is_file():
        raise UsageError(f"--checkpoint: no such file: {args.checkpoint}")
    seqs = _load_corpus(_require_dir(args.corpus, "--corpus"), args.strict)
    masks = _load_mask(args.interpolate_unvoiced) if args.interpolate_unvoiced else {}
    net = model.load_checkpoint(args.checkpoint)
    out = _prepare_out(args, cfg)
    (out / "ic").mkdir(exist_ok=True)
    torch.use_deterministic_algorithms(True)
    rows = []
    for seq in seqs:
        trace = model.ic_trace(net, seq)
        if seq.id in masks:
            try:
                trace = trf.interpolate_unvoiced(trace, masks[seq.id])
            except ValueError as exc:
                raise UsageError(f"mask for {seq.id}: {exc}") from None
        io.write_series(trace.values, trace.frame_rate_hz, out / "ic" / f"{seq.id}.series", seq.id, kind="ic")
        rows.append([seq.id, seq.n_frames, repr(trace.mean()), int(seq.id in masks)])
    with open(out / "ic_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["piece", "n_frames", "mean_ic", "interpolated"])
        w.writerows(rows)
    return 0


def _load_traces(ic_dir: Path, strict: bool) -> dict[str, segments.IcTrace]:
    traces = {}
    for f in sorted(ic_dir.glob("*.series")):
        sid, values, rate = io.read_series(f, strict=strict)
        traces[sid or f.stem] = segments.IcTrace(values, rate)
    if not traces:
        raise UsageError(f"no IC series under {ic_dir}")
    return traces


def _piece_features(pid: str, ann: io.PieceAnnotations, args, fcfg: dict) -> list[features.FeatureWindow]:
    if args.features:
        path = Path(args.features) / f"{pid}.csv"
        return features.read_features_csv(path) if path.is_file() else []
    if not args.audio:
        return []
    path = Path(args.audio) / f"{pid}.wav"
    if not path.is_file():
        return []
    clip = io.read_wav(path)
    onsets = features.detect_onsets(clip)
    windows = features.spectral_flux_windows(clip, fcfg["flux_window_s"])
    windows += features.loudness_windows(clip, fcfg["loudness_window_s"])
    windows += features.onset_density_windows(onsets, clip.duration_s, fcfg["onset_window_s"])
    if len(ann.beats) >= 2 and ann.measures:
        windows += features.ioi_entropy_per_measure(onsets, ann.beats, ann.measures)
    windows += features.tiv_dissonance_windows(clip, ann.chord_changes, fcfg["dissonance_window_s"])
    return windows


def cmd_analyze(args, cfg) -> int:
    corpus_dir = _require_dir(args.corpus, "--corpus")
    traces = _load_traces(_require_dir(args.ic, "--ic"), args.strict)
    if args.features:
        _require_dir(args.features, "--features")
    if args.audio:
        _require_dir(args.audio, "--audio")
    pieces = []
    anns = {}
    for pid in sorted(traces):
        path = corpus_dir / "annotations" / f"{pid}.json"
        if not path.is_file():
            raise UsageError(f"missing annotations for {pid}: {path}")
        anns[pid] = io.read_annotations(path, strict=args.strict)
        pieces.append((traces[pid], anns[pid].segment_labeling))
    out = _prepare_out(args, cfg)

    stats: dict[str, Any] = {"n_pieces": len(pieces)}
    diff_rows = []
    try:
        rep = segments.repetition_stat(pieces)
    except segments.NoPairsError:
        rep = None
    try:
        non, outro = segments.contrast_stat(pieces)
    except segments.NoPairsError:
        non = outro = None
    for name, report in (("repetition", rep), ("contrast_non_outro", non), ("contrast_outro", outro)):
        if report is None:
            stats[name] = {"absent": True}
            continue
        stats[name] = {"absent": False, **report.to_json()}
        diff_rows += [[name, i, repr(d)] for i, d in enumerate(report.pair_differences)]
    _dump_json(stats, out / "segment_stats.json")
    with open(out / "pair_differences.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "index", "difference"])
        w.writerows(diff_rows)

    computed = any(not stats[k]["absent"] for k in ("repetition", "contrast_non_outro", "contrast_outro"))
    if args.features or args.audio:
        computed = _analyze_features(args, cfg, traces, anns, out) or computed
    if not computed:
        raise AnalysisError("no segment pairs and no feature correlations could be computed")
    return 0


def _analyze_features(args, cfg, traces, anns, out: Path) -> bool:
    by_kind: dict[str, list] = {k: [] for k in features.KINDS}
    feat_dir = out / "features"
    for pid in sorted(traces):
        windows = _piece_features(pid, anns[pid], args, cfg["features"])
        if args.audio and windows:
            feat_dir.mkdir(exist_ok=True)
            features.write_features_csv(windows, feat_dir / f"{pid}.csv")
        for kind in features.KINDS:
            sel = [w for w in windows if w.kind == kind]
            if sel:
                by_kind[kind].append((traces[pid], sel))
    reports, any_defined = [], False
    with open(out / "correlations.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "r", "p", "n"])
        for kind in features.KINDS:
            if not by_kind[kind]:
                continue
            try:
                rep = correlation.pooled_correlation(by_kind[kind])
            except correlation.UndefinedCorrelationError as exc:
                log.warning("%s: %s", kind, exc)
                w.writerow([kind, "", "", 0])
                continue
            any_defined = True
            reports.append(rep)
            w.writerow([rep.kind, repr(rep.r), repr(rep.p_value), rep.n])
            curve = correlation.binned_correlation(by_kind[kind], cfg["analysis"]["bin_width_s"])
            correlation.write_curve_csv(curve, out / f"binned_{kind}.csv")
    return any_defined


def _load_stimuli(stim_dir: Path, fs: float, strict: bool) -> trf.RegressorSet:
    ic, env = {}, {}
    for f in sorted(stim_dir.glob("*.ic.series")):
        sid = f.name[: -len(".ic.series")]
        env_path = stim_dir / f"{sid}.env.series"
        if not env_path.is_file():
            raise UsageError(f"missing envelope series for stimulus {sid}")
        _, e, e_rate = io.read_series(env_path, strict=strict)
        _, x, x_rate = io.read_series(f, strict=strict)
        if abs(e_rate - fs) > 1e-9:
            raise UsageError(f"envelope of {sid} is at {e_rate} Hz, EEG at {fs} Hz")
        env[sid] = e
        ic[sid] = x if abs(x_rate - fs) <= 1e-9 else trf.resample_zoh(x, x_rate, fs, e.size)
    if not ic:
        raise UsageError(f"no *.ic.series files under {stim_dir}")
    return trf.RegressorSet(ic, env, fs)


def cmd_trf(args, cfg) -> int:
    if not args.eeg or not Path(args.eeg).is_file():
        raise UsageError(f"--eeg: no such file: {args.eeg}")
    trials = io.read_eeg(args.eeg, strict=args.strict)
    if not trials:
        raise UsageError("EEG file holds no trials")
    fs = trials[0].fs_hz
    if any(abs(t.fs_hz - fs) > 1e-9 for t in trials):
        raise UsageError("all trials must share one sampling rate")
    regressors = _load_stimuli(_require_dir(args.stimuli, "--stimuli"), fs, args.strict)
    config = trf_config(cfg)
    out = _prepare_out(args, cfg)
    try:
        result = trf.permutation_gain(regressors, trials, config)
    except trf.SingularSystemError as exc:
        raise AnalysisError(str(exc)) from None
    trf.write_gain_csv(result, out / "gain.csv")
    trf.write_summary_json(result, config, out / "summary.json")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "ic": cmd_ic, "analyze": cmd_analyze, "trf": cmd_trf}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--strict", action="store_true", help="reject unknown fields in inputs and config")
    common.add_argument("--preset", choices=sorted(model.PRESETS), help="model/schedule preset")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="audiosurprisal", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus (and optional EEG)")
    s.add_argument("--n-pieces", type=int)

    t = sub.add_parser("train", parents=[common], help="train a model on a corpus directory")
    t.add_argument("--corpus", help="corpus directory (from synth)")
    t.add_argument("--eval-corpus", help="separate corpus for early stopping")
    t.add_argument("--resume", help="checkpoint to start from")
    t.add_argument("--epochs", type=int, help="total epochs (overrides schedule)")

    i = sub.add_parser("ic", parents=[common], help="write per-frame IC traces")
    i.add_argument("--checkpoint")
    i.add_argument("--corpus")
    i.add_argument("--interpolate-unvoiced", metavar="MASK",
                   help="JSON mapping piece id to per-frame voiced flags")

    a = sub.add_parser("analyze", parents=[common], help="segment statistics and feature correlations")
    a.add_argument("--corpus", help="corpus directory holding annotations/")
    a.add_argument("--ic", help="directory of IC series (from ic)")
    a.add_argument("--audio", help="directory of <piece>.wav files for feature extraction")
    a.add_argument("--features", help="directory of precomputed <piece>.csv feature windows")

    r = sub.add_parser("trf", parents=[common], help="EEG encoding gain of IC over shuffled baselines")
    r.add_argument("--eeg", help="EEG container file")
    r.add_argument("--stimuli", help="directory of <stim>.ic.series and <stim>.env.series")
    r.add_argument("--n-permutations", type=int)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with warnings.catch_warnings():
            if args.strict:
                warnings.simplefilter("error", io.StrictModeWarning)
            cfg = resolve_config(args)
            return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (io.FormatError, io.StrictModeWarning, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (AnalysisError, model.TrainingError, correlation.UndefinedCorrelationError) as exc:
        print(f"analysis failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
