import csv
import hashlib
import json

import numpy as np
import pytest

from audiosurprisal import io, model
from audiosurprisal.cli import main
from audiosurprisal.features import FeatureWindow, write_features_csv

SMALL = {
    "seed": 1,
    "corpus": {"n_pieces": 6, "segment_len_frames": 8, "D": 4},
    "model": {"n_layers": 1, "d_model": 16, "d_ff": 32, "n_heads": 2, "K_components": 2},
    "schedule": {"total_epochs": 4, "warmup_epochs": 1, "batch_size": 4},
    "eeg": {"enabled": True, "n_stimuli": 3, "duration_s": 10, "n_trials": 4, "n_channels": 3},
    "trf": {"n_permutations": 2, "lambdas": [1.0, 100.0]},
}


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    assert run("synth", "--config", cfg, "--out", root / "corpus") == 0
    assert run("train", "--config", cfg, "--corpus", root / "corpus", "--out", root / "model") == 0
    assert run("ic", "--config", cfg, "--checkpoint", root / "model" / "model.ckpt",
               "--corpus", root / "corpus", "--out", root / "ic") == 0
    assert run("analyze", "--config", cfg, "--corpus", root / "corpus", "--ic", root / "ic" / "ic",
               "--out", root / "analysis") == 0
    assert run("trf", "--config", cfg, "--eeg", root / "corpus" / "eeg.bin",
               "--stimuli", root / "corpus" / "stimuli", "--out", root / "trf") == 0
    return root, cfg


def test_synth_outputs_and_manifest(pipeline):
    root, _ = pipeline
    corpus = root / "corpus"
    assert len(list((corpus / "frames").glob("*.frames"))) == 6
    assert len(list((corpus / "annotations").glob("*.json"))) == 6
    manifest = json.loads((corpus / "manifest.json").read_text())
    assert manifest["n_pieces"] == 6
    for rel, digest in manifest["files"].items():
        assert hashlib.sha256((corpus / rel).read_bytes()).hexdigest() == digest
    assert len(io.read_eeg(corpus / "eeg.bin")) == 4


def test_synth_is_reproducible(pipeline, tmp_path):
    root, cfg = pipeline
    assert run("synth", "--config", cfg, "--out", tmp_path / "again") == 0
    assert tree_digest(tmp_path / "again") == tree_digest(root / "corpus")


def test_seed_flag_changes_output(pipeline, tmp_path):
    root, cfg = pipeline
    assert run("synth", "--config", cfg, "--seed", 2, "--out", tmp_path / "other") == 0
    a = (root / "corpus" / "frames" / "piece_000.frames").read_bytes()
    assert (tmp_path / "other" / "frames" / "piece_000.frames").read_bytes() != a
    resolved = json.loads((tmp_path / "other" / "config.json").read_text())
    assert resolved["seed"] == 2 and resolved["corpus"]["seed"] == 2


def test_config_is_written_everywhere(pipeline):
    root, _ = pipeline
    for sub in ("corpus", "model", "ic", "analysis", "trf"):
        cfg = json.loads((root / sub / "config.json").read_text())
        assert cfg["trf"]["n_permutations"] == 2
        assert cfg["corpus"]["n_pieces"] == 6


def test_train_outputs(pipeline):
    root, _ = pipeline
    report = json.loads((root / "model" / "train_report.json").read_text())
    curve = read_csv(root / "model" / "loss_curve.csv")
    assert len(curve) == report["epochs_run"] == 4
    net = model.load_checkpoint(root / "model" / "model.ckpt")
    assert net.config.D_in == 4
    assert report["n_parameters"] == net.n_parameters()


def test_trace_lengths_and_mean_equal_eval_loss(pipeline):
    root, _ = pipeline
    report = json.loads((root / "model" / "train_report.json").read_text())
    rows = read_csv(root / "ic" / "ic_summary.csv")
    assert len(rows) == 6
    total = sum(int(r["n_frames"]) for r in rows)
    weighted = sum(int(r["n_frames"]) * float(r["mean_ic"]) for r in rows) / total
    assert weighted == pytest.approx(report["eval_loss"], abs=1e-6)
    for r in rows:
        seq = io.read_frames(root / "corpus" / "frames" / f"{r['piece']}.frames")
        _, values, rate = io.read_series(root / "ic" / "ic" / f"{r['piece']}.series")
        assert values.size == seq.n_frames == int(r["n_frames"])
        assert rate == seq.frame_rate_hz


def test_resume_continues_from_checkpoint(pipeline, tmp_path):
    root, cfg = pipeline
    ckpt = root / "model" / "model.ckpt"
    assert run("train", "--config", cfg, "--corpus", root / "corpus", "--resume", ckpt,
               "--epochs", 2, "--out", tmp_path / "resumed") == 0
    first = json.loads((root / "model" / "train_report.json").read_text())
    again = json.loads((tmp_path / "resumed" / "train_report.json").read_text())
    assert again["epochs_run"] == 2
    assert again["train_loss"] < first["train_loss"] + 0.5


def test_interpolate_unvoiced(pipeline, tmp_path):
    root, cfg = pipeline
    n = io.read_frames(root / "corpus" / "frames" / "piece_000.frames").n_frames
    voiced = [i % 4 == 0 for i in range(n)]
    mask = tmp_path / "mask.json"
    mask.write_text(json.dumps({"piece_000": voiced}))
    assert run("ic", "--config", cfg, "--checkpoint", root / "model" / "model.ckpt", "--corpus", root / "corpus",
               "--interpolate-unvoiced", mask, "--out", tmp_path / "ic") == 0
    _, raw, _ = io.read_series(root / "ic" / "ic" / "piece_000.series")
    _, held, _ = io.read_series(tmp_path / "ic" / "ic" / "piece_000.series")
    np.testing.assert_array_equal(held, np.repeat(raw[::4], 4)[:n])
    rows = {r["piece"]: r["interpolated"] for r in read_csv(tmp_path / "ic" / "ic_summary.csv")}
    assert rows["piece_000"] == "1" and rows["piece_001"] == "0"


def test_segment_stats_schema(pipeline):
    root, _ = pipeline
    stats = json.loads((root / "analysis" / "segment_stats.json").read_text())
    assert set(stats) == {"n_pieces", "repetition", "contrast_non_outro", "contrast_outro"}
    assert stats["n_pieces"] == 6
    for key in ("repetition", "contrast_non_outro", "contrast_outro"):
        entry = stats[key]
        assert entry["absent"] is False
        assert set(entry) == {"absent", "mu", "p_value", "n_pairs"}
        assert 0.0 <= entry["p_value"] <= 1.0
    diffs = read_csv(root / "analysis" / "pair_differences.csv")
    assert sum(1 for d in diffs if d["group"] == "repetition") == stats["repetition"]["n_pairs"]


def test_absent_repetition(tmp_path):
    cfg = dict(SMALL, corpus={"n_pieces": 2, "segment_len_frames": 8, "D": 4,
                              "labels_grammar": [["A", "B", "C", "Outro"]]})
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert run("synth", "--config", path, "--out", tmp_path / "c") == 0
    ic_dir = tmp_path / "ic"
    ic_dir.mkdir()
    for f in sorted((tmp_path / "c" / "frames").glob("*.frames")):
        seq = io.read_frames(f)
        io.write_series(np.arange(seq.n_frames, dtype=float), seq.frame_rate_hz, ic_dir / f"{seq.id}.series",
                        seq.id, kind="ic")
    assert run("analyze", "--corpus", tmp_path / "c", "--ic", ic_dir, "--out", tmp_path / "a") == 0
    stats = json.loads((tmp_path / "a" / "segment_stats.json").read_text())
    assert stats["repetition"] == {"absent": True}
    assert stats["contrast_non_outro"]["n_pairs"] == 4


def test_analyze_with_precomputed_features(pipeline, tmp_path):
    root, cfg = pipeline
    feats = tmp_path / "feats"
    feats.mkdir()
    rng = np.random.default_rng(0)
    for f in sorted((root / "ic" / "ic").glob("*.series")):
        pid, values, rate = io.read_series(f)
        dur = values.size / rate
        windows = [window(t, rng) for t in np.arange(0.0, dur - 1.0, 1.0)]
        write_features_csv(windows, feats / f"{pid}.csv")
    assert run("analyze", "--config", cfg, "--corpus", root / "corpus", "--ic", root / "ic" / "ic",
               "--features", feats, "--out", tmp_path / "a") == 0
    rows = read_csv(tmp_path / "a" / "correlations.csv")
    assert [r["kind"] for r in rows] == ["loudness"]
    assert -1.0 <= float(rows[0]["r"]) <= 1.0
    assert (tmp_path / "a" / "binned_loudness.csv").is_file()


def window(t, rng):
    return FeatureWindow(float(t), float(t) + 1.0, float(rng.standard_normal()), "loudness")


def test_trf_outputs(pipeline):
    root, _ = pipeline
    summary = json.loads((root / "trf" / "summary.json").read_text())
    assert summary["n_baselines"] == 2
    gain = read_csv(root / "trf" / "gain.csv")
    assert len(gain) == 3


def test_n_permutations_flag(pipeline, tmp_path):
    root, cfg = pipeline
    assert run("trf", "--config", cfg, "--eeg", root / "corpus" / "eeg.bin", "--stimuli",
               root / "corpus" / "stimuli", "--n-permutations", 1, "--out", tmp_path / "t") == 0
    assert json.loads((tmp_path / "t" / "summary.json").read_text())["n_baselines"] == 1


def test_pipeline_is_deterministic(pipeline, tmp_path):
    root, cfg = pipeline
    assert run("train", "--config", cfg, "--corpus", root / "corpus", "--out", tmp_path / "m") == 0
    assert (tmp_path / "m" / "model.ckpt").read_bytes() == (root / "model" / "model.ckpt").read_bytes()
    assert run("ic", "--config", cfg, "--checkpoint", tmp_path / "m" / "model.ckpt", "--corpus", root / "corpus",
               "--out", tmp_path / "i") == 0
    assert tree_digest(tmp_path / "i" / "ic") == tree_digest(root / "ic" / "ic")
    assert run("analyze", "--config", cfg, "--corpus", root / "corpus", "--ic", tmp_path / "i" / "ic",
               "--out", tmp_path / "a") == 0
    assert tree_digest(tmp_path / "a") == tree_digest(root / "analysis")


# error handling

def test_missing_corpus_is_usage_error(tmp_path, capsys):
    assert run("train", "--corpus", tmp_path / "nowhere", "--out", tmp_path / "o") == 2
    assert "--corpus" in capsys.readouterr().err


def test_invalid_spec_fails(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"corpus": {"n_pieces": 0}}))
    assert run("synth", "--config", path, "--out", tmp_path / "o") == 2
    path.write_text("{not json")
    assert run("synth", "--config", path, "--out", tmp_path / "o") == 2


def test_strict_mode_rejects_unknown_keys(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"corpus": {"n_pieces": 1, "colour": "blue"}}))
    assert run("synth", "--config", path, "--strict", "--out", tmp_path / "strict") == 2
    with pytest.warns(io.StrictModeWarning):
        assert run("synth", "--config", path, "--out", tmp_path / "lenient") == 0


def test_no_pairs_and_no_features_is_analysis_error(tmp_path):
    cfg = {"corpus": {"n_pieces": 1, "segment_len_frames": 4, "D": 2, "labels_grammar": [["A"]]}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert run("synth", "--config", path, "--out", tmp_path / "c") == 0
    ic_dir = tmp_path / "ic"
    ic_dir.mkdir()
    io.write_series(np.ones(4), 11.0, ic_dir / "piece_000.series", "piece_000", kind="ic")
    assert run("analyze", "--corpus", tmp_path / "c", "--ic", ic_dir, "--out", tmp_path / "a") == 1
