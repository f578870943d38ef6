import math

import numpy as np
import pytest

from audiosurprisal import synth, trf


def segment_frames(seq, ann, label):
    return [seq.frames[s.start_frame:s.end_frame] for s in ann.segment_labeling.segments if s.label == label]


def test_zero_jitter_reuses_the_generator():
    spec = synth.CorpusSpec(n_pieces=1, repetition_jitter=0.0, generator_scale=1e-9)
    seq, ann = synth.gen_piece(spec, 0)
    a = segment_frames(seq, ann, "A")
    assert len(a) == 3
    for other in a[1:]:
        np.testing.assert_allclose(other, a[0], atol=1e-7)


def test_jitter_bounds_repeat_offsets():
    spec = synth.CorpusSpec(n_pieces=1, repetition_jitter=0.05, generator_scale=1e-9)
    seq, ann = synth.gen_piece(spec, 0)
    a = segment_frames(seq, ann, "A")
    diff = np.abs(a[1] - a[0])
    assert diff.max() <= 0.1 + 1e-6 and diff.max() > 0.01


def test_contrast_step_raises_entropy_by_log_factor():
    spec = synth.CorpusSpec(D=8, contrast_entropy_step=0.5)
    gens = synth.label_generators(("Intro", "A", "B", "Outro"), spec, np.random.default_rng(0))
    h = {lab: synth.gaussian_entropy(s, spec.D) for lab, (_, s) in gens.items()}
    assert h["A"] - h["Intro"] == pytest.approx(8 * math.log(1.5), rel=1e-12)
    assert h["B"] - h["A"] == pytest.approx(8 * math.log(1.5), rel=1e-12)
    np.testing.assert_array_equal(gens["Outro"][0], gens["Intro"][0])
    assert gens["Outro"][1] == pytest.approx(0.5 * gens["Intro"][1])


def test_corpus_is_deterministic():
    spec = synth.CorpusSpec(n_pieces=4, seed=3)
    a, b = synth.gen_corpus(spec), synth.gen_corpus(spec)
    for (sa, aa), (sb, ab) in zip(a, b):
        np.testing.assert_array_equal(sa.frames, sb.frames)
        assert aa == ab
    other = synth.gen_corpus(synth.CorpusSpec(n_pieces=4, seed=4))
    assert not np.array_equal(a[0][0].frames, other[0][0].frames)


def test_piece_layout_and_annotations():
    spec = synth.CorpusSpec(n_pieces=3)
    for i, (seq, ann) in enumerate(synth.gen_corpus(spec)):
        labels = spec.labels_grammar[i]
        assert seq.frames.shape == (len(labels) * 16, spec.D)
        assert tuple(ann.segment_labeling.labels) == labels
        assert ann.beats[1] - ann.beats[0] == pytest.approx(0.5)
        assert all(b - a == pytest.approx(2.0) for a, b in ann.measures)


def test_spec_validation():
    with pytest.raises(ValueError):
        synth.CorpusSpec(n_pieces=0)
    with pytest.raises(ValueError):
        synth.CorpusSpec(repetition_jitter=-1)
    with pytest.raises(ValueError):
        synth.CorpusSpec(labels_grammar=((),))


def test_lagged_convolve_matches_numpy():
    rng = np.random.default_rng(0)
    x, k = rng.standard_normal(50), rng.standard_normal(6)
    np.testing.assert_allclose(synth.lagged_convolve(x, k, 0), np.convolve(x, k)[:50], atol=1e-12)
    shifted = synth.lagged_convolve(x, k, -2)
    np.testing.assert_allclose(shifted[:48], np.convolve(x, k)[2:50], atol=1e-12)


def test_snr_is_honoured():
    ic, env = synth.gen_stimuli(3, 10.0, 64.0)
    k, start = synth.erp_kernel(64.0)
    base = dict(ic_kernel=tuple(k), env_kernel=tuple(k), n_trials=3, n_channels=4, kernel_start_lag=start)
    clean = synth.gen_eeg(ic, env, synth.EegSimSpec(**base))
    noisy = synth.gen_eeg(ic, env, synth.EegSimSpec(**base, snr_db=0.0))
    sig = np.concatenate([t.data for t in clean], axis=1).astype(np.float64)
    noise = np.concatenate([n.data - c.data for n, c in zip(noisy, clean)], axis=1).astype(np.float64)
    ratio_db = 10 * np.log10((sig ** 2).mean(1) / (noise ** 2).mean(1))
    np.testing.assert_allclose(ratio_db, 0.0, atol=0.5)


def test_stimuli_are_reproducible():
    a = synth.gen_stimuli(2, 5.0, 64.0, seed=1)
    b = synth.gen_stimuli(2, 5.0, 64.0, seed=1)
    np.testing.assert_array_equal(a[0]["stim_01"], b[0]["stim_01"])
    assert a[0]["stim_00"].size == 320


def _recovery(ic_gain):
    fs = 64.0
    ic, env = synth.gen_stimuli(4, 20.0, fs)
    k, start = synth.erp_kernel(fs)
    ke, _ = synth.erp_kernel(fs, peaks=((60, 1.0, 20), (180, 0.5, 40)))
    spec = synth.EegSimSpec(tuple(ic_gain * k), tuple(ke), n_trials=4, n_channels=2, kernel_start_lag=start)
    return trf.RegressorSet(ic, env, fs), synth.gen_eeg(ic, env, spec), k


def test_noiseless_ic_kernel_is_recovered():
    regs, trials, k = _recovery(1.0)
    cfg = trf.TrfConfig(lambdas=(1e-3,))
    model = trf.fit_all(trf._pairs_for(regs, trials, trf.lagged_design(regs, cfg)), cfg)
    g, _ = synth.channel_gains(synth.EegSimSpec((0.0,), (0.0,), n_channels=2))
    _, w = model.kernel(0, cfg.inner_lag_mask(64.0))
    for c in range(2):
        assert np.corrcoef(w[c], g[c] * k[:w.shape[1]])[0, 1] > 0.99


def test_zero_ic_kernel_gives_no_gain():
    regs, trials, _ = _recovery(0.0)
    cfg = trf.TrfConfig(lambdas=(1e-3, 1.0), n_permutations=2)
    res = trf.permutation_gain(regs, trials, cfg)
    assert abs(res.mean_gain) < 0.05
    assert res.overall.p_value > 0.05
