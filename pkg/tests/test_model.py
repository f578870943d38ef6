import math

import numpy as np
import pytest
import torch

from audiosurprisal import model as M
from audiosurprisal.io import FrameSequence
from helpers import TINY, functional_loss
from oracles import central_differences


@pytest.fixture(scope="module")
def net():
    return M.init_model(TINY, seed=0)


def frames(T, D=3, seed=0):
    return np.random.default_rng(seed).standard_normal((T, D))


def test_init_is_deterministic():
    a, b = M.init_model(TINY, 5), M.init_model(TINY, 5)
    assert np.array_equal(M.get_flat_parameters(a), M.get_flat_parameters(b))
    assert not np.array_equal(M.get_flat_parameters(a), M.get_flat_parameters(M.init_model(TINY, 6)))


def test_init_does_not_touch_global_rng():
    torch.manual_seed(123)
    expected = torch.rand(3)
    torch.manual_seed(123)
    M.init_model(TINY, 9)
    assert torch.equal(torch.rand(3), expected)


def test_head_dim_and_validation():
    assert M.ModelConfig(d_model=32, n_heads=4).head_dim == 8
    with pytest.raises(ValueError):
        M.ModelConfig(d_model=30, n_heads=4)


@pytest.mark.parametrize("cfg", [TINY, M.PRESETS["desk"]])
def test_parameter_count(cfg):
    assert M.parameter_count(cfg) == M.init_model(cfg).n_parameters()


def test_single_frame_uses_start_only(net):
    (p,) = M.forward(net, frames(1))
    (q,) = M.forward(net, frames(1, seed=1))
    np.testing.assert_array_equal(p.means, q.means)
    assert len(M.ic_trace(net, frames(1))) == 1


def test_perturbing_a_frame_only_changes_later_outputs(net):
    x = frames(10)
    base = M.ic_trace(net, x).values
    for t in range(10):
        y = x.copy()
        y[t] += 3.0
        changed = M.ic_trace(net, y).values != base
        assert not changed[:t].any()
        assert changed[t]


def test_shared_prefix(net):
    a, b = frames(12, seed=1), frames(12, seed=2)
    b[:5] = a[:5]
    pa, pb = M.forward(net, a), M.forward(net, b)
    for i in range(6):
        np.testing.assert_array_equal(pa[i].means, pb[i].means)


def test_appending_frames_keeps_trace(net):
    x = frames(20)
    short, full = M.ic_trace(net, x[:12]).values, M.ic_trace(net, x).values
    np.testing.assert_allclose(full[:12], short, rtol=0, atol=1e-12)


def test_initial_ic_near_gaussian_entropy():
    """With unit head scales and ~zero means, E[IC] of N(0, I) frames is the entropy D*0.5*ln(2*pi*e)."""
    cfg = M.PRESETS["desk"]
    x = np.random.default_rng(0).standard_normal((200, cfg.D_in))
    entropy = cfg.D_in * 0.5 * math.log(2 * math.pi * math.e)
    assert M.nll_loss(M.init_model(cfg, 0), x) == pytest.approx(entropy, rel=0.15)


def test_loss_is_length_weighted_mean(net):
    a, b = frames(5, seed=1), frames(11, seed=2)
    la, lb = M.nll_loss(net, a), M.nll_loss(net, b)
    assert M.nll_loss(net, [a, b]) == pytest.approx((5 * la + 11 * lb) / 16, rel=1e-12)


def test_loss_finite_for_extreme_input(net):
    assert math.isfinite(M.nll_loss(net, np.full((4, 3), 1e6)))


def test_trace_mean_equals_loss(net):
    seq = FrameSequence("p", frames(17))
    assert M.ic_trace(net, seq).mean() == pytest.approx(M.nll_loss(net, seq), abs=1e-9)


def test_dimension_and_length_checks(net):
    with pytest.raises(ValueError, match="dimension"):
        M.nll_loss(net, np.zeros((4, 5)))
    with pytest.raises(ValueError, match="too long"):
        M.nll_loss(net, np.zeros((TINY.max_len + 1, 3)))


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(seed):
    net = M.init_model(TINY, seed)
    assert net.n_parameters() <= 5000
    x = frames(8, seed=seed)
    g = M.loss_gradients(net, x)
    fd = central_differences(functional_loss(net, x), M.get_flat_parameters(net))
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-4


def test_duplicated_sequence_doubles_its_contribution(net):
    a, b = frames(6, seed=1), frames(9, seed=2)
    ga, gb = M.loss_gradients(net, a), M.loss_gradients(net, b)
    g = M.loss_gradients(net, [a, a, b])
    np.testing.assert_allclose(g * 21, 2 * 6 * ga + 9 * gb, rtol=1e-9, atol=1e-12)


def test_rotary_logits_depend_on_offset_only(net):
    rng = np.random.default_rng(0)
    h = torch.from_numpy(rng.standard_normal((1, 6, TINY.d_model)))
    pos = torch.arange(6)
    base = M.attention_logits(net, 0, h, pos)
    for s in (1, 7, 100, 3000):
        np.testing.assert_allclose(M.attention_logits(net, 0, h, pos + s), base, atol=1e-9)


def test_lr_schedule():
    s = M.TrainSchedule(lr_peak=1e-3, warmup_epochs=4, total_epochs=12)
    assert [s.lr_at(e) for e in (1, 2, 4)] == pytest.approx([2.5e-4, 5e-4, 1e-3])
    assert s.lr_at(8) == pytest.approx(1e-3 * 4 / 8)
    assert s.lr_at(12) == 0.0
    paper = M.SCHEDULE_PRESETS["paper"]
    assert paper.lr_at(paper.warmup_epochs) == pytest.approx(1e-4)


def test_learns_a_constant_sequence():
    seq = np.tile(np.array([[0.5, -1.0, 2.0]]), (12, 1))
    net = M.init_model(TINY, 0)
    before = M.nll_loss(net, seq)
    sched = M.TrainSchedule(lr_peak=5e-3, warmup_epochs=2, total_epochs=40, batch_size=4, early_stop_patience=0)
    result = M.train(net, [seq] * 4, sched)
    evals = [r.eval_loss for r in result.loss_curve[:10]]
    assert all(b < a for a, b in zip(evals, evals[1:]))
    assert M.nll_loss(net, seq) < before - 1.0


def test_train_restores_best_epoch():
    rng = np.random.default_rng(0)
    corpus = [rng.standard_normal((10, 3)) for _ in range(4)]
    eval_set = [rng.standard_normal((10, 3)) for _ in range(2)]
    net = M.init_model(TINY, 0)
    res = M.train(net, corpus, M.TrainSchedule(lr_peak=1e-2, warmup_epochs=1, total_epochs=15,
                                               early_stop_patience=3), eval_corpus=eval_set)
    best = min(r.eval_loss for r in res.loss_curve)
    assert M.nll_loss(net, eval_set) == pytest.approx(best, rel=1e-12)
    assert res.loss_curve[res.best_epoch - 1].eval_loss == best


def test_checkpoint_roundtrip_and_resume(tmp_path):
    net = M.init_model(TINY, 3)
    M.save_checkpoint(net, tmp_path / "m.ckpt")
    loaded = M.load_checkpoint(tmp_path / "m.ckpt")
    assert loaded.config == TINY
    np.testing.assert_array_equal(M.get_flat_parameters(loaded),
                                  M.get_flat_parameters(net).astype(np.float32).astype(np.float64))
    fresh = M.init_model(TINY, 0)
    sched = M.TrainSchedule(lr_peak=1e-9, warmup_epochs=1, total_epochs=2)
    M.train(fresh, [frames(5)], sched, checkpoint_in=tmp_path / "m.ckpt")
    np.testing.assert_allclose(M.get_flat_parameters(fresh), M.get_flat_parameters(loaded), atol=1e-6)


def test_resume_rejects_other_config(tmp_path):
    M.save_checkpoint(M.init_model(TINY, 0), tmp_path / "m.ckpt")
    other = M.init_model(M.ModelConfig(n_layers=1, n_heads=2, d_model=16, d_ff=32, K_components=2, D_in=3), 0)
    with pytest.raises(ValueError):
        M.train(other, [frames(4)], M.TrainSchedule(total_epochs=2, warmup_epochs=1), checkpoint_in=tmp_path / "m.ckpt")


def test_training_is_reproducible():
    corpus = [frames(8, seed=i) for i in range(3)]
    sched = M.TrainSchedule(lr_peak=1e-3, warmup_epochs=1, total_epochs=3, batch_size=2)
    a, b = M.init_model(TINY, 1), M.init_model(TINY, 1)
    M.train(a, corpus, sched)
    M.train(b, corpus, sched)
    assert np.array_equal(M.get_flat_parameters(a), M.get_flat_parameters(b))


def test_loss_curve_csv(tmp_path):
    curve = [M.EpochRecord(1, 2.0, 2.5, 1e-4)]
    M.write_loss_curve(curve, tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text() == "epoch,train_loss,eval_loss,lr\n1,2.0,2.5,0.0001\n"
