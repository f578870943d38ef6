"""Causal transformer with a Gaussian-mixture head over continuous frames.

The network reads ``[start, proj(x_1), ..., proj(x_{T-1})]`` and emits one
mixture per position, so output ``t`` is the predictive density of frame ``t``
given frames before it. Everything runs in float64 on CPU so that gradients
can be checked against finite differences and runs are bit-reproducible.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import gmm
from .io import FormatError, FrameSequence, decode_records, encode_record
from .segments import IcTrace

log = logging.getLogger(__name__)

DTYPE = torch.float64


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    K_components: int = 8
    D_in: int = 8
    max_len: int = 512
    scale_floor: float = gmm.DEFAULT_SCALE_FLOOR
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.head_dim % 2:
            raise ValueError("head dimension must be even for rotary embeddings")
        if self.max_len < 2:
            raise ValueError("max_len must be at least 2")
        if self.K_components < 1 or self.D_in < 1 or self.n_layers < 1:
            raise ValueError("K_components, D_in and n_layers must be positive")
        if not self.scale_floor > 0:
            raise ValueError("scale_floor must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def head_size(self) -> int:
        return gmm.raw_size(self.K_components, self.D_in)


PRESETS = {
    "desk": ModelConfig(),
    # 12 layers, 32 components, 64 latent channels, 4600 frames (~7 min at 11 Hz)
    "paper": ModelConfig(n_layers=12, n_heads=12, d_model=768, d_ff=3072,
                         K_components=32, D_in=64, max_len=4600),
}


@dataclass(frozen=True)
class TrainSchedule:
    lr_peak: float = 2e-3
    warmup_epochs: int = 10
    total_epochs: int = 150
    batch_size: int = 16
    weight_decay: float = 3e-7
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stop_patience: int = 20
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.warmup_epochs < self.total_epochs:
            raise ValueError("need 0 < warmup_epochs < total_epochs")
        if not self.lr_peak > 0:
            raise ValueError("lr_peak must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``: linear warmup then linear decay to 0."""
        if epoch <= self.warmup_epochs:
            return self.lr_peak * epoch / self.warmup_epochs
        frac = (self.total_epochs - epoch) / (self.total_epochs - self.warmup_epochs)
        return self.lr_peak * max(frac, 0.0)


SCHEDULE_PRESETS = {
    "desk": TrainSchedule(),
    "paper": TrainSchedule(lr_peak=1e-4, warmup_epochs=80, total_epochs=500, batch_size=16,
                           early_stop_patience=20),
}


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


def rotary_tables(positions: torch.Tensor, head_dim: int, base: float):
    inv_freq = base ** (-torch.arange(0, head_dim, 2, dtype=DTYPE) / head_dim)
    angles = positions.to(DTYPE)[:, None] * inv_freq[None, :]
    return torch.cos(angles), torch.sin(angles)


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate consecutive channel pairs of x (..., T, head_dim) by position angles."""
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)
    return out.flatten(-2)


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model, dtype=DTYPE)
        self.out = nn.Linear(cfg.d_model, cfg.d_model, dtype=DTYPE)

    def project(self, h: torch.Tensor, positions: torch.Tensor):
        B, T, _ = h.shape
        H, hd = self.cfg.n_heads, self.cfg.head_dim
        q, k, v = self.qkv(h).split(self.cfg.d_model, dim=-1)
        q, k, v = (t.view(B, T, H, hd).transpose(1, 2) for t in (q, k, v))
        cos, sin = rotary_tables(positions, hd, self.cfg.rope_base)
        return apply_rotary(q, cos, sin), apply_rotary(k, cos, sin), v

    def logits(self, h: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        q, k, _ = self.project(h, positions)
        return q @ k.transpose(-1, -2) / math.sqrt(self.cfg.head_dim)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        B, T, _ = h.shape
        positions = torch.arange(T)
        q, k, v = self.project(h, positions)
        att = q @ k.transpose(-1, -2) / math.sqrt(self.cfg.head_dim)
        mask = torch.ones(T, T, dtype=torch.bool).triu(1)
        att = att.masked_fill(mask, float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, self.cfg.d_model)
        return self.out(y)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model, dtype=DTYPE)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model, dtype=DTYPE)
        self.ff = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.d_ff, dtype=DTYPE),
            nn.GELU(),
            nn.Linear(cfg.d_ff, cfg.d_model, dtype=DTYPE),
        )

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        h = h + self.attn(self.ln1(h))
        return h + self.ff(self.ln2(h))


class SurprisalModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.input_proj = nn.Linear(config.D_in, config.d_model, dtype=DTYPE)
        self.start = nn.Parameter(torch.zeros(config.d_model, dtype=DTYPE))
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(config.d_model, dtype=DTYPE)
        self.head = nn.Linear(config.d_model, config.head_size, dtype=DTYPE)

    def hidden(self, x: torch.Tensor) -> torch.Tensor:
        """Final hidden states for frames x (B, T, D): position t sees frames < t."""
        B, T, D = x.shape
        start = self.start.expand(B, 1, -1)
        h = torch.cat([start, self.input_proj(x[:, :T - 1])], dim=1)
        for block in self.blocks:
            h = block(h)
        return self.ln_f(h)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Raw mixture heads (B, T, K(2D+1))."""
        return self.head(self.hidden(x))

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def parameter_count(config: ModelConfig) -> int:
    d, f, L = config.d_model, config.d_ff, config.n_layers
    per_block = 2 * 2 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * f + f) + (f * d + d)
    return (config.D_in * d + d) + d + L * per_block + 2 * d + (d * config.head_size + config.head_size)


def init_model(config: ModelConfig, seed: int = 0) -> SurprisalModel:
    """Deterministic initialization; the head starts at roughly unit scales and zero means."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SurprisalModel(config)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in model.named_parameters():
                if ".ln" in name or name.startswith("ln_f"):
                    continue
                if name.endswith("bias"):
                    p.zero_()
                    continue
                if p.ndim == 2:
                    std = 0.02
                    if name.endswith("out.weight") or name.endswith("ff.2.weight"):
                        std = 0.02 / math.sqrt(2 * config.n_layers)
                    if name == "input_proj.weight":
                        std = 1.0 / math.sqrt(config.D_in)
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * std)
            model.start.copy_(torch.randn(config.d_model, generator=gen, dtype=DTYPE) * 0.02)
            kd = config.K_components * config.D_in
            model.head.weight.mul_(0.05)
            model.head.bias.zero_()
            model.head.bias[:kd] = torch.randn(kd, generator=gen, dtype=DTYPE) * 0.1
            model.head.bias[kd:2 * kd] = gmm.inverse_softplus(1.0 - config.scale_floor)
    return model


# ---------------------------------------------------------------------------
# Flat parameter view
# ---------------------------------------------------------------------------


def get_flat_parameters(model: SurprisalModel) -> np.ndarray:
    return torch.nn.utils.parameters_to_vector(model.parameters()).detach().numpy().copy()


def set_flat_parameters(model: SurprisalModel, flat) -> None:
    vec = torch.as_tensor(np.asarray(flat, dtype=np.float64))
    if vec.numel() != model.n_parameters():
        raise ValueError(f"expected {model.n_parameters()} parameters, got {vec.numel()}")
    with torch.no_grad():
        torch.nn.utils.vector_to_parameters(vec, list(model.parameters()))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _as_array(frames) -> np.ndarray:
    if isinstance(frames, FrameSequence):
        return frames.frames.astype(np.float64)
    return np.asarray(frames, dtype=np.float64)


def _check(model: SurprisalModel, arr: np.ndarray) -> None:
    cfg = model.config
    if arr.ndim != 2 or arr.shape[1] != cfg.D_in:
        raise ValueError(f"dimension mismatch: frames {arr.shape}, model expects D={cfg.D_in}")
    if arr.shape[0] > cfg.max_len:
        raise ValueError(f"sequence too long: {arr.shape[0]} > max_len {cfg.max_len}")
    if arr.shape[0] < 1:
        raise ValueError("empty sequence")


def pack(model: SurprisalModel, seqs: Sequence) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad sequences into (B, Tmax, D) with a (B, Tmax) validity mask."""
    arrs = [_as_array(s) for s in seqs]
    for a in arrs:
        _check(model, a)
    T = max(a.shape[0] for a in arrs)
    x = np.zeros((len(arrs), T, model.config.D_in))
    mask = np.zeros((len(arrs), T), dtype=bool)
    for i, a in enumerate(arrs):
        x[i, :a.shape[0]] = a
        mask[i, :a.shape[0]] = True
    return torch.from_numpy(x), torch.from_numpy(mask)


def frame_ic(model: SurprisalModel, x: torch.Tensor) -> torch.Tensor:
    cfg = model.config
    return gmm.torch_ic(model(x), x, cfg.K_components, cfg.D_in, cfg.scale_floor)


def _batch_loss(model: SurprisalModel, seqs: Sequence) -> tuple[torch.Tensor, int]:
    """Summed IC over valid positions and their count."""
    x, mask = pack(model, seqs)
    ic = frame_ic(model, x)
    return ic[mask].sum(), int(mask.sum())


def _to_list(frames) -> list:
    if isinstance(frames, (FrameSequence, np.ndarray)):
        return [frames]
    return list(frames)


def forward(model: SurprisalModel, frames) -> list[gmm.GmmParams]:
    arr = _as_array(frames)
    _check(model, arr)
    cfg = model.config
    with torch.no_grad():
        raw = model(torch.from_numpy(arr)[None])[0].numpy()
    return [gmm.build_params(r, cfg.K_components, cfg.D_in, cfg.scale_floor) for r in raw]


def nll_loss(model: SurprisalModel, frames) -> float:
    """Mean IC over all frames; several sequences give the length-weighted mean."""
    with torch.no_grad():
        total, count = _batch_loss(model, _to_list(frames))
    return float(total) / count


def loss_gradients(model: SurprisalModel, frames) -> np.ndarray:
    """Reverse-mode gradient of nll_loss with respect to the flat parameter vector."""
    model.zero_grad(set_to_none=True)
    total, count = _batch_loss(model, _to_list(frames))
    grads = torch.autograd.grad(total / count, list(model.parameters()), allow_unused=True)
    flat = [torch.zeros_like(p) if g is None else g for g, p in zip(grads, model.parameters())]
    return torch.cat([g.reshape(-1) for g in flat]).numpy().copy()


def ic_trace(model: SurprisalModel, frames) -> IcTrace:
    arr = _as_array(frames)
    _check(model, arr)
    rate = frames.frame_rate_hz if isinstance(frames, FrameSequence) else 11.0
    with torch.no_grad():
        ic = frame_ic(model, torch.from_numpy(arr)[None])[0].numpy()
    return IcTrace(ic, rate)


def attention_logits(model: SurprisalModel, layer: int, h: torch.Tensor, positions) -> torch.Tensor:
    """Pre-softmax attention logits (B, H, T, T) of ``layer`` for hidden states h at given positions."""
    attn = model.blocks[layer].attn
    with torch.no_grad():
        return attn.logits(h, torch.as_tensor(positions))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class TrainingError(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    eval_loss: float
    lr: float


@dataclass
class TrainResult:
    model: SurprisalModel
    loss_curve: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def __iter__(self):
        return iter((self.model, self.loss_curve))


def train(model: SurprisalModel, corpus: Sequence, schedule: TrainSchedule,
          checkpoint_in: str | Path | None = None, eval_corpus: Sequence | None = None,
          log_every: int = 0) -> TrainResult:
    """Adam with decoupled weight decay under the warmup/decay schedule.

    The model is updated in place. Evaluation loss (on ``eval_corpus``, or the
    training corpus when none is given) drives early stopping, and the
    parameters of the best evaluation epoch are restored at the end.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty corpus")
    eval_set = list(eval_corpus) if eval_corpus else corpus
    for s in corpus + eval_set:
        _check(model, _as_array(s))
    if checkpoint_in is not None:
        loaded = load_checkpoint(checkpoint_in)
        if loaded.config != model.config:
            raise ValueError("checkpoint config differs from model config")
        set_flat_parameters(model, get_flat_parameters(loaded))

    opt = torch.optim.AdamW(model.parameters(), lr=0.0, betas=(schedule.adam_beta1, schedule.adam_beta2),
                            eps=schedule.adam_eps, weight_decay=schedule.weight_decay)
    rng = np.random.default_rng(schedule.seed)
    result = TrainResult(model)
    best, best_params, since_best = math.inf, get_flat_parameters(model), 0

    for epoch in range(1, schedule.total_epochs + 1):
        lr = schedule.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        order = rng.permutation(len(corpus))
        total, count = 0.0, 0
        model.train()
        for start in range(0, len(order), schedule.batch_size):
            batch = [corpus[i] for i in order[start:start + schedule.batch_size]]
            opt.zero_grad(set_to_none=True)
            loss_sum, n = _batch_loss(model, batch)
            loss = loss_sum / n
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {float(loss)} at epoch {epoch}, batch starting {start}")
            loss.backward()
            if schedule.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), schedule.grad_clip)
            opt.step()
            total += float(loss_sum.detach())
            count += n
        model.eval()
        eval_loss = nll_loss(model, eval_set)
        if not math.isfinite(eval_loss):
            raise TrainingError(f"non-finite eval loss at epoch {epoch}")
        result.loss_curve.append(EpochRecord(epoch, total / count, eval_loss, lr))
        if log_every and epoch % log_every == 0:
            log.info("epoch %d train %.4f eval %.4f lr %.2e", epoch, total / count, eval_loss, lr)
        if eval_loss < best:
            best, best_params, since_best = eval_loss, get_flat_parameters(model), 0
            result.best_epoch = epoch
        else:
            since_best += 1
            if schedule.early_stop_patience and since_best >= schedule.early_stop_patience:
                result.stopped_early = True
                break
    set_flat_parameters(model, best_params)
    return result


def write_loss_curve(curve: Sequence[EpochRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "eval_loss", "lr"])
        for r in curve:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.eval_loss), repr(r.lr)])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: SurprisalModel, path: str | Path, model_id: str = "") -> None:
    flat = get_flat_parameters(model)
    header = {"kind": "model", "rows": 1, "cols": int(flat.size), "rate_hz": 0.0,
              "id": model_id, "config": asdict(model.config)}
    Path(path).write_bytes(encode_record(header, flat[None, :]))


def load_checkpoint(path: str | Path) -> SurprisalModel:
    records = decode_records(Path(path).read_bytes())
    if len(records) != 1 or records[0][0]["kind"] != "model":
        raise FormatError("expected exactly one model record")
    header, data = records[0]
    try:
        config = ModelConfig(**header["config"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"bad model config in checkpoint: {exc}") from None
    model = init_model(config, 0)
    set_flat_parameters(model, data[0].astype(np.float64))
    model.eval()
    return model


def config_from_dict(d: dict, base: ModelConfig | None = None) -> ModelConfig:
    return replace(base or ModelConfig(), **d)


def schedule_from_dict(d: dict, base: TrainSchedule | None = None) -> TrainSchedule:
    return replace(base or TrainSchedule(), **d)
