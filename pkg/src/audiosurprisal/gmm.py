"""Diagonal-covariance Gaussian mixture densities over D-dimensional frames.

A raw head vector of length K*(2D+1) is laid out as K*D means, K*D raw scales
and K weight logits, each block row-major over (component, dimension).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

DEFAULT_SCALE_FLOOR = 1e-4
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GmmParams:
    means: np.ndarray    # K x D
    scales: np.ndarray   # K x D standard deviations
    weights: np.ndarray  # K

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        scales = np.asarray(self.scales, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if means.ndim != 2 or scales.shape != means.shape or weights.shape != (means.shape[0],):
            raise ValueError("inconsistent GMM parameter shapes")
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(scales)) and np.all(np.isfinite(weights))):
            raise ValueError("GMM parameters must be finite")
        if np.any(scales <= 0):
            raise ValueError("GMM scales must be positive")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("GMM weights must lie on the probability simplex")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "weights", weights)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def raw_size(n_components: int, dim: int) -> int:
    return n_components * (2 * dim + 1)


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def inverse_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


def split_raw(raw, n_components: int, dim: int):
    kd = n_components * dim
    if raw.shape[-1] != raw_size(n_components, dim):
        raise ValueError(f"raw head has length {raw.shape[-1]}, expected {raw_size(n_components, dim)}")
    lead = raw.shape[:-1]
    means = raw[..., :kd].reshape(*lead, n_components, dim)
    raw_scales = raw[..., kd:2 * kd].reshape(*lead, n_components, dim)
    logits = raw[..., 2 * kd:]
    return means, raw_scales, logits


def build_params(raw, n_components: int, dim: int,
                 scale_floor: float = DEFAULT_SCALE_FLOOR) -> GmmParams:
    """Map an unconstrained head vector to mixture parameters."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 1:
        raise ValueError("raw head must be a vector")
    if not np.all(np.isfinite(raw)):
        raise ValueError("raw head contains non-finite values")
    if not scale_floor > 0:
        raise ValueError("scale_floor must be positive")
    means, raw_scales, logits = split_raw(raw, n_components, dim)
    scales = softplus(raw_scales) + scale_floor
    z = logits - logits.max()
    w = np.exp(z)
    return GmmParams(means.copy(), scales, w / w.sum())


def component_log_densities(params: GmmParams, x) -> np.ndarray:
    """log w_k + log N(x; mu_k, diag(sigma_k^2)) for each component k."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.dim,):
        raise ValueError(f"frame has shape {x.shape}, expected ({params.dim},)")
    z = (x[None, :] - params.means) / params.scales
    log_norm = -0.5 * z * z - np.log(params.scales) - HALF_LOG_2PI
    with np.errstate(divide="ignore"):
        return np.log(params.weights) + log_norm.sum(axis=1)


def ic_of_frame(params: GmmParams, x) -> float:
    """Information content -log p(x) in nats."""
    lp = component_log_densities(params, x)
    m = lp.max()
    return float(-(m + math.log(np.exp(lp - m).sum())))


def ic_of_frames(params_seq, frames) -> np.ndarray:
    return np.array([ic_of_frame(p, x) for p, x in zip(params_seq, frames)])


def sample_frame(params: GmmParams, rng_seed) -> np.ndarray:
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    k = rng.choice(params.n_components, p=params.weights)
    return params.means[k] + params.scales[k] * rng.standard_normal(params.dim)


def differential_entropy_mc(params: GmmParams, n: int = 2000, seed: int = 0) -> float:
    """Monte Carlo estimate of the mixture entropy: mean IC of its own samples."""
    rng = np.random.default_rng(seed)
    return float(np.mean([ic_of_frame(params, sample_frame(params, rng)) for _ in range(n)]))


# ---------------------------------------------------------------------------
# torch path, used by the model for training
# ---------------------------------------------------------------------------


def torch_build(raw: torch.Tensor, n_components: int, dim: int, scale_floor: float):
    means, raw_scales, logits = split_raw(raw, n_components, dim)
    scales = torch.nn.functional.softplus(raw_scales) + scale_floor
    log_weights = torch.log_softmax(logits, dim=-1)
    return means, scales, log_weights


def torch_ic(raw: torch.Tensor, x: torch.Tensor, n_components: int, dim: int,
             scale_floor: float = DEFAULT_SCALE_FLOOR) -> torch.Tensor:
    """IC for a batch of raw heads (..., K(2D+1)) against frames (..., D)."""
    means, scales, log_weights = torch_build(raw, n_components, dim, scale_floor)
    z = (x.unsqueeze(-2) - means) / scales
    log_norm = (-0.5 * z * z - torch.log(scales) - HALF_LOG_2PI).sum(-1)
    return -torch.logsumexp(log_weights + log_norm, dim=-1)
