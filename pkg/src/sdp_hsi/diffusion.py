"""Few-step DDPM over compact feature vectors.

Time steps are 1-based: ``t`` runs from 1 to ``T`` and ``alpha_bar[0] = 1``.
Forward-process helpers accept NumPy arrays or torch tensors; ``t`` may be a
scalar or a per-row array for batched (N, P) inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .hfe import HsiFeature
from .nn import ParamSpec, ParamStore, init_params, linear, relu

TIME_EMBED_DIM = 16


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size == 0:
            raise ValueError("beta must be a non-empty 1-D sequence")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("every beta must lie strictly inside (0, 1)")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)

    @property
    def T(self) -> int:
        return self.beta.size

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        """alpha_bar[t-1] for t = 1..T."""
        return np.cumprod(self.alpha)

    @property
    def alpha_bar_with_zero(self) -> np.ndarray:
        """Index t gives alpha_bar_t, with alpha_bar_0 = 1."""
        return np.concatenate([[1.0], self.alpha_bar])

    def sigma2(self, t) -> np.ndarray:
        """Posterior variance beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)."""
        t = self.check_t(t)
        ab = self.alpha_bar_with_zero
        return self.beta[t - 1] * (1.0 - ab[t - 1]) / (1.0 - ab[t])

    def check_t(self, t) -> np.ndarray:
        t_arr = np.asarray(t.cpu().numpy() if isinstance(t, torch.Tensor) else t)
        if not np.issubdtype(t_arr.dtype, np.integer):
            if np.any(t_arr != np.round(t_arr)):
                raise ValueError(f"time step must be an integer, got {t}")
            t_arr = t_arr.astype(np.int64)
        if np.any(t_arr < 1) or np.any(t_arr > self.T):
            raise ValueError(f"time step {t} outside [1, {self.T}]")
        return t_arr


def make_schedule(T: int = 4, beta_start: float = 0.1, beta_end: float = 0.99) -> NoiseSchedule:
    """Linear beta ramp from ``beta_start`` to ``beta_end`` over ``T`` steps."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))


def _coef(values: np.ndarray, like):
    """Broadcast a per-row coefficient against ``like`` (vector or batch)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim:
        values = values.reshape(values.shape + (1,) * (np.ndim(like) - values.ndim))
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(values, dtype=like.dtype)
    return values


def q_step(x_prev, t, noise, schedule: NoiseSchedule):
    """One forward step: sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps."""
    t = schedule.check_t(t)
    beta = schedule.beta[t - 1]
    return _coef(np.sqrt(1.0 - beta), x_prev) * x_prev + _coef(np.sqrt(beta), noise) * noise


def q_sample(x0, t, noise, schedule: NoiseSchedule):
    """Closed-form marginal: sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps."""
    t = schedule.check_t(t)
    ab = schedule.alpha_bar[t - 1]
    return _coef(np.sqrt(ab), x0) * x0 + _coef(np.sqrt(1.0 - ab), noise) * noise


def posterior_step(x_t, eps_hat, t, schedule: NoiseSchedule, z=None):
    """x_{t-1} = mu_t + sigma_t z with
    mu_t = (x_t - eps_hat (1 - alpha_t) / sqrt(1 - alpha_bar_t)) / sqrt(alpha_t).

    sigma_1 is exactly zero, so the final step ignores ``z``.
    """
    t = schedule.check_t(t)
    alpha = schedule.alpha[t - 1]
    ab = schedule.alpha_bar[t - 1]
    mean = (x_t - _coef((1.0 - alpha) / np.sqrt(1.0 - ab), eps_hat) * eps_hat) * _coef(
        1.0 / np.sqrt(alpha), x_t
    )
    sigma = np.sqrt(schedule.sigma2(t))
    if np.all(sigma == 0):
        return mean
    if z is None:
        raise ValueError(f"posterior step at t={t} needs a noise sample")
    return mean + _coef(sigma, z) * z


# ---------------------------------------------------------------------------
# Denoiser
# ---------------------------------------------------------------------------


def time_embedding(t, dim: int = TIME_EMBED_DIM, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal embedding, [sin(t w_k), cos(t w_k)] with w_k = 10000^(-k / (dim/2))."""
    t = torch.as_tensor(np.asarray(t, dtype=np.float64), dtype=dtype)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / half)
    args = t[..., None] * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def denoiser_specs(feature_dim: int, hidden: tuple[int, ...] = (256, 256), zero_out: bool = False) -> list[ParamSpec]:
    widths = [2 * feature_dim + TIME_EMBED_DIM, *hidden]
    specs = []
    for i, (w_in, w_out) in enumerate(zip(widths, widths[1:])):
        specs += [ParamSpec(f"fc{i}.w", (w_out, w_in)), ParamSpec(f"fc{i}.b", (w_out,), "zeros")]
    specs += [
        ParamSpec("out.w", (feature_dim, widths[-1]), "zeros" if zero_out else "he"),
        ParamSpec("out.b", (feature_dim,), "zeros"),
    ]
    return specs


def init_denoiser(seed: int, feature_dim: int, hidden=(256, 256), zero_out: bool = False, dtype=torch.float32) -> ParamStore:
    return init_params(seed, denoiser_specs(feature_dim, tuple(hidden), zero_out), dtype)


def _values(feature) -> torch.Tensor:
    return feature.values if isinstance(feature, HsiFeature) else feature


def denoiser_predict(x_t: torch.Tensor, t, hf_m, params: ParamStore) -> torch.Tensor:
    """MLP over [x_t, embed(t), hf_m] predicting the injected noise."""
    cond = _values(hf_m)
    if x_t.shape != cond.shape:
        raise ValueError(f"x_t shape {tuple(x_t.shape)} != condition shape {tuple(cond.shape)}")
    t_arr = np.asarray(t.cpu().numpy() if isinstance(t, torch.Tensor) else t)
    emb = time_embedding(np.broadcast_to(t_arr, x_t.shape[:-1]), dtype=x_t.dtype)
    h = torch.cat([x_t, emb, cond], dim=-1)
    i = 0
    while f"fc{i}.w" in params:
        h = relu(linear(h, params[f"fc{i}.w"], params[f"fc{i}.b"]))
        i += 1
    return linear(h, params["out.w"], params["out.b"])


@dataclass(frozen=True)
class SpectralDiffusionPrior:
    values: torch.Tensor


Predictor = Callable[[torch.Tensor, int, torch.Tensor], torch.Tensor]


def sample_sdp(
    hf_m,
    params: ParamStore | None,
    schedule: NoiseSchedule,
    seed: int,
    predictor: Predictor | None = None,
) -> SpectralDiffusionPrior:
    """Ancestral sampling from x_T ~ N(0, I) down to x_0.

    ``predictor(x_t, t, cond)`` overrides the learned denoiser (used to plant
    a known noise oracle).
    """
    cond = _values(hf_m)
    if predictor is None:
        if params is None:
            raise ValueError("sample_sdp needs denoiser params or a predictor")
        predictor = lambda x, t, c: denoiser_predict(x, t, c, params)  # noqa: E731
    rng = np.random.default_rng(seed)
    shape = tuple(cond.shape)
    x = torch.as_tensor(rng.standard_normal(shape), dtype=cond.dtype)
    for t in range(schedule.T, 0, -1):
        eps_hat = predictor(x, t, cond)
        z = torch.as_tensor(rng.standard_normal(shape), dtype=cond.dtype) if t > 1 else None
        x = posterior_step(x, eps_hat, t, schedule, z)
        if not torch.isfinite(x).all():
            raise FloatingPointError(f"non-finite sample at step t={t}")
    return SpectralDiffusionPrior(x)


def diffusion_loss(x0, hf_m, t, eps: torch.Tensor, params: ParamStore, schedule: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between ``eps`` and the denoiser's prediction from
    q_sample(x0, t, eps)."""
    x0 = _values(x0)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {tuple(x0.shape)} != noise shape {tuple(eps.shape)}")
    x_t = q_sample(x0, t, eps, schedule)
    return torch.mean((eps - denoiser_predict(x_t, t, hf_m, params)) ** 2)
