"""Spectral prior injection and the plug-in reconstruction network.

The injector turns a prior vector into a per-channel scale ``s = W1 sdp`` and
shift ``b = W2 sdp`` and modulates a feature map as ``F' = s * F + b + F``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .diffusion import SpectralDiffusionPrior
from .hfe import HsiFeature
from .nn import ParamSpec, ParamStore, conv2d, init_params, resblock, resblock_specs
from .spectral_data import SpectralCube

MODES = ("both", "mul_only", "add_only", "none")
_MODE_ALIASES = {"mul": "mul_only", "add": "add_only"}


def canonical_mode(mode: str) -> str:
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"unknown SPIM mode {mode!r}; choose from {MODES + tuple(_MODE_ALIASES)}")
    return mode


@dataclass(frozen=True)
class ReconConfig:
    bands: int = 28
    channels: int = 32
    num_blocks: int = 4
    prior_dim: int = 64
    mode: str = "both"

    def __post_init__(self):
        object.__setattr__(self, "mode", canonical_mode(self.mode))
        if min(self.bands, self.channels, self.num_blocks, self.prior_dim) < 1:
            raise ValueError(f"invalid ReconConfig {self}")


def _prior_values(sdp) -> torch.Tensor:
    if isinstance(sdp, (SpectralDiffusionPrior, HsiFeature)):
        return sdp.values
    return sdp


def spim_residual(f: torch.Tensor, sdp, w1: torch.Tensor, w2: torch.Tensor, mode: str) -> torch.Tensor:
    """The modulation term F' - F: s*F + b, s*F, b or 0 depending on ``mode``."""
    mode = canonical_mode(mode)
    p = _prior_values(sdp)
    if w1.shape != w2.shape or w1.dim() != 2:
        raise ValueError(f"projection shapes differ or are not matrices: {tuple(w1.shape)}, {tuple(w2.shape)}")
    if p.shape[-1] != w1.shape[1]:
        raise ValueError(f"prior length {p.shape[-1]} != projection input {w1.shape[1]}")
    if f.shape[-3] != w1.shape[0]:
        raise ValueError(f"feature channels {f.shape[-3]} != projection output {w1.shape[0]}")
    if mode == "none":
        return torch.zeros_like(f)
    # (..., P) -> (..., C, 1, 1), broadcast over H x W
    scale = (p @ w1.T)[..., None, None]
    shift = (p @ w2.T)[..., None, None]
    if mode == "mul_only":
        return scale * f
    if mode == "add_only":
        return shift.expand_as(f)
    return scale * f + shift


def spim_inject(f: torch.Tensor, sdp, w1: torch.Tensor, w2: torch.Tensor, mode: str = "both") -> torch.Tensor:
    if canonical_mode(mode) == "none":
        spim_residual(f, sdp, w1, w2, mode)  # shape validation only
        return f
    return f + spim_residual(f, sdp, w1, w2, mode)


def recon_specs(config: ReconConfig) -> list[ParamSpec]:
    c, L, p = config.channels, config.bands, config.prior_dim
    specs = [ParamSpec("stem.w", (c, L, 3, 3)), ParamSpec("stem.b", (c,), "zeros")]
    for k in range(config.num_blocks):
        specs += resblock_specs(f"block{k}.", c, zero_last=True)
        specs += [ParamSpec(f"spim{k}.w1", (c, p), "zeros"), ParamSpec(f"spim{k}.w2", (c, p), "zeros")]
    specs += [ParamSpec("head.w", (L, c, 3, 3)), ParamSpec("head.b", (L,), "zeros")]
    return specs


def init_recon(seed: int, config: ReconConfig, dtype=torch.float32) -> ParamStore:
    """All SPIM projections start at zero, so injection starts as the identity.
    Residual branches also end in a zero conv; with plain He init the
    un-normalised stack starts with a huge output that stalls Adam."""
    return init_params(seed, recon_specs(config), dtype)


def recon_net(x: torch.Tensor, sdp, params: ParamStore, config: ReconConfig) -> torch.Tensor:
    """stem -> [resblock -> SPIM] x K -> head on (N, L, H, W) or (L, H, W)."""
    if x.shape[-3] != config.bands:
        raise ValueError(f"expected {config.bands} bands, got {x.shape[-3]}")
    p = _prior_values(sdp)
    h = conv2d(x, params["stem.w"], params["stem.b"], padding=1)
    for k in range(config.num_blocks):
        h = resblock(h, params, f"block{k}.")
        h = spim_inject(h, p, params[f"spim{k}.w1"], params[f"spim{k}.w2"], config.mode)
    return conv2d(h, params["head.w"], params["head.b"], padding=1)


def recon_forward(h_init: SpectralCube, sdp, params: ParamStore, config: ReconConfig) -> SpectralCube:
    x = torch.from_numpy(h_init.data.copy()).to(params.dtype)
    p = _prior_values(sdp).to(params.dtype)
    with torch.no_grad():
        out = recon_net(x, p, params, config)
    return SpectralCube(out.numpy())
