"""Finite-difference verification of every differentiable building block."""

from __future__ import annotations

import numpy as np
import torch

from .diffusion import diffusion_loss, init_denoiser, make_schedule
from .hfe import HfeConfig, hfe_forward, init_hfe
from .nn import (
    GradientReport,
    ParamStore,
    avg_pool2,
    conv2d,
    global_avg_pool,
    grad_check,
    linear,
    relu,
    resblock,
    resblock_specs,
    init_params,
)
from .spim import ReconConfig, init_recon, recon_net

F64 = torch.float64


def _randn(rng: np.random.Generator, *shape) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal(shape))


def _probe(out: torch.Tensor, rng_seed: int) -> torch.Tensor:
    """Fixed random linear functional so every output entry gets a distinct weight."""
    w = torch.from_numpy(np.random.default_rng(rng_seed).standard_normal(tuple(out.shape)))
    return (out * w).sum()


def gradient_suite(seed: int = 0, epsilon: float = 1e-5, max_coords: int | None = 24) -> dict[str, GradientReport]:
    """Run central-difference checks at 64-bit on small random shapes.

    Returns one report per component; ``max_coords`` caps probes per tensor.
    """
    rng = np.random.default_rng(seed)
    reports: dict[str, GradientReport] = {}

    def check(name, fn, params):
        reports[name] = grad_check(fn, params, epsilon=epsilon, max_coords=max_coords, seed=seed)

    x, w, b = _randn(rng, 2, 3, 6, 5), _randn(rng, 4, 3, 3, 3), _randn(rng, 4)
    v, lw, lb = _randn(rng, 3, 7), _randn(rng, 5, 7), _randn(rng, 5)
    conv = ParamStore({"x": x, "w": w, "b": b})
    check("conv2d", lambda p: _probe(conv2d(p["x"], p["w"], p["b"], padding=1), 1), conv)
    check("conv2d_valid", lambda p: _probe(conv2d(p["x"], p["w"], p["b"]), 2), conv)
    check("relu", lambda p: _probe(relu(p["x"]), 3), ParamStore({"x": x}))
    check("linear", lambda p: _probe(linear(p["v"], p["w"], p["b"]), 4), ParamStore({"v": v, "w": lw, "b": lb}))
    check("avg_pool2", lambda p: _probe(avg_pool2(p["x"]), 5), ParamStore({"x": x[..., :4]}))
    check("global_avg_pool", lambda p: _probe(global_avg_pool(p["x"]), 6), ParamStore({"x": x}))

    block = init_params(seed, resblock_specs("", 3), F64).merged(ParamStore({"x": _randn(rng, 1, 3, 5, 5)}))
    check("resblock", lambda p: _probe(resblock(p["x"], p), 7), block)

    hcfg = HfeConfig(base_channels=2, num_resblocks=2, input_bands=3)
    x_gt = _randn(rng, 1, 6, 8, 8).abs()
    x_m = _randn(rng, 1, 3, 8, 8).abs()
    check("hfe_gt", lambda p: _probe(hfe_forward(x_gt, p, hcfg), 8), init_hfe(seed, hcfg, True, F64))
    check("hfe_meas", lambda p: _probe(hfe_forward(x_m, p, hcfg), 9), init_hfe(seed, hcfg, False, F64))

    dim = hcfg.feature_dim
    schedule = make_schedule()
    x0, cond, eps = _randn(rng, 3, dim), _randn(rng, 3, dim), _randn(rng, 3, dim)
    t = np.array([1, 2, 4])
    check(
        "denoiser",
        lambda p: diffusion_loss(x0, cond, t, eps, p, schedule),
        init_denoiser(seed, dim, hidden=(6, 5), dtype=F64),
    )

    rcfg = ReconConfig(bands=3, channels=4, num_blocks=2, prior_dim=dim, mode="both")
    recon = init_recon(seed, rcfg, F64)
    # Random projections and residual convs so every path carries gradient.
    with torch.no_grad():
        for name in recon:
            if name.startswith("spim") or "conv2" in name:
                recon[name].copy_(0.3 * _randn(rng, *recon[name].shape))
    recon = recon.merged(ParamStore({"sdp": _randn(rng, dim)}))
    h = _randn(rng, 3, 6, 6).abs()
    check("recon_forward", lambda p: _probe(recon_net(h, p["sdp"], p, rcfg), 10), recon)
    return reports
