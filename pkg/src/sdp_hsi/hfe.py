"""HSI feature extractor: a residual conv encoder that maps a cube (or a cube
pair) to a fixed-length vector whatever its spatial size."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .nn import ParamSpec, ParamStore, avg_pool2, conv2d, global_avg_pool, init_params, linear, resblock, resblock_specs
from .spectral_data import SpectralCube

GROUND_TRUTH = "ground_truth_conditioned"
MEASUREMENT = "measurement_only"
PROJ_GAIN = 0.1


@dataclass(frozen=True)
class HfeConfig:
    base_channels: int = 16
    num_resblocks: int = 4
    input_bands: int = 28

    def __post_init__(self):
        if self.base_channels < 1 or self.num_resblocks < 1 or self.input_bands < 1:
            raise ValueError(f"invalid HfeConfig {self}")

    @property
    def feature_dim(self) -> int:
        return 4 * self.base_channels

    def channel_schedule(self) -> list[int]:
        """Width entering each residual stage, then the output width.

        C' -> 2C' -> 4C' -> 4C' -> ... (doubling capped at 4C').
        """
        c = self.base_channels
        widths = [c]
        for _ in range(self.num_resblocks):
            widths.append(min(2 * widths[-1], 4 * c))
        widths[-1] = 4 * c
        return widths


@dataclass(frozen=True)
class HsiFeature:
    values: torch.Tensor
    source: str

    def __post_init__(self):
        if self.source not in (GROUND_TRUTH, MEASUREMENT):
            raise ValueError(f"unknown feature source {self.source!r}")
        if not torch.isfinite(self.values).all():
            raise ValueError("feature contains non-finite values")


def hfe_specs(config: HfeConfig, in_channels: int) -> list[ParamSpec]:
    widths = config.channel_schedule()
    specs = [
        ParamSpec("stem.w", (widths[0], in_channels, 3, 3)),
        ParamSpec("stem.b", (widths[0],), "zeros"),
    ]
    for i in range(config.num_resblocks):
        specs += resblock_specs(f"block{i}.", widths[i], zero_last=True)
        if widths[i + 1] != widths[i]:
            specs += [
                ParamSpec(f"expand{i}.w", (widths[i + 1], widths[i], 1, 1)),
                ParamSpec(f"expand{i}.b", (widths[i + 1],), "zeros"),
            ]
    d = config.feature_dim
    # Small projection gain keeps the feature's common-mode offset from
    # swamping the prior injectors early on.
    specs += [ParamSpec("proj.w", (d, d), gain=PROJ_GAIN), ParamSpec("proj.b", (d,), "zeros")]
    return specs


def init_hfe(seed: int, config: HfeConfig, ground_truth: bool, dtype=torch.float32) -> ParamStore:
    """Stem takes 2L channels for the (H, G) extractor and L for the measurement one."""
    in_channels = 2 * config.input_bands if ground_truth else config.input_bands
    return init_params(seed, hfe_specs(config, in_channels), dtype)


def hfe_forward(x: torch.Tensor, params: ParamStore, config: HfeConfig) -> torch.Tensor:
    """(N, C_in, H, W) or (C_in, H, W) -> (N, 4C') or (4C',)."""
    min_side = 2**config.num_resblocks
    if min(x.shape[-2:]) < min_side:
        raise ValueError(
            f"spatial size {tuple(x.shape[-2:])} smaller than 2^{config.num_resblocks} = {min_side}"
        )
    h = conv2d(x, params["stem.w"], params["stem.b"], padding=1)
    for i in range(config.num_resblocks):
        h = avg_pool2(resblock(h, params, f"block{i}."))
        if f"expand{i}.w" in params:
            h = conv2d(h, params[f"expand{i}.w"], params[f"expand{i}.b"])
    return linear(global_avg_pool(h), params["proj.w"], params["proj.b"])


def _as_tensor(cube: SpectralCube, dtype) -> torch.Tensor:
    return torch.from_numpy(cube.data.copy()).to(dtype)


def hfe_gt(h_init: SpectralCube, g: SpectralCube, params: ParamStore, config: HfeConfig) -> HsiFeature:
    if h_init.data.shape != g.data.shape:
        raise ValueError(f"initial cube {h_init.data.shape} and ground truth {g.data.shape} differ")
    x = torch.cat([_as_tensor(h_init, params.dtype), _as_tensor(g, params.dtype)])
    if x.shape[0] != params["stem.w"].shape[1]:
        raise ValueError(f"params expect {params['stem.w'].shape[1]} channels, got {x.shape[0]}")
    return HsiFeature(hfe_forward(x, params, config), GROUND_TRUTH)


def hfe_meas(h_init: SpectralCube, params_m: ParamStore, config: HfeConfig) -> HsiFeature:
    x = _as_tensor(h_init, params_m.dtype)
    if x.shape[0] != params_m["stem.w"].shape[1]:
        raise ValueError(f"params expect {params_m['stem.w'].shape[1]} channels, got {x.shape[0]}")
    return HsiFeature(hfe_forward(x, params_m, config), MEASUREMENT)
