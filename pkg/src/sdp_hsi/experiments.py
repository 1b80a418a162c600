"""Desk-scale toy experiment: 20 synthetic 32x32x8 scenes, 16 for training
and 4 for testing, one shared coded mask. Used by the ``toy`` subcommand
and the acceptance suite."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

from .pipeline import EvalReport, ModelArtifacts, TrainConfig, derive_seed, evaluate, train_stage1, train_stage2
from .spectral_data import Sample, random_mask, synthesize_scene

log = logging.getLogger(__name__)

TOY_SCENES = 20
TOY_TEST = 4
TOY_SIZE = 32
TOY_BANDS = 8

# Shared by both stages; stage 2 inherits architecture from stage 1.
TOY_ARCH = dict(block_size=TOY_SIZE, base_channels=8, recon_channels=16)
TOY_STAGE1 = dict(epochs=40, epoch_samples=64, learning_rate=4e-3, lr_schedule="cosine")
TOY_STAGE2 = dict(
    epochs=100,
    warmup_epochs=80,
    epoch_samples=80,
    learning_rate=2e-3,
    lr_schedule="cosine",
    noise_draws=128,
    denoiser_zero_out=True,
)


def toy_scene_seed(data_seed: int, index: int) -> int:
    return derive_seed(data_seed, "scene", index)


def toy_mask_seed(data_seed: int) -> int:
    return derive_seed(data_seed, "mask")


def toy_dataset(data_seed: int = 0, scenes: int = TOY_SCENES, test: int = TOY_TEST, size: int = TOY_SIZE, bands: int = TOY_BANDS):
    """(train, test) sample lists; identical to what ``sdp-hsi simulate`` writes."""
    if not 0 < test < scenes:
        raise ValueError(f"need 0 < test ({test}) < scenes ({scenes})")
    mask = random_mask(toy_mask_seed(data_seed), size, size)
    samples = [Sample(synthesize_scene(toy_scene_seed(data_seed, i), size, size, bands), mask, i) for i in range(scenes)]
    return samples[: scenes - test], samples[scenes - test :]


def toy_configs(seed: int, mode: str) -> tuple[TrainConfig, TrainConfig]:
    common = dict(TOY_ARCH, seed=seed, spim_mode=mode)
    return TrainConfig(stage=1, **common, **TOY_STAGE1), TrainConfig(stage=2, **common, **TOY_STAGE2)


@dataclass
class ToyRun:
    seed: int
    mode: str
    model: ModelArtifacts
    report: EvalReport
    seconds: float


def run_toy(seed: int, mode: str, data=None, out_dir=None) -> ToyRun:
    """Stage 1, stage 2 and test evaluation for one (seed, SPIM mode) pair."""
    train, test = data if data is not None else toy_dataset()
    c1, c2 = toy_configs(seed, mode)
    start = time.perf_counter()
    model = train_stage2(train_stage1(train, c1), train, c2)
    report = evaluate(model, test, seed)
    elapsed = time.perf_counter() - start
    if out_dir is not None:
        out = Path(out_dir)
        model.save(out)
        report.save(out)
    log.info("toy seed %d mode %s: %.3f dB in %.0f s", seed, model.arch.spim_mode, report.mean_psnr, elapsed)
    return ToyRun(seed, model.arch.spim_mode, model, report, elapsed)
