"""Toy coded-aperture spectral reconstruction with a diffusion-generated spectral prior."""

from .diffusion import NoiseSchedule, SpectralDiffusionPrior, make_schedule, posterior_step, q_sample, sample_sdp
from .hfe import HfeConfig, HsiFeature, hfe_gt, hfe_meas
from .metrics import psnr, ssim
from .optics import Measurement, ShiftSpec, forward_model, shift_back
from .pipeline import EvalReport, ModelArtifacts, TrainConfig, evaluate, reconstruct, train_stage1, train_stage2
from .spectral_data import CodedMask, SpectralCube, synthesize_scene
from .spim import ReconConfig, recon_forward, spim_inject

__all__ = [
    "CodedMask",
    "EvalReport",
    "HfeConfig",
    "HsiFeature",
    "Measurement",
    "ModelArtifacts",
    "NoiseSchedule",
    "ReconConfig",
    "ShiftSpec",
    "SpectralCube",
    "SpectralDiffusionPrior",
    "TrainConfig",
    "evaluate",
    "forward_model",
    "hfe_gt",
    "hfe_meas",
    "make_schedule",
    "posterior_step",
    "psnr",
    "q_sample",
    "reconstruct",
    "recon_forward",
    "sample_sdp",
    "shift_back",
    "spim_inject",
    "ssim",
    "synthesize_scene",
    "train_stage1",
    "train_stage2",
]
