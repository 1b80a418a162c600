"""Two-stage training, reconstruction and evaluation.

Stage 1 trains the ground-truth feature extractor together with the
reconstruction network (and its injectors) on MSE. Stage 2 freezes that
extractor, uses it to produce diffusion targets, and trains the
measurement-only extractor and the denoiser. A warm-up phase uses the
diffusion loss alone, then the reconstruction network is fine-tuned on
sampled priors.
"""

from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .diffusion import diffusion_loss, init_denoiser, make_schedule, sample_sdp
from .hfe import HfeConfig, hfe_forward, hfe_meas, init_hfe
from .metrics import psnr, ssim
from .nn import ParamStore
from .optics import Measurement, ShiftSpec, forward_model, shift_back
from .spectral_data import CodedMask, DatasetManifest, Sample, SpectralCube, augment, crop_block
from .spim import ReconConfig, canonical_mode, init_recon, recon_forward, recon_net

log = logging.getLogger(__name__)

STORE_FILES = ("hfe_gt", "recon", "hfe_meas", "denoiser")


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 50
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 4
    block_size: int = 256
    seed: int = 0
    T: int = 4
    beta_start: float = 0.1
    beta_end: float = 0.99
    spim_mode: str = "both"
    warmup_epochs: int = 5
    train_manifest: str | None = None
    test_manifest: str | None = None
    base_channels: int = 16
    num_resblocks: int = 4
    recon_channels: int = 32
    recon_blocks: int = 4
    denoiser_hidden: tuple[int, ...] = (256, 256)
    step_d: int = 2
    center_index: int = 0
    diffusion_weight: float = 1.0
    augment: bool = True
    epoch_samples: int | None = None
    noise_draws: int = 1
    lr_schedule: str = "constant"
    denoiser_zero_out: bool = False
    init_model: str | None = None

    def __post_init__(self):
        self.spim_mode = canonical_mode(self.spim_mode)
        self.denoiser_hidden = tuple(int(h) for h in self.denoiser_hidden)
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.block_size < 1:
            raise ValueError("epochs, batch_size and block_size must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.noise_draws < 1:
            raise ValueError("noise_draws must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs and self.stage == 2:
            raise ValueError(f"warmup_epochs {self.warmup_epochs} must lie in [0, epochs={self.epochs}]")

    @property
    def effective_lr(self) -> float:
        """Stage 1 runs at half the configured base rate."""
        return self.learning_rate / 2 if self.stage == 1 else self.learning_rate

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["denoiser_hidden"] = list(self.denoiser_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class ModelArtifacts:
    """Everything a trained model needs; stage-2 stores are None after stage 1."""

    config: TrainConfig
    bands: int
    hfe_gt: ParamStore
    recon: ParamStore
    hfe_meas: ParamStore | None = None
    denoiser: ParamStore | None = None
    losses: dict[str, list[float]] = field(default_factory=dict)
    stage1_config: TrainConfig | None = None

    @property
    def arch(self) -> TrainConfig:
        """Config holding architecture and geometry (stage 1's after stage 2)."""
        return self.stage1_config or self.config

    def hfe_config(self) -> HfeConfig:
        a = self.arch
        return HfeConfig(a.base_channels, a.num_resblocks, self.bands)

    def recon_config(self) -> ReconConfig:
        a = self.arch
        return ReconConfig(self.bands, a.recon_channels, a.recon_blocks, 4 * a.base_channels, a.spim_mode)

    def shift_spec(self) -> ShiftSpec:
        return ShiftSpec(self.arch.step_d, self.arch.center_index)

    def schedule(self):
        return make_schedule(self.config.T, self.config.beta_start, self.config.beta_end)

    def stores(self) -> dict[str, ParamStore]:
        return {n: getattr(self, n) for n in STORE_FILES if getattr(self, n) is not None}

    def identifier(self) -> str:
        h = hashlib.sha256()
        for name, store in self.stores().items():
            h.update(name.encode())
            h.update(store.to_bytes())
        return f"{self.arch.spim_mode}-{h.hexdigest()[:12]}"

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, store in self.stores().items():
            store.save(out / f"{name}.pst")
        meta = {
            "bands": self.bands,
            "config": self.config.to_dict(),
            "stage1_config": self.stage1_config.to_dict() if self.stage1_config else None,
            "losses": self.losses,
        }
        (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, in_dir) -> "ModelArtifacts":
        src = Path(in_dir)
        if not (src / "meta.json").exists():
            raise FileNotFoundError(f"{src} holds no model (meta.json missing)")
        meta = json.loads((src / "meta.json").read_text())
        stores = {n: ParamStore.load(src / f"{n}.pst") for n in STORE_FILES if (src / f"{n}.pst").exists()}
        s1 = meta.get("stage1_config")
        return cls(
            config=TrainConfig.from_dict(meta["config"]),
            bands=int(meta["bands"]),
            losses=meta.get("losses", {}),
            stage1_config=TrainConfig.from_dict(s1) if s1 else None,
            **stores,
        )


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def derive_seed(*keys) -> int:
    """Stable 32-bit seed from a tuple of ints/strings."""
    words = [k if isinstance(k, int) else int.from_bytes(hashlib.sha256(str(k).encode()).digest()[:4], "little") for k in keys]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


@contextlib.contextmanager
def deterministic():
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


def initial_cube(y: Measurement, spec: ShiftSpec, bands: int) -> SpectralCube:
    """Shift-back cube scaled by 2 / L, the inverse of the expected number of
    open mask pixels summed per detector column (Bernoulli(0.5) mask)."""
    h = shift_back(y, spec, bands)
    return SpectralCube(h.data * np.float32(2.0 / bands))


def _samples(data) -> list[Sample]:
    samples = data.load_samples() if isinstance(data, DatasetManifest) else list(data)
    if not samples:
        raise ValueError("dataset is empty")
    bands = {s.cube.bands for s in samples}
    if len(bands) != 1:
        raise ValueError(f"samples disagree on band count: {sorted(bands)}")
    return samples


def _batch(samples: Sequence[Sample], idx: Sequence[int], cfg: TrainConfig, spec: ShiftSpec, batch_key: int):
    """Crop, augment and simulate a batch; returns (H, G) tensors (N, L, h, w)."""
    hs, gs = [], []
    for j, i in enumerate(idx):
        s = samples[i]
        key = derive_seed(batch_key, j)
        cube, mask = crop_block(s.cube, s.mask, cfg.block_size, key)
        if cfg.augment:
            cube, mask = augment(cube, mask, key + 1)
        h = initial_cube(forward_model(cube, mask, spec), spec, cube.bands)
        hs.append(h.data)
        gs.append(cube.data)
    return torch.from_numpy(np.stack(hs)), torch.from_numpy(np.stack(gs))


def _epoch_batches(n: int, cfg: TrainConfig, seed: int) -> list[np.ndarray]:
    """Shuffled scene indices for one epoch, ``epoch_samples`` long (default:
    one pass), cut into batches."""
    rng = np.random.default_rng(seed)
    total = cfg.epoch_samples or n
    order = np.concatenate([rng.permutation(n) for _ in range(-(-total // n))])[:total]
    return [order[i : i + cfg.batch_size] for i in range(0, total, cfg.batch_size)]


def _scheduler(opt: torch.optim.Optimizer, cfg: TrainConfig, total_steps: int):
    if cfg.lr_schedule == "cosine":
        return torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(total_steps, 1))
    return None


def _mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.mean((a - b) ** 2)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _warm_start(art: ModelArtifacts, base: ModelArtifacts) -> None:
    """Fine-tune instead of training from scratch: copy a pretrained model's
    stage-1 weights (the architectures must match)."""
    for name in ("hfe_gt", "recon"):
        dst, src = getattr(art, name), getattr(base, name)
        if list(dst) != list(src) or any(dst[k].shape != src[k].shape for k in dst):
            raise ValueError(f"init_model {name} parameters do not match the configured architecture")
        with torch.no_grad():
            for k in dst:
                dst[k].copy_(src[k])


def train_stage1(data, config: TrainConfig) -> ModelArtifacts:
    """Jointly fit the (H, G) feature extractor and the reconstruction network."""
    if config.stage != 1:
        raise ValueError("train_stage1 needs a stage-1 config")
    samples = _samples(data)
    bands = samples[0].cube.bands
    art = ModelArtifacts(
        config=config,
        bands=bands,
        hfe_gt=ParamStore({}),
        recon=ParamStore({}),
    )
    hcfg, rcfg, spec = art.hfe_config(), art.recon_config(), art.shift_spec()
    art.hfe_gt = init_hfe(derive_seed(config.seed, "hfe_gt"), hcfg, ground_truth=True)
    art.recon = init_recon(derive_seed(config.seed, "recon"), rcfg)
    if config.init_model:
        _warm_start(art, ModelArtifacts.load(config.init_model))
    use_prior = rcfg.mode != "none"
    params = art.recon.parameters() + (art.hfe_gt.parameters() if use_prior else [])
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=config.effective_lr, betas=(config.adam_beta1, config.adam_beta2))
    steps_per_epoch = -(-(config.epoch_samples or len(samples)) // config.batch_size)
    sched = _scheduler(opt, config, config.epochs * steps_per_epoch)

    losses = []
    with deterministic():
        for epoch in range(config.epochs):
            total, count = 0.0, 0
            batches = _epoch_batches(len(samples), config, derive_seed(config.seed, "order", epoch))
            for b, idx in enumerate(batches):
                h, g = _batch(samples, idx, config, spec, derive_seed(config.seed, "crop", epoch, b))
                if use_prior:
                    hf = hfe_forward(torch.cat([h, g], dim=1), art.hfe_gt, hcfg)
                else:
                    hf = torch.zeros(len(idx), rcfg.prior_dim)
                loss = _mse(recon_net(h, hf, art.recon, rcfg), g)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                if sched:
                    sched.step()
                total += loss.item() * len(idx)
                count += len(idx)
            losses.append(total / count)
            log.info("stage1 epoch %d loss %.6g", epoch + 1, losses[-1])
    for p in params:
        p.requires_grad_(False)
    art.losses = {"stage1": losses}
    return art


def _copy_trunk(dst: ParamStore, src: ParamStore) -> None:
    with torch.no_grad():
        for name in dst:
            if not name.startswith("stem."):
                dst[name].copy_(src[name])


def stage2_losses(art: ModelArtifacts, h, g, config: TrainConfig, noise_seed: int, sdp_seed: int, joint: bool):
    """Diffusion loss and, in the joint phase, the reconstruction loss.

    The prior fed to the reconstructor is sampled under ``no_grad``: the
    reconstruction loss never reaches the denoiser or the measurement extractor.
    """
    hcfg, rcfg, schedule = art.hfe_config(), art.recon_config(), art.schedule()
    rng = np.random.default_rng(noise_seed)
    with torch.no_grad():
        x0 = hfe_forward(torch.cat([h, g], dim=1), art.hfe_gt, hcfg)
    hf_m = hfe_forward(h, art.hfe_meas, hcfg)
    reps = config.noise_draws
    t = rng.integers(1, schedule.T + 1, size=len(h) * reps)
    eps = torch.from_numpy(rng.standard_normal((len(t), x0.shape[1]))).to(x0.dtype)
    d_loss = diffusion_loss(x0.repeat_interleave(reps, 0), hf_m.repeat_interleave(reps, 0), t, eps, art.denoiser, schedule)
    if not joint:
        return d_loss, None
    with torch.no_grad():
        sdp = sample_sdp(hf_m, art.denoiser, schedule, sdp_seed)
    return d_loss, _mse(recon_net(h, sdp.values, art.recon, rcfg), g)


def train_stage2(stage1: ModelArtifacts, data, config: TrainConfig) -> ModelArtifacts:
    """Diffusion warm-up, then joint fine-tuning on sampled priors.

    Architecture and geometry come from the stage-1 artifacts; the stage-2
    config supplies epochs, learning rate, schedule and loss weighting.
    """
    if stage1 is None or not stage1.hfe_gt or not stage1.recon:
        raise ValueError("stage-1 artifacts are required")
    if config.stage != 2:
        raise ValueError("train_stage2 needs a stage-2 config")
    samples = _samples(data)
    if samples[0].cube.bands != stage1.bands:
        raise ValueError(f"data has {samples[0].cube.bands} bands, stage-1 model {stage1.bands}")

    arch = stage1.arch
    art = ModelArtifacts(
        config=config,
        bands=stage1.bands,
        hfe_gt=stage1.hfe_gt.clone(),
        recon=stage1.recon.clone(),
        stage1_config=arch,
    )
    hcfg, spec = art.hfe_config(), art.shift_spec()
    art.hfe_meas = init_hfe(derive_seed(config.seed, "hfe_meas"), hcfg, ground_truth=False)
    _copy_trunk(art.hfe_meas, art.hfe_gt)
    art.denoiser = init_denoiser(
        derive_seed(config.seed, "denoiser"), hcfg.feature_dim, arch.denoiser_hidden, zero_out=config.denoiser_zero_out
    )

    diff_params = art.hfe_meas.parameters() + art.denoiser.parameters()
    recon_params = art.recon.parameters()
    for p in diff_params + recon_params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(diff_params + recon_params, lr=config.effective_lr, betas=(config.adam_beta1, config.adam_beta2))
    steps_per_epoch = -(-(config.epoch_samples or len(samples)) // config.batch_size)
    sched = _scheduler(opt, config, config.epochs * steps_per_epoch)

    diff_log, rec_log = [], []
    with deterministic():
        for epoch in range(config.epochs):
            joint = epoch >= config.warmup_epochs
            d_total, r_total, count = 0.0, 0.0, 0
            batches = _epoch_batches(len(samples), config, derive_seed(config.seed, "order2", epoch))
            for b, idx in enumerate(batches):
                h, g = _batch(samples, idx, config, spec, derive_seed(config.seed, "crop2", epoch, b))
                d_loss, r_loss = stage2_losses(
                    art, h, g, config, derive_seed(config.seed, "noise", epoch, b), derive_seed(config.seed, "sdp", epoch, b), joint
                )
                loss = d_loss
                if r_loss is not None:
                    loss = r_loss + config.diffusion_weight * d_loss
                    r_total += r_loss.item() * len(idx)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                if sched:
                    sched.step()
                d_total += d_loss.item() * len(idx)
                count += len(idx)
            diff_log.append(d_total / count)
            rec_log.append(r_total / count if joint else math.nan)
            log.info("stage2 epoch %d diffusion %.6g recon %.6g", epoch + 1, diff_log[-1], rec_log[-1])
    for p in diff_params + recon_params:
        p.requires_grad_(False)
    art.losses = {**stage1.losses, "stage2_diffusion": diff_log, "stage2_recon": rec_log}
    return art


# ---------------------------------------------------------------------------
# Inference and evaluation
# ---------------------------------------------------------------------------


def reconstruct(y: Measurement, mask: CodedMask | None, model: ModelArtifacts, seed: int) -> SpectralCube:
    """Shift back, extract the measurement feature, sample a prior, reconstruct."""
    if model.hfe_meas is None or model.denoiser is None:
        raise ValueError("model lacks stage-2 components; run train-stage2 first")
    spec = model.shift_spec()
    h = initial_cube(y, spec, model.bands)
    if mask is not None and (mask.height, mask.width) != (h.height, h.width):
        raise ValueError(f"mask {mask.height}x{mask.width} inconsistent with {h.height}x{h.width} reconstruction")
    hcfg = model.hfe_config()
    with torch.no_grad():
        hf_m = hfe_meas(h, model.hfe_meas, hcfg)
        sdp = sample_sdp(hf_m, model.denoiser, model.schedule(), seed)
    return recon_forward(h, sdp, model.recon, model.recon_config())


@dataclass
class SceneScore:
    scene: str
    psnr: float
    ssim: float


@dataclass
class EvalReport:
    scenes: list[SceneScore]
    model_id: str
    config_hash: str

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([s.psnr for s in self.scenes]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([s.ssim for s in self.scenes]))

    def to_dict(self) -> dict:
        return {
            "model": self.model_id,
            "config_hash": self.config_hash,
            "scenes": [dataclasses.asdict(s) for s in self.scenes],
            "average": {"psnr": self.mean_psnr, "ssim": self.mean_ssim},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls([SceneScore(**s) for s in d["scenes"]], d["model"], d["config_hash"])

    def to_table(self) -> str:
        lines = [f"{'Scene':<8}{'PSNR':>10}{'SSIM':>10}", "-" * 28]
        for s in self.scenes:
            lines.append(f"{s.scene:<8}{s.psnr:>10.2f}{s.ssim:>10.4f}")
        lines.append("-" * 28)
        lines.append(f"{'Avg':<8}{self.mean_psnr:>10.2f}{self.mean_ssim:>10.4f}")
        return "\n".join(lines) + "\n"

    def save(self, out_dir, stem: str = "report") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(self.to_json())
        (out / f"{stem}.txt").write_text(self.to_table())


Reconstructor = Callable[[Measurement, CodedMask, int, int], SpectralCube]


def evaluate(model: ModelArtifacts | None, data, seed: int, reconstructor: Reconstructor | None = None) -> EvalReport:
    """Score every test scene; ``reconstructor(y, mask, scene_index, seed)``
    replaces the model's own inference when given."""
    samples = _samples(data)
    if model is None and reconstructor is None:
        raise ValueError("evaluate needs a model or a reconstructor")
    spec = model.shift_spec() if model is not None else ShiftSpec()
    scores = []
    for i, s in enumerate(samples):
        y = forward_model(s.cube, s.mask, spec)
        scene_seed = derive_seed(seed, "scene", i)
        if reconstructor is not None:
            rec = reconstructor(y, s.mask, i, scene_seed)
        else:
            rec = reconstruct(y, s.mask, model, scene_seed)
        scores.append(SceneScore(str(i + 1), psnr(rec, s.cube), ssim(rec, s.cube)))
    model_id = model.identifier() if model is not None else "external"
    config_hash = model.config.digest() if model is not None else "-"
    return EvalReport(scores, model_id, config_hash)
