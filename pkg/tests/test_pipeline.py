import json
import math

import numpy as np
import pytest
import torch

from sdp_hsi.optics import Measurement, ShiftSpec, forward_model
from sdp_hsi.pipeline import (
    EvalReport,
    ModelArtifacts,
    SceneScore,
    TrainConfig,
    _batch,
    evaluate,
    reconstruct,
    stage2_losses,
    train_stage1,
    train_stage2,
)
from sdp_hsi.spectral_data import Sample, random_mask, synthesize_scene

ARCH = dict(block_size=16, batch_size=2, base_channels=2, num_resblocks=2, recon_channels=8, recon_blocks=2, denoiser_hidden=(16,))


def toy(n=4, size=16, bands=8):
    mask = random_mask(7, size, size)
    return [Sample(synthesize_scene(50 + i, size, size, bands), mask, i) for i in range(n)]


def cfg(stage, **kw):
    return TrainConfig(stage=stage, **{**ARCH, **kw})


@pytest.fixture(scope="module")
def models():
    data = toy()
    s1 = train_stage1(data, cfg(1, epochs=3, learning_rate=2e-3))
    s2 = train_stage2(s1, data, cfg(2, epochs=3, warmup_epochs=1, learning_rate=1e-3))
    return data, s1, s2


class TestStage1:
    def test_overfits_single_scene(self):
        data = toy(1)
        # Default architecture; only the crop size is shrunk to the scene.
        config = TrainConfig(stage=1, block_size=16, epochs=200, batch_size=1, augment=False, learning_rate=4e-3, lr_schedule="cosine")
        art = train_stage1(data, config)
        assert art.losses["stage1"][-1] < 1e-3

    def test_median_loss_non_increasing(self):
        data = toy()
        curves = np.array([train_stage1(data, cfg(1, epochs=8, learning_rate=2e-3, seed=s)).losses["stage1"] for s in range(3)])
        assert np.all(np.diff(np.median(curves, axis=0)) <= 0)

    def test_bit_identical_reruns(self, models, tmp_path):
        data, s1, _ = models
        again = train_stage1(data, s1.config)
        s1.save(tmp_path / "a")
        again.save(tmp_path / "b")
        for f in ("hfe_gt.pst", "recon.pst", "meta.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_none_mode_leaves_extractor_untouched(self):
        data = toy(2)
        art = train_stage1(data, cfg(1, epochs=1, spim_mode="none"))
        fresh = train_stage1(data, cfg(1, epochs=0, spim_mode="none"))
        assert art.hfe_gt.equal(fresh.hfe_gt)
        assert not art.recon.equal(fresh.recon)


class TestStage2:
    def test_warmup_fits_diffusion_target(self):
        data = toy(1)
        s1 = train_stage1(data, cfg(1, epochs=1, denoiser_hidden=(256, 256)))
        config = cfg(2, epochs=500, warmup_epochs=500, batch_size=1, augment=False, learning_rate=1e-3, noise_draws=16)
        art = train_stage2(s1, data, config)
        assert art.losses["stage2_diffusion"][-1] < 0.05

    def test_warmup_only_keeps_reconstructor(self, models):
        data, s1, _ = models
        art = train_stage2(s1, data, cfg(2, epochs=2, warmup_epochs=2))
        assert art.recon.equal(s1.recon)
        assert art.hfe_gt.equal(s1.hfe_gt)
        assert all(math.isnan(v) for v in art.losses["stage2_recon"])

    def test_recon_loss_does_not_reach_prior_branch(self, models):
        data, _, s2 = models
        h, g = _batch(data, [0, 1], s2.config, s2.shift_spec(), 3)
        stores = [s2.hfe_meas, s2.denoiser, s2.recon]
        for store in stores:
            store.requires_grad_(True)
        try:
            d_loss, r_loss = stage2_losses(s2, h, g, s2.config, 1, 2, joint=True)
            prior_params = s2.hfe_meas.parameters() + s2.denoiser.parameters()
            grads = torch.autograd.grad(r_loss, prior_params + s2.recon.parameters(), allow_unused=True)
            assert all(gr is None for gr in grads[: len(prior_params)])
            assert any(gr is not None and gr.abs().sum() > 0 for gr in grads[len(prior_params) :])
            assert all(gr is not None for gr in torch.autograd.grad(d_loss, prior_params, allow_unused=True))
        finally:
            for store in stores:
                store.requires_grad_(False)

    def test_joint_phase_trains_reconstructor(self, models):
        _, s1, s2 = models
        assert not s2.recon.equal(s1.recon)
        assert s2.hfe_gt.equal(s1.hfe_gt)
        assert np.isfinite(s2.losses["stage2_recon"][-1])

    def test_requires_stage1(self, models):
        data, s1, _ = models
        with pytest.raises(ValueError):
            train_stage2(s1, data, cfg(1))
        with pytest.raises(ValueError, match="bands"):
            train_stage2(s1, toy(2, bands=9), cfg(2, epochs=1, warmup_epochs=1))


class TestInference:
    def test_full_size_geometry(self):
        data = [Sample(synthesize_scene(0, 16, 16, 28), random_mask(0, 16, 16), 0)]
        s1 = train_stage1(data, cfg(1, epochs=0))
        s2 = train_stage2(s1, data, cfg(2, epochs=0, warmup_epochs=0))
        y = Measurement(np.random.default_rng(0).random((256, 310)).astype(np.float32))
        assert reconstruct(y, None, s2, 0).data.shape == (28, 256, 256)
        with pytest.raises(ValueError):
            reconstruct(y, random_mask(0, 16, 16), s2, 0)

    def test_seed_controls_prior(self, models):
        data, _, s2 = models
        y = forward_model(data[0].cube, data[0].mask, s2.shift_spec())
        a, b = reconstruct(y, None, s2, 0), reconstruct(y, None, s2, 0)
        assert np.array_equal(a.data, b.data)

    def test_none_mode_ignores_seed(self):
        data = toy(2)
        s1 = train_stage1(data, cfg(1, epochs=1, spim_mode="none"))
        s2 = train_stage2(s1, data, cfg(2, epochs=2, warmup_epochs=1))
        y = forward_model(data[0].cube, data[0].mask, s2.shift_spec())
        assert np.array_equal(reconstruct(y, None, s2, 0).data, reconstruct(y, None, s2, 99).data)

    def test_stage1_model_cannot_reconstruct(self, models):
        data, s1, _ = models
        with pytest.raises(ValueError, match="stage-2"):
            reconstruct(forward_model(data[0].cube, data[0].mask, ShiftSpec()), None, s1, 0)


class TestEvaluate:
    def test_oracle_reconstructor(self):
        data = toy(3)
        rep = evaluate(None, data, 0, reconstructor=lambda y, mask, i, seed: data[i].cube)
        assert all(s.psnr == math.inf for s in rep.scenes)
        assert all(abs(s.ssim - 1) < 1e-12 for s in rep.scenes)

    def test_averages_and_repeatability(self, models):
        data, _, s2 = models
        rep = evaluate(s2, data, 5)
        assert abs(rep.mean_psnr - np.mean([s.psnr for s in rep.scenes])) < 1e-9
        assert abs(rep.mean_ssim - np.mean([s.ssim for s in rep.scenes])) < 1e-9
        assert rep.to_json() == evaluate(s2, data, 5).to_json()
        assert rep.model_id == s2.identifier()

    def test_needs_model_or_reconstructor(self):
        with pytest.raises(ValueError):
            evaluate(None, toy(1), 0)


def test_report_json_and_table(tmp_path):
    rep = EvalReport([SceneScore("1", 30.0, 0.9), SceneScore("2", math.inf, 1.0)], "m", "h")
    rep.save(tmp_path)
    back = EvalReport.from_dict(json.loads((tmp_path / "report.json").read_text()))
    assert back == rep
    table = (tmp_path / "report.txt").read_text().splitlines()
    assert table[0].split() == ["Scene", "PSNR", "SSIM"]
    assert table[-1].split()[0] == "Avg"
    assert len(table) == 6


def test_artifacts_round_trip(models, tmp_path):
    _, _, s2 = models
    s2.save(tmp_path)
    back = ModelArtifacts.load(tmp_path)
    assert back.identifier() == s2.identifier()
    assert back.stage1_config == s2.stage1_config
    with pytest.raises(FileNotFoundError):
        ModelArtifacts.load(tmp_path / "nothing")


class TestConfig:
    def test_validation(self):
        for bad in (dict(stage=3), dict(learning_rate=0), dict(batch_size=0), dict(spim_mode="gate"), dict(lr_schedule="step")):
            with pytest.raises(ValueError):
                TrainConfig(**bad)
        with pytest.raises(ValueError):
            TrainConfig(stage=2, epochs=3, warmup_epochs=4)
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_dict({"epochz": 1})

    def test_stage1_half_rate_and_digest(self):
        assert TrainConfig(stage=1, learning_rate=1e-4).effective_lr == 5e-5
        assert TrainConfig(stage=2, learning_rate=1e-4).effective_lr == 1e-4
        assert TrainConfig().digest() == TrainConfig.from_dict(TrainConfig().to_dict()).digest()
        assert TrainConfig().digest() != TrainConfig(seed=1).digest()


def test_warm_start_from_pretrained(models, tmp_path):
    data, s1, _ = models
    s1.save(tmp_path / "base")
    fresh = train_stage1(data, cfg(1, epochs=0, seed=9, init_model=str(tmp_path / "base")))
    assert fresh.recon.equal(s1.recon) and fresh.hfe_gt.equal(s1.hfe_gt)
    with pytest.raises(ValueError, match="match"):
        train_stage1(data, cfg(1, epochs=0, recon_channels=4, init_model=str(tmp_path / "base")))
