"""Acceptance criteria 1-11. Each test records one PASS/FAIL line, printed in
the terminal summary (see conftest.py)."""

import contextlib
import time

import numpy as np
import pytest
import torch

from sdp_hsi.checks import gradient_suite
from sdp_hsi.diffusion import make_schedule, posterior_step, q_sample, sample_sdp, init_denoiser
from sdp_hsi.experiments import TOY_BANDS, TOY_SCENES, TOY_SIZE, TOY_TEST, run_toy, toy_dataset
from sdp_hsi.hfe import HfeConfig, hfe_gt, init_hfe
from sdp_hsi.metrics import psnr, ssim
from sdp_hsi.optics import ShiftSpec, forward_model, shift_back
from sdp_hsi.pipeline import STORE_FILES
from sdp_hsi.spectral_data import CodedMask, SpectralCube, synthesize_scene
from sdp_hsi.spim import MODES, spim_inject, spim_residual

from test_diffusion import planted_oracle
from test_metrics import checkerboard_case, direct_ssim

RESULTS: dict[int, str] = {}
SEEDS = (0, 1, 2)


@contextlib.contextmanager
def criterion(n: int, budget_s: float, already_spent: float = 0.0):
    """Records PASS/FAIL for criterion ``n``. The block plus ``already_spent``
    (fixture time measured elsewhere) must finish within budget."""
    start = time.perf_counter() - already_spent
    notes: list[str] = []
    try:
        yield notes
        elapsed = time.perf_counter() - start
        assert elapsed < budget_s, f"took {elapsed:.1f} s, budget {budget_s:.0f} s"
    except BaseException as exc:
        RESULTS[n] = f"FAIL  criterion {n:>2}: {exc}".splitlines()[0]
        raise
    RESULTS[n] = f"PASS  criterion {n:>2} ({elapsed:.1f} s){': ' + '; '.join(notes) if notes else ''}"


def test_c01_schedule_identity():
    with criterion(1, 1.0) as notes:
        s = make_schedule()
        coef, var = 1.0, 0.0
        for t in range(1, s.T + 1):
            coef *= np.sqrt(1 - s.beta[t - 1])
            var = (1 - s.beta[t - 1]) * var + s.beta[t - 1]
            assert abs(coef - np.sqrt(s.alpha_bar[t - 1])) < 1e-12
            assert abs(var - (1 - s.alpha_bar[t - 1])) < 1e-12
        assert abs(s.alpha_bar[-1] - 0.00166517) < 1e-5
        notes.append(f"alpha_bar_4 = {s.alpha_bar[-1]:.8f}")


def test_c02_posterior_mean_identity():
    with criterion(2, 1.0) as notes:
        s = make_schedule()
        ab0 = s.alpha_bar_with_zero
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(100):
            t = int(rng.integers(1, s.T + 1))
            x0, eps = rng.standard_normal(8), rng.standard_normal(8)
            x_t = q_sample(x0, t, eps, s)
            mu = posterior_step(x_t, eps, t, s, z=np.zeros(8))
            ref = (np.sqrt(ab0[t - 1]) * s.beta[t - 1] / (1 - ab0[t])) * x0 + (
                np.sqrt(1 - s.beta[t - 1]) * (1 - ab0[t - 1]) / (1 - ab0[t])
            ) * x_t
            worst = max(worst, float(np.max(np.abs(mu - ref))))
        assert worst < 1e-10
        assert s.sigma2(1) == 0.0
        notes.append(f"max deviation {worst:.1e}")


def test_c03_plant_and_recover():
    with criterion(3, 1.0) as notes:
        s = make_schedule()
        x0 = torch.from_numpy(np.random.default_rng(3).standard_normal(32))
        out = sample_sdp(torch.zeros(32, dtype=torch.float64), None, s, 0, predictor=planted_oracle(x0, s))
        err = torch.max(torch.abs(out.values - x0)).item()
        assert err < 1e-6
        notes.append(f"max error {err:.1e}")


def test_c04_geometry():
    with criterion(4, 5.0):
        spec = ShiftSpec(2)
        y = forward_model(SpectralCube(np.random.default_rng(0).random((28, 256, 256))), CodedMask(np.ones((256, 256))), spec)
        assert (y.height, y.width_m) == (256, 310)
        assert shift_back(y, spec, 28).data.shape == (28, 256, 256)
        cube = SpectralCube(np.array([[[1, 2]], [[3, 4]]], dtype=np.float32))
        y = forward_model(cube, CodedMask(np.ones((1, 2))), ShiftSpec(1))
        assert y.data.tolist() == [[1, 5, 4]]
        assert shift_back(y, ShiftSpec(1), 2).data.tolist() == [[[1, 5]], [[5, 4]]]


def test_c05_spim_contract():
    with criterion(5, 1.0):
        rng = np.random.default_rng(5)
        f = torch.from_numpy(rng.standard_normal((2, 6, 5, 5)))
        sdp = torch.from_numpy(rng.standard_normal((2, 4)))
        zero = torch.zeros(6, 4, dtype=torch.float64)
        for mode in MODES:
            assert torch.equal(spim_inject(f, sdp, zero, zero, mode), f)
        w1, w2 = (torch.from_numpy(rng.standard_normal((6, 4))) for _ in range(2))
        r = {m: spim_residual(f, sdp, w1, w2, m) for m in MODES}
        assert torch.equal(r["both"], r["mul_only"] + r["add_only"])
        hand = spim_inject(torch.tensor([[[1.0, 2.0], [3.0, 4.0]]]), torch.tensor([1.0]), torch.tensor([[0.5]]), torch.tensor([[1.0]]))
        assert hand.tolist() == [[[2.5, 4.0], [5.5, 7.0]]]


def test_c06_gradient_checks():
    with criterion(6, 120.0) as notes:
        reports = gradient_suite(seed=0, epsilon=1e-5)
        failed = {k: r.max_error for k, r in reports.items() if not r.passed(1e-4)}
        assert not failed, f"failed: {failed}"
        assert {"hfe_gt", "hfe_meas", "denoiser", "recon_forward"} <= set(reports)
        assert {"spim0.w1", "spim0.w2"} <= set(reports["recon_forward"].errors)
        notes.append(f"{len(reports)} components, worst {max(r.max_error for r in reports.values()):.1e}")


def test_c07_metric_oracles():
    with criterion(7, 10.0):
        a = np.zeros((2, 4, 4))
        assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-12)
        b = np.full((1, 10, 10), 0.5)
        c = b.copy()
        c[0, :5] += 0.01
        c[0, 5:] -= 0.01
        assert psnr(b, c) == pytest.approx(40.0, abs=1e-9)
        x = np.random.default_rng(1).random((3, 16, 16))
        assert abs(ssim(x, x) - 1.0) < 1e-12
        p, q = checkerboard_case()
        assert abs(ssim(p, q) - direct_ssim(p, q)) < 1e-9


def test_c08_resolution_independence():
    with criterion(8, 10.0):
        cfg = HfeConfig(base_channels=8, num_resblocks=4, input_bands=8)
        params = init_hfe(0, cfg, ground_truth=True)
        for size in (16, 32, 64):
            cube = synthesize_scene(size, size, size, 8)
            assert hfe_gt(cube, cube, params, cfg).values.shape == (4 * 8,)


# ---------------------------------------------------------------------------
# Toy end-to-end runs (criteria 9-11)
# ---------------------------------------------------------------------------


def _timed_runs(pairs, data, root):
    start = time.perf_counter()
    runs = {(seed, mode): run_toy(seed, mode, data, root / f"{mode}{seed}") for seed, mode in pairs}
    return runs, time.perf_counter() - start, root


@pytest.fixture(scope="module")
def toy_data():
    return toy_dataset(0)


@pytest.fixture(scope="module")
def toy_runs(toy_data, tmp_path_factory):
    return _timed_runs([(s, m) for s in SEEDS for m in ("both", "none")], toy_data, tmp_path_factory.mktemp("toy"))


@pytest.fixture(scope="module")
def toy_repeat(toy_data, tmp_path_factory):
    return _timed_runs([(0, "both")], toy_data, tmp_path_factory.mktemp("toy_repeat"))


@pytest.fixture(scope="module")
def ablation_runs(toy_data, tmp_path_factory):
    return _timed_runs([(0, m) for m in ("mul", "add", "none")], toy_data, tmp_path_factory.mktemp("ablation"))


def test_c09_toy_trend(toy_data, toy_runs):
    runs, spent, _ = toy_runs
    with criterion(9, 15 * 60, spent) as notes:
        train, test = toy_data
        assert (len(train), len(test)) == (TOY_SCENES - TOY_TEST, TOY_TEST)
        assert test[0].cube.data.shape == (TOY_BANDS, TOY_SIZE, TOY_SIZE)
        assert all(r.model.arch.base_channels == 8 for r in runs.values())
        deltas = [runs[(s, "both")].report.mean_psnr - runs[(s, "none")].report.mean_psnr for s in SEEDS]
        notes.append("PSNR deltas " + ", ".join(f"{d:+.3f}" for d in deltas) + " dB")
        assert np.median(deltas) > 0, f"median delta {np.median(deltas):+.3f} dB"
        assert min(deltas) >= -0.1, f"worst delta {min(deltas):+.3f} dB"


def _differing_files(a, b) -> list[str]:
    names = [f"{n}.pst" for n in STORE_FILES] + ["meta.json", "report.json", "report.txt"]
    return [n for n in names if (a / n).read_bytes() != (b / n).read_bytes()]


def test_c10_determinism(toy_runs, toy_repeat):
    first, spent_first, root_a = toy_runs
    again, spent_again, root_b = toy_repeat
    # Runtime counts against the criterion-9 budget.
    with criterion(10, 15 * 60, spent_first + spent_again) as notes:
        a, b = first[(0, "both")], again[(0, "both")]
        assert _differing_files(root_a / "both0", root_b / "both0") == []
        assert a.report.to_json() == b.report.to_json()
        cond = torch.randn(4, 32, generator=torch.Generator().manual_seed(0))
        params = init_denoiser(0, 32, hidden=(64,))
        assert torch.equal(sample_sdp(cond, params, make_schedule(), 7).values, sample_sdp(cond, params, make_schedule(), 7).values)
        notes.append("seed-0 rerun bit-identical (parameters, meta, report)")


def test_c11_ablation_modes(toy_runs, ablation_runs):
    runs, _, root_a = toy_runs
    ablation, spent, root_b = ablation_runs
    with criterion(11, 15 * 60, spent) as notes:
        reports = {
            "both": runs[(0, "both")].report,
            "mul_only": ablation[(0, "mul")].report,
            "add_only": ablation[(0, "add")].report,
            "none": ablation[(0, "none")].report,
        }
        assert {r.mode for r in ablation.values()} == {"mul_only", "add_only", "none"}
        assert len({r.to_json() for r in reports.values()}) == 4
        assert reports["none"].to_json() == runs[(0, "none")].report.to_json()
        assert _differing_files(root_a / "none0", root_b / "none0") == []
        notes.append(", ".join(f"{m} {r.mean_psnr:.3f}" for m, r in reports.items()) + " dB")
