import numpy as np
import pytest
import torch

from sdp_hsi.spectral_data import SpectralCube, synthesize_scene
from sdp_hsi.spim import MODES, ReconConfig, canonical_mode, init_recon, recon_forward, recon_net, spim_inject, spim_residual


def _rand(*shape, seed=0):
    return torch.from_numpy(np.random.default_rng(seed).standard_normal(shape))


def test_hand_example():
    f = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])
    sdp = torch.tensor([1.0])
    out = spim_inject(f, sdp, torch.tensor([[0.5]]), torch.tensor([[1.0]]), "both")
    assert out.tolist() == [[[2.5, 4.0], [5.5, 7.0]]]


def test_zero_projections_are_bit_exact_identity():
    f = _rand(2, 6, 5, 5)
    z = torch.zeros(6, 4, dtype=torch.float64)
    for mode in MODES:
        assert torch.equal(spim_inject(f, _rand(2, 4, seed=1), z, z, mode), f)


@pytest.mark.parametrize("seed", range(5))
def test_mode_decomposition_exact(seed):
    f, sdp = _rand(3, 4, 4, seed=seed), _rand(5, seed=seed + 10)
    w1, w2 = _rand(3, 5, seed=seed + 20), _rand(3, 5, seed=seed + 30)
    r = {m: spim_residual(f, sdp, w1, w2, m) for m in MODES}
    assert torch.equal(r["both"], r["mul_only"] + r["add_only"])
    # Injected form, on dyadic values where float addition is exact.
    f = torch.randint(-8, 8, (3, 4, 4)).double() / 4
    sdp = torch.randint(-4, 4, (5,)).double() / 2
    w1 = torch.randint(-4, 4, (3, 5)).double() / 8
    w2 = torch.randint(-4, 4, (3, 5)).double() / 8
    delta = {m: spim_inject(f, sdp, w1, w2, m) - f for m in MODES}
    assert torch.equal(delta["both"], delta["mul_only"] + delta["add_only"])
    assert torch.equal(delta["none"], torch.zeros_like(f))


def test_affine_in_prior():
    f = _rand(4, 3, 3)
    w1, w2 = _rand(4, 6, seed=1), _rand(4, 6, seed=2)
    s1, s2, a = _rand(6, seed=3), _rand(6, seed=4), 1.7
    d = lambda s: spim_inject(f, s, w1, w2) - f  # noqa: E731
    assert torch.allclose(d(a * s1 + s2), a * d(s1) + d(s2), atol=1e-6)


def test_mode_aliases_and_errors():
    assert canonical_mode("mul") == "mul_only" and canonical_mode("add") == "add_only"
    with pytest.raises(ValueError):
        canonical_mode("gate")
    f, w = torch.zeros(3, 2, 2), torch.zeros(3, 4)
    with pytest.raises(ValueError, match="prior length"):
        spim_inject(f, torch.zeros(5), w, w)
    with pytest.raises(ValueError, match="channels"):
        spim_inject(torch.zeros(2, 2, 2), torch.zeros(4), w, w)
    with pytest.raises(ValueError):
        spim_inject(f, torch.zeros(4), w, torch.zeros(3, 5))


CFG = ReconConfig(bands=8, channels=8, num_blocks=2, prior_dim=16)


def test_recon_shapes_and_zero_spim():
    params = init_recon(0, CFG)
    assert all(torch.equal(params[k], torch.zeros_like(params[k])) for k in params if k.startswith("spim"))
    cube = synthesize_scene(0, 16, 20, 8)
    out = recon_forward(cube, torch.randn(16), params, CFG)
    assert out.data.shape == (8, 16, 20)
    with pytest.raises(ValueError):
        recon_forward(synthesize_scene(0, 16, 16, 9), torch.zeros(16), params, CFG)


def test_mode_none_ignores_prior():
    cfg = ReconConfig(8, 8, 2, 16, "none")
    params = init_recon(0, cfg)
    with torch.no_grad():
        for k in params:
            if k.startswith("spim"):
                params[k].normal_()
    cube = synthesize_scene(2, 16, 16, 8)
    a = recon_forward(cube, torch.randn(16), params, cfg)
    b = recon_forward(cube, torch.randn(16), params, cfg)
    assert a == b


def test_prior_changes_output_when_active():
    params = init_recon(0, CFG)
    with torch.no_grad():
        params["spim0.w1"].normal_()
    cube = synthesize_scene(2, 16, 16, 8)
    assert recon_forward(cube, torch.randn(16), params, CFG) != recon_forward(cube, torch.randn(16), params, CFG)


def test_batched_prior():
    params = init_recon(1, CFG)
    with torch.no_grad():
        params["spim1.w2"].normal_()
    x, p = torch.rand(2, 8, 16, 16), torch.randn(2, 16)
    batch = recon_net(x, p, params, CFG)
    assert torch.allclose(batch[1], recon_net(x[1], p[1], params, CFG), atol=1e-5)


def test_recon_gradients_include_projections(grad_reports):
    rep = grad_reports["recon_forward"]
    assert rep.passed(1e-4), rep.errors
    assert {"spim0.w1", "spim0.w2", "sdp"} <= set(rep.errors)
