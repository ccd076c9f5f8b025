"""Latent backbone checks: schedule math, samplers, guidance, persistence.

Forward-noising coefficients and the reverse-step recursion are recomputed
here from the published update equations with independent code, stub
predictors with closed-form flow integrals check the Euler sampler end to
end, and seeded sampling is held to bitwise reproducibility.
"""
import math

import numpy as np
import pytest
import torch

from phasectl.backbone import (D_LATENT, N_BLOCKS, N_TOKENS, T_STEPS,
                               DenoiserNet, GenerativeBackbone, NoiseSchedule,
                               time_features)
from phasectl.corpus import CLASS_NAMES
from phasectl.errors import (ConfigInvalid, HookShapeError, ModelNotReady,
                             ShapeError, StepOutOfRange)


def _reference_alpha_bars() -> np.ndarray:
    """Independent schedule: cumulative products of (1 - beta_t)."""
    betas = np.linspace(1e-4, 2e-2, T_STEPS, dtype=np.float64)
    return np.concatenate([[1.0], np.cumprod(1.0 - betas)])


class _StubNet:
    """Deterministic predictor standing in for the trained denoiser."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = []

    def __call__(self, z, t, cond, hooks=None):
        self.calls.append((t.clone(), cond.clone()))
        return self.fn(z, t, cond)


def _stub_backbone(kind, fn) -> GenerativeBackbone:
    bb = GenerativeBackbone(kind=kind, class_names=list(CLASS_NAMES))
    bb.net = _StubNet(fn)
    bb.frozen = True
    return bb


def _frozen_net(seed=0, n_classes=len(CLASS_NAMES)) -> DenoiserNet:
    torch.manual_seed(seed)
    net = DenoiserNet(n_classes)
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def _real_backbone(kind="diffusion", seed=0) -> GenerativeBackbone:
    bb = GenerativeBackbone(kind=kind, class_names=list(CLASS_NAMES))
    bb.net = _frozen_net(seed)
    bb.frozen = True
    return bb


# -- noise schedule -----------------------------------------------------------


def test_alpha_bar_matches_independent_cumprod():
    sched = NoiseSchedule()
    ref = _reference_alpha_bars()
    for t in range(T_STEPS + 1):
        assert sched.alpha_bar(t).item() == pytest.approx(ref[t], abs=1e-12)
    assert sched.alpha_bar(0).item() == 1.0


def test_q_sample_closed_form():
    gen = torch.Generator().manual_seed(5)
    z0 = torch.randn((3, N_TOKENS, D_LATENT), generator=gen)
    eps = torch.randn((3, N_TOKENS, D_LATENT), generator=gen)
    sched = NoiseSchedule()
    ref = _reference_alpha_bars()
    for t in (1, 37, 100):
        want = math.sqrt(ref[t]) * z0.double() \
            + math.sqrt(1.0 - ref[t]) * eps.double()
        got = sched.q_sample(z0, t, eps)
        # inputs are float32, so roundoff is ~1e-7 per elementary op
        assert torch.allclose(got.double(), want, rtol=1e-5, atol=1e-5)


def test_q_sample_vector_steps():
    gen = torch.Generator().manual_seed(6)
    z0 = torch.randn((3, N_TOKENS, D_LATENT), generator=gen)
    eps = torch.randn((3, N_TOKENS, D_LATENT), generator=gen)
    t = torch.tensor([1, 50, 100])
    got = NoiseSchedule().q_sample(z0, t, eps)
    ref = _reference_alpha_bars()
    for i, ti in enumerate(t.tolist()):
        want = math.sqrt(ref[ti]) * z0[i].double() \
            + math.sqrt(1.0 - ref[ti]) * eps[i].double()
        assert torch.allclose(got[i].double(), want, rtol=1e-5, atol=1e-5)


def test_schedule_rejects_out_of_range_steps():
    sched = NoiseSchedule()
    z = torch.zeros((1, N_TOKENS, D_LATENT))
    with pytest.raises(StepOutOfRange):
        sched.alpha_bar(-1)
    with pytest.raises(StepOutOfRange):
        sched.alpha_bar(T_STEPS + 1)
    with pytest.raises(StepOutOfRange):
        sched.q_sample(z, T_STEPS + 1, z)
    with pytest.raises(ConfigInvalid):
        NoiseSchedule(t_steps=0)


def test_time_features_closed_form():
    t = torch.tensor([0.3, 0.7], dtype=torch.float64)
    dim = 32
    half = dim // 2
    freqs = np.exp(np.arange(half) * (-math.log(200.0) / (half - 1)))
    ang = t.numpy()[:, None] * 200.0 * freqs
    want = np.concatenate([np.cos(ang), np.sin(ang)], axis=-1)
    got = time_features(t, dim=dim).numpy()
    assert got.shape == (2, dim)
    assert np.allclose(got, want, atol=1e-12)


# -- denoiser input validation and hooks --------------------------------------


def test_denoiser_rejects_bad_latent_shape():
    net = _frozen_net()
    t = torch.tensor([0.5])
    cond = torch.tensor([0])
    for shape in ((1, N_TOKENS + 1, D_LATENT), (1, N_TOKENS, D_LATENT - 1),
                  (N_TOKENS, D_LATENT)):
        with pytest.raises(ShapeError):
            net(torch.zeros(shape), t, cond)


class _Hooks:
    def __init__(self, residuals=None, shift=None):
        self._res = residuals
        self._shift = shift

    def block_residuals(self, z, t, cond):
        return self._res(z) if self._res else None

    def input_shift(self, z, t, cond):
        return self._shift(z) if self._shift else None


def test_hook_residual_count_and_shape_validated():
    net = _frozen_net()
    z = torch.randn((2, N_TOKENS, D_LATENT))
    t, cond = torch.tensor([0.5, 0.5]), torch.tensor([0, 1])
    with pytest.raises(HookShapeError):
        net(z, t, cond,
            hooks=_Hooks(residuals=lambda z: [torch.zeros_like(z)] * 3))
    bad = [torch.zeros_like(z)] * (N_BLOCKS - 1) \
        + [torch.zeros((2, N_TOKENS, D_LATENT + 1))]
    with pytest.raises(HookShapeError):
        net(z, t, cond, hooks=_Hooks(residuals=lambda z: bad))
    with pytest.raises(HookShapeError):
        net(z, t, cond,
            hooks=_Hooks(shift=lambda z: torch.zeros((2, 1, D_LATENT))))


def test_zero_hooks_are_bitwise_identity():
    net = _frozen_net()
    z = torch.randn((3, N_TOKENS, D_LATENT),
                    generator=torch.Generator().manual_seed(2))
    t, cond = torch.tensor([0.2, 0.5, 0.9]), torch.tensor([0, 1, 2])
    plain = net(z, t, cond)
    hooked = net(z, t, cond, hooks=_Hooks(
        residuals=lambda z: [torch.zeros_like(z)] * N_BLOCKS,
        shift=lambda z: torch.zeros_like(z)))
    assert torch.equal(plain, hooked)
    as_callable = net(z, t, cond,
                      hooks=lambda z, t, c: [torch.zeros_like(z)] * N_BLOCKS)
    assert torch.equal(plain, as_callable)


# -- reverse samplers against independent recursions --------------------------


def test_ddpm_sampler_matches_independent_recursion():
    """eps_hat = 0.1 * z makes every reverse step a known affine map."""
    bb = _stub_backbone("diffusion", lambda z, t, c: 0.1 * z)
    n, seed, steps = 2, 9, 17
    got = bb.sample(n, 0, seed=seed, steps=steps)

    ref_ab = _reference_alpha_bars()
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn((n, N_TOKENS, D_LATENT), generator=gen).double()
    ts = torch.linspace(T_STEPS, 1, steps).round().long()
    ts = torch.unique(ts, sorted=True).flip(0).tolist()
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        ab_t, ab_prev = ref_ab[t], ref_ab[t_prev]
        eps_hat = 0.1 * z
        z0_hat = (z - math.sqrt(1 - ab_t) * eps_hat) / math.sqrt(ab_t)
        alpha_eff = ab_t / ab_prev
        beta_eff = 1 - alpha_eff
        mean = (math.sqrt(ab_prev) * beta_eff / (1 - ab_t)) * z0_hat \
            + (math.sqrt(alpha_eff) * (1 - ab_prev) / (1 - ab_t)) * z
        if t_prev > 0:
            var = beta_eff * (1 - ab_prev) / (1 - ab_t)
            noise = torch.randn((n, N_TOKENS, D_LATENT),
                                generator=gen).double()
            z = mean + math.sqrt(var) * noise
        else:
            z = mean
    assert torch.allclose(got.double(), z, rtol=1e-4, atol=1e-5)


def test_ddpm_final_step_is_noise_free():
    """With eps_hat == 0 and steps == 1 the single jump t=T -> 0 returns
    exactly z_T / sqrt(alpha_bar_T): the posterior mean, no added noise."""
    bb = _stub_backbone("diffusion", lambda z, t, c: torch.zeros_like(z))
    seed = 3
    got = bb.sample(1, 0, seed=seed, steps=1)
    z = torch.randn((1, N_TOKENS, D_LATENT),
                    generator=torch.Generator().manual_seed(seed))
    want = z.double() / math.sqrt(_reference_alpha_bars()[T_STEPS])
    assert torch.allclose(got.double(), want, rtol=1e-5, atol=1e-6)


def test_flow_euler_integrates_constant_velocity():
    c = torch.randn((1, N_TOKENS, D_LATENT),
                    generator=torch.Generator().manual_seed(11))
    bb = _stub_backbone("flow", lambda z, t, cond: c.expand_as(z))
    seed, steps = 4, 25
    got = bb.sample(2, 1, seed=seed, steps=steps)
    z = torch.randn((2, N_TOKENS, D_LATENT),
                    generator=torch.Generator().manual_seed(seed))
    # dz/dt = c integrated from t=1 down to t=0 subtracts c exactly
    assert torch.allclose(got, z - c, rtol=1e-5, atol=1e-6)


def test_flow_euler_left_endpoint_rule():
    a = torch.randn((1, N_TOKENS, D_LATENT),
                    generator=torch.Generator().manual_seed(12))
    bb = _stub_backbone("flow",
                        lambda z, t, cond: t.view(-1, 1, 1) * a.expand_as(z))
    seed, steps = 7, 20
    got = bb.sample(1, 2, seed=seed, steps=steps)
    ts = torch.linspace(1.0, 0.0, steps + 1)
    weight = sum((ts[i + 1] - ts[i]).item() * ts[i].item()
                 for i in range(steps))
    z = torch.randn((1, N_TOKENS, D_LATENT),
                    generator=torch.Generator().manual_seed(seed))
    assert torch.allclose(got, z + weight * a, rtol=1e-5, atol=1e-6)


# -- classifier-free guidance --------------------------------------------------


def _branch_stub():
    """Velocity 1 for the null class, 3 for any real class."""
    def fn(z, t, cond):
        null = (cond == len(CLASS_NAMES)).float().view(-1, 1, 1)
        return null * 1.0 + (1.0 - null) * 3.0 + 0.0 * z
    return fn


@pytest.mark.parametrize("w,expected_drop", [(0.0, 1.0), (1.0, 3.0),
                                             (0.5, 2.0), (2.0, 5.0)])
def test_guidance_blend_closed_form(w, expected_drop):
    """u + w*(c - u) with u=1, c=3 gives 1 + 2w, integrated over unit time."""
    bb = _stub_backbone("flow", _branch_stub())
    z = torch.randn((2, N_TOKENS, D_LATENT),
                    generator=torch.Generator().manual_seed(8))
    got = bb.sample(2, 0, seed=8, steps=10, guidance=w)
    assert torch.allclose(got, z - expected_drop, rtol=1e-5, atol=1e-5)


def test_guidance_extremes_evaluate_one_branch():
    bb = _stub_backbone("flow", _branch_stub())
    bb.sample(1, 1, seed=0, steps=4, guidance=1.0)
    conds = [c for _, c in bb.net.calls]
    assert all((c == 1).all() for c in conds) and len(conds) == 4
    bb.net.calls.clear()
    bb.sample(1, 1, seed=0, steps=4, guidance=0.0)
    conds = [c for _, c in bb.net.calls]
    assert all((c == len(CLASS_NAMES)).all() for c in conds)


def test_guidance_shortcuts_leave_noise_sequence_unchanged():
    """A cond-blind predictor must sample identically for every w: the
    blend shortcuts may change how many net calls happen but never what
    the sampler draws from its generator."""
    bb = _stub_backbone("diffusion", lambda z, t, c: 0.05 * z)
    base = bb.sample(2, 0, seed=21, steps=12, guidance=1.0)
    for w in (0.0, 0.5, 2.0):
        assert torch.equal(base, bb.sample(2, 0, seed=21, steps=12,
                                           guidance=w))


# -- sampling interface --------------------------------------------------------


def test_sample_is_bitwise_deterministic():
    bb = _real_backbone()
    a = bb.sample(3, [0, 1, 2], seed=13, steps=20)
    b = bb.sample(3, [0, 1, 2], seed=13, steps=20)
    assert torch.equal(a, b)
    assert not torch.equal(a, bb.sample(3, [0, 1, 2], seed=14, steps=20))


def test_sample_validates_arguments():
    bb = _real_backbone()
    with pytest.raises(StepOutOfRange):
        bb.sample(1, 0, seed=0, steps=0)
    with pytest.raises(StepOutOfRange):
        bb.sample(1, 0, seed=0, steps=T_STEPS + 1)
    with pytest.raises(ShapeError):
        bb.sample(3, [0, 1], seed=0)
    with pytest.raises(ConfigInvalid):
        bb.sample(1, len(CLASS_NAMES) + 1, seed=0)
    with pytest.raises(ConfigInvalid):
        bb.sample(1, -1, seed=0)


def test_flow_allows_many_steps():
    bb = _stub_backbone("flow", lambda z, t, c: torch.zeros_like(z))
    bb.sample(1, 0, seed=0, steps=T_STEPS + 50)


def test_not_ready_and_kind_validation():
    bb = GenerativeBackbone(kind="diffusion", class_names=list(CLASS_NAMES))
    with pytest.raises(ModelNotReady):
        bb.sample(1, 0, seed=0)
    with pytest.raises(ModelNotReady):
        bb.fingerprint()
    with pytest.raises(ConfigInvalid):
        GenerativeBackbone(kind="score", class_names=list(CLASS_NAMES))


def test_class_id_lookup():
    bb = _real_backbone()
    for i, name in enumerate(CLASS_NAMES):
        assert bb.class_id(name) == i
    assert bb.null_class == len(CLASS_NAMES)
    with pytest.raises(ConfigInvalid):
        bb.class_id("sprint")


# -- persistence ---------------------------------------------------------------


def test_save_load_roundtrip_preserves_fingerprint(tmp_path):
    bb = _real_backbone(kind="flow", seed=3)
    path = tmp_path / "bb.pt"
    bb.save(path)
    loaded = GenerativeBackbone.load(path)
    assert loaded.kind == "flow"
    assert loaded.class_names == list(CLASS_NAMES)
    assert loaded.frozen
    assert all(not p.requires_grad for p in loaded.net.parameters())
    assert loaded.fingerprint() == bb.fingerprint()
    a = bb.sample(2, [0, 1], seed=5, steps=8)
    assert torch.equal(a, loaded.sample(2, [0, 1], seed=5, steps=8))


def test_loss_is_seeded_deterministic():
    z0 = torch.randn((8, N_TOKENS, D_LATENT),
                     generator=torch.Generator().manual_seed(1))
    cond = torch.tensor([0, 1, 2, 3, 0, 1, 2, 3])
    for kind in ("diffusion", "flow"):
        bb = _real_backbone(kind=kind)
        a = bb.loss(z0, cond, torch.Generator().manual_seed(17))
        b = bb.loss(z0, cond, torch.Generator().manual_seed(17))
        assert a.item() == b.item()
        assert torch.isfinite(a)
