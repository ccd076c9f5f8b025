"""Sinusoid parameter estimation: exactness, oracles, and gradients."""
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from phasectl.spectral import (fourier_shift_vec, oracle_amplitude,
                               oracle_frequency, oracle_phase, resynthesize,
                               shift_from_vec, sinusoid_fit_layer,
                               spectral_concentrate, spectral_params,
                               wrap_cycles)

W = 64


def curve_np(A, F, S, B, W=W):
    t = np.arange(W)
    return A * np.cos(2 * np.pi * (F * t / W + S)) + B


# -- wrap_cycles --------------------------------------------------------------

@given(st.floats(-50, 50, allow_nan=False))
@settings(deadline=None)
def test_wrap_cycles_range_and_period(x):
    w = wrap_cycles(x)
    assert 0.0 <= w < 1.0
    assert abs((x - w) - round(x - w)) < 1e-9


def test_wrap_cycles_tensor_matches_scalar():
    xs = torch.tensor([-1.25, -0.5, 0.0, 0.49, 1.75])
    out = wrap_cycles(xs)
    for x, w in zip(xs.tolist(), out.tolist()):
        assert w == pytest.approx(wrap_cycles(x), abs=1e-12)


# -- exact recovery on integer-bin sinusoids ---------------------------------

@pytest.mark.parametrize("A,F,S,B", [
    (1.0, 3, 0.0, 0.0),
    (0.75, 1, 0.25, 2.0),
    (2.5, 16, 0.9, -1.0),
    (0.05, 31, 0.5, 0.3),
])
def test_spectral_params_exact_on_bin(A, F, S, B):
    c = torch.tensor(curve_np(A, F, S, B), dtype=torch.float64)
    A_hat, F_hat, B_hat = spectral_params(c)
    assert A_hat.item() == pytest.approx(A, abs=1e-3)
    assert F_hat.item() == pytest.approx(F, abs=1e-3)
    assert B_hat.item() == pytest.approx(B, abs=1e-3)


@pytest.mark.parametrize("A,F,S,B", [
    (1.0, 3, 0.0, 0.0),
    (0.75, 1, 0.25, 2.0),
    (2.5, 16, 0.9, -1.0),
    (1.2, 7, 0.123, 0.0),
])
def test_fit_layer_exact_on_bin(A, F, S, B):
    c = torch.tensor(curve_np(A, F, S, B), dtype=torch.float64)
    F_t = torch.tensor(float(F), dtype=torch.float64)
    vec = fourier_shift_vec(c, F_t)
    A_hat, F_hat, S_hat, B_hat = sinusoid_fit_layer(c, vec)
    assert A_hat.item() == pytest.approx(A, abs=1e-3)
    assert F_hat.item() == pytest.approx(F, abs=1e-3)
    err_s = abs(wrap_cycles(S_hat.item() - S + 0.5) - 0.5)
    assert err_s < 1e-3
    assert B_hat.item() == pytest.approx(B, abs=1e-3)


def test_resynthesize_then_fit_is_identity():
    A = torch.tensor([0.8, 1.5], dtype=torch.float64)
    F = torch.tensor([2.0, 9.0], dtype=torch.float64)
    S = torch.tensor([0.1, 0.7], dtype=torch.float64)
    B = torch.tensor([0.0, -0.4], dtype=torch.float64)
    c = resynthesize(A, F, S, B, W)
    assert c.shape == (2, W)
    A2, F2, B2 = spectral_params(c)
    S2 = shift_from_vec(fourier_shift_vec(c, F2))
    assert torch.allclose(A2, A, atol=1e-3)
    assert torch.allclose(F2, F, atol=1e-3)
    assert torch.allclose(B2, B, atol=1e-3)
    assert torch.allclose(S2, S, atol=1e-3)


# -- the plain-numpy oracle ---------------------------------------------------

def test_oracle_matches_hand_dft():
    # independent check: compute the DFT by explicit summation
    A, F, S, B = 1.3, 5, 0.37, 0.9
    y = curve_np(A, F, S, B)
    t = np.arange(W)
    re = np.sum((y - y.mean()) * np.cos(2 * np.pi * F * t / W))
    im = -np.sum((y - y.mean()) * np.sin(2 * np.pi * F * t / W))
    amp = 2 * np.hypot(re, im) / W
    shift = wrap_cycles(np.arctan2(im, re) / (2 * np.pi))
    (a0, f0, s0, b0), = oracle_phase(y, k=1)
    assert a0 == pytest.approx(amp, abs=1e-9)
    assert a0 == pytest.approx(A, abs=1e-9)
    assert f0 == F
    assert s0 == pytest.approx(shift, abs=1e-9)
    assert s0 == pytest.approx(S, abs=1e-9)
    assert b0 == pytest.approx(B, abs=1e-9)


def test_oracle_two_channels_sorted_by_magnitude():
    y = curve_np(1.0, 4, 0.2, 0.5) + curve_np(0.4, 8, 0.6, 0.0)
    ch = oracle_phase(y, k=2)
    assert ch[0][1] == 4 and ch[1][1] == 8
    assert ch[0][0] == pytest.approx(1.0, abs=1e-9)
    assert ch[1][0] == pytest.approx(0.4, abs=1e-9)
    assert ch[0][3] == pytest.approx(0.5, abs=1e-9)  # offset on channel 0
    assert ch[1][3] == 0.0


def test_oracle_degenerate_flat_signal():
    ch = oracle_phase(np.full(W, 3.25), k=2)
    assert ch[0] == (0.0, 1.0, 0.0, 3.25)
    assert ch[1] == (0.0, 1.0, 0.0, 0.0)


def test_oracle_helpers():
    y = curve_np(0.7, 6, 0.0, 0.0)
    assert oracle_amplitude(y) == pytest.approx(0.7, abs=1e-9)
    assert oracle_frequency(y) == 6


@given(st.floats(0.05, 4.0), st.integers(1, 31), st.floats(0, 0.999),
       st.floats(-2, 2))
@settings(deadline=None, max_examples=40)
def test_oracle_recovers_random_on_bin_sinusoids(A, F, S, B):
    (a0, f0, s0, b0), = oracle_phase(curve_np(A, F, S, B), k=1)
    assert a0 == pytest.approx(A, rel=1e-6)
    assert f0 == F
    assert abs(wrap_cycles(s0 - S + 0.5) - 0.5) < 1e-6
    assert b0 == pytest.approx(B, abs=1e-9)


# -- spectral concentration ---------------------------------------------------

def test_concentrate_fixes_pure_sinusoids_and_constants():
    c = torch.tensor(curve_np(1.1, 5, 0.3, 0.7), dtype=torch.float64)
    assert torch.allclose(spectral_concentrate(c), c, atol=1e-9)
    flat = torch.full((W,), 2.0, dtype=torch.float64)
    assert torch.allclose(spectral_concentrate(flat), flat, atol=1e-9)


def test_concentrate_suppresses_weak_bins():
    strong = curve_np(1.0, 4, 0.0, 0.0)
    weak = curve_np(0.2, 9, 0.0, 0.0)
    out = spectral_concentrate(torch.tensor(strong + weak, dtype=torch.float64))
    spec = torch.fft.rfft(out)
    mag = spec.abs()
    # weak bin scaled by its relative power (0.2/1.0)^2 = 0.04
    assert mag[9].item() == pytest.approx(0.04 * 0.2 * W / 2, rel=1e-6)
    assert mag[4].item() == pytest.approx(1.0 * W / 2, rel=1e-6)


# -- gradients ----------------------------------------------------------------

def test_fit_layer_gradient_matches_finite_differences():
    # mixture weights -> curve -> (A, F, S, B) -> scalar; central differences
    torch.manual_seed(0)
    base1 = torch.tensor(curve_np(1.0, 3, 0.1, 0.0), dtype=torch.float64)
    base2 = torch.tensor(curve_np(1.0, 7, 0.6, 0.0), dtype=torch.float64)

    def loss_of(theta):
        c = theta[0] * base1 + theta[1] * base2 + theta[2]
        vec = fourier_shift_vec(c, spectral_params(c)[1])
        A, F, S, B = sinusoid_fit_layer(c, vec)
        return A * A + 0.1 * F * F + S + B * B

    theta = torch.tensor([0.9, 0.35, 0.2], dtype=torch.float64,
                         requires_grad=True)
    loss_of(theta).backward()
    grad = theta.grad.clone()
    h = 1e-6
    for i in range(3):
        tp, tm = theta.detach().clone(), theta.detach().clone()
        tp[i] += h
        tm[i] -= h
        fd = (loss_of(tp) - loss_of(tm)).item() / (2 * h)
        assert grad[i].item() == pytest.approx(fd, rel=1e-3, abs=1e-6)


def test_resynthesize_gradient_matches_finite_differences():
    def loss_of(theta):
        c = resynthesize(theta[0], theta[1], theta[2], theta[3], W)
        return (c * c).sum()

    theta = torch.tensor([0.8, 2.5, 0.3, 0.1], dtype=torch.float64,
                         requires_grad=True)
    loss_of(theta).backward()
    grad = theta.grad.clone()
    h = 1e-6
    for i in range(4):
        tp, tm = theta.detach().clone(), theta.detach().clone()
        tp[i] += h
        tm[i] -= h
        fd = (loss_of(tp) - loss_of(tm)).item() / (2 * h)
        assert grad[i].item() == pytest.approx(fd, rel=1e-3, abs=1e-6)
