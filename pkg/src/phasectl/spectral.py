"""Spectral estimation of sinusoid parameters.

Two routes that must never be merged: a differentiable torch layer used
inside the phase networks, and a plain-numpy DFT oracle used for testing
and measurement. Both describe a length-W curve as
A * cos(2*pi*(F*t/W + S)) + B with F in cycles per window and S in cycles.
"""
from __future__ import annotations

import numpy as np
import torch


def wrap_cycles(x):
    """Wrap a value in cycles into [0, 1). Works on floats, arrays, tensors.

    For tiny negative inputs x - floor(x) rounds to exactly 1.0, which would
    escape the half-open interval, so that case folds back to 0.
    """
    if isinstance(x, torch.Tensor):
        w = x - torch.floor(x)
        return torch.where(w >= 1.0, torch.zeros_like(w), w)
    w = np.asarray(x, dtype=np.float64) - np.floor(x)
    w = np.where(w >= 1.0, 0.0, w)
    return w if np.ndim(x) else float(w)


def spectral_params(curve: torch.Tensor):
    """Amplitude, power-weighted frequency, and offset of a batch of curves.

    curve: (..., W). Returns (A, F, B), each (...,), differentiable.
    A = 2*sqrt(sum of positive-bin powers)/W, F = power-weighted mean bin
    (floored at 1 for all-zero curves), B = mean.
    """
    W = curve.shape[-1]
    B = curve.mean(dim=-1)
    spec = torch.fft.rfft(curve, dim=-1)
    power = (spec.real**2 + spec.imag**2)[..., 1 : W // 2 + 1]
    freqs = torch.arange(1, W // 2 + 1, dtype=curve.dtype, device=curve.device)
    psum = power.sum(dim=-1)
    A = 2.0 * torch.sqrt(psum + 1e-24) / W
    F = torch.where(psum > 0,
                    (power * freqs).sum(dim=-1) / torch.clamp(psum, min=1e-30),
                    torch.ones_like(psum))
    return A, F, B


def shift_from_vec(vec: torch.Tensor) -> torch.Tensor:
    """Phase shift in cycles from a (..., 2) head output (sx, sy)."""
    return wrap_cycles(torch.atan2(vec[..., 1], vec[..., 0]) / (2 * torch.pi))


def spectral_concentrate(curve: torch.Tensor) -> torch.Tensor:
    """Soft winner-take-most reweighting of a curve's spectrum.

    Each oscillatory bin's magnitude is scaled by its power relative to the
    strongest bin (DC passes through untouched), pushing the curve toward
    the single-sinusoid manifold the fit layer assumes. Pure sinusoids and
    constants are fixed points. Differentiable.
    """
    spec = torch.fft.rfft(curve, dim=-1)
    power = spec.real**2 + spec.imag**2
    osc = power.clone()
    osc[..., 0] = 0.0
    w = osc / osc.max(dim=-1, keepdim=True).values.clamp(min=1e-24)
    w[..., 0] = 1.0
    return torch.fft.irfft(spec * w, n=curve.shape[-1], dim=-1)


def fourier_shift_vec(curve: torch.Tensor, F: torch.Tensor) -> torch.Tensor:
    """(sx, sy) phase readout of a curve at frequency F, shape (..., 2).

    sx = sum(c~ * cos(2*pi*F*t/W)), sy = -sum(c~ * sin(...)) on the centered
    curve c~; for a pure sinusoid A*cos(2*pi*(F*t/W + S)) this equals
    (A*W/2)*(cos(2*pi*S), sin(2*pi*S)), so atan2 recovers S exactly.
    Differentiable in both the curve and F.
    """
    W = curve.shape[-1]
    t = torch.arange(W, dtype=curve.dtype, device=curve.device)
    ph = 2 * torch.pi * F.unsqueeze(-1) * t / W
    c = curve - curve.mean(dim=-1, keepdim=True)
    sx = (c * torch.cos(ph)).sum(dim=-1)
    sy = -(c * torch.sin(ph)).sum(dim=-1)
    return torch.stack([sx, sy], dim=-1)


def sinusoid_fit_layer(curve: torch.Tensor, shift_vec: torch.Tensor):
    """Differentiable (A, F, S, B) for a latent curve.

    shift_vec carries the (sx, sy) pair produced by the model's shift head
    (tests may bypass the head by passing (cos(2*pi*S), sin(2*pi*S))).
    """
    A, F, B = spectral_params(curve)
    S = shift_from_vec(shift_vec)
    return A, F, S, B


def resynthesize(A, F, S, B, W: int) -> torch.Tensor:
    """Evaluate A*cos(2*pi*(F*t/W + S)) + B on t = 0..W-1.

    Parameters are (...,) tensors; output is (..., W). The t/W grid matches
    the DFT analysis convention so fit-then-resynthesize is the identity on
    pure on-bin sinusoids.
    """
    t = torch.arange(W, dtype=A.dtype, device=A.device)
    phase = 2 * torch.pi * (F.unsqueeze(-1) * t / W + S.unsqueeze(-1))
    return A.unsqueeze(-1) * torch.cos(phase) + B.unsqueeze(-1)


def oracle_phase(values: np.ndarray, k: int = 1) -> list[tuple[float, float, float, float]]:
    """Pure-DFT estimate of the top-k sinusoid channels of a signal.

    No learned weights anywhere: B is the mean (assigned to the first
    channel), each channel takes an integer bin in decreasing magnitude
    order (ties broken toward the lower bin), with
    A = 2|DFT[f]|/W and S = wrap(angle(DFT[f]) / 2*pi).
    Degenerate inputs return A = 0 and F = 1 per channel.
    """
    y = np.asarray(values, dtype=np.float64)
    W = y.shape[-1]
    mean = float(y.mean())
    spec = np.fft.rfft(y - mean)
    mags = np.abs(spec)
    nbins = W // 2
    order = sorted(range(1, nbins + 1), key=lambda f: (-mags[f], f))
    out = []
    for i in range(k):
        f = order[i] if i < nbins else 1
        amp = 2.0 * mags[f] / W
        if amp <= 1e-12:
            out.append((0.0, 1.0, 0.0, mean if i == 0 else 0.0))
            continue
        shift = float(wrap_cycles(np.angle(spec[f]) / (2 * np.pi)))
        out.append((amp, float(f), shift, mean if i == 0 else 0.0))
    return out


def oracle_amplitude(values: np.ndarray) -> float:
    return oracle_phase(values, k=1)[0][0]


def oracle_frequency(values: np.ndarray) -> float:
    return oracle_phase(values, k=1)[0][1]
