"""Motion VAE: fixed-length motion windows to a small token-grid latent.

Both halves are linear maps in the temporal-Fourier domain: the encoder
projects the low-bin rFFT of the window to the latent, the decoder maps the
latent back to a band-limited spectrum and inverts it. In that domain a time
shift of the input is a per-bin rotation, so the latent varies smoothly (in
fact linearly) with the generative factors of periodic motion — per-part
amplitude, frequency content and phase offset. That geometry is what the
downstream latent models and the phase-control stage rely on: a deep
time-domain encoder maps time-shifted copies of the same gait to distant
latents, which makes the latent distribution an unlearnably tangled manifold
at this corpus size.

Latents handed to the generative models are normalized by corpus statistics
captured at training time, so the diffusion/flow prior operates near unit
scale; the statistics are buffers of the frozen model.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt
from .errors import ModelNotReady, ShapeError, TrainingDiverged
from .motion import Motion, Skeleton

N_TOKENS = 4
D_LATENT = 32


@dataclass(frozen=True)
class VAEHyper:
    epochs: int = 600
    batch_size: int = 32
    lr: float = 1e-3
    kl_weight: float = 1e-4
    seed: int = 0


class _VAENet(nn.Module):
    """Linear encoder/decoder over low-bin temporal Fourier features.

    Bins 0..N_BINS-1 of the per-channel rFFT cover every frequency the
    motion vocabulary uses (a 64-frame window keeps cycles/window up to 16);
    higher bins are discarded on encode and synthesized as zero on decode,
    so the model is band-limited by construction.
    """

    MAX_BINS = 17

    def __init__(self, n_frames: int, n_joints: int):
        super().__init__()
        self.n_frames, self.n_joints = n_frames, n_joints
        feat = n_joints * 3
        self.n_bins = min(self.MAX_BINS, n_frames // 2 + 1)
        self.n_fourier = 2 * self.n_bins * feat
        flat = N_TOKENS * D_LATENT
        self.enc_mean = nn.Linear(self.n_fourier, flat)
        self.enc_logvar = nn.Linear(self.n_fourier, flat)
        # start near a tight posterior so early training is not drowned in
        # decoder noise
        nn.init.zeros_(self.enc_logvar.weight)
        nn.init.constant_(self.enc_logvar.bias, -4.0)
        self.dec = nn.Linear(flat, self.n_fourier)
        self.register_buffer("lat_mean", torch.zeros(flat))
        self.register_buffer("lat_whiten", torch.eye(flat))
        self.register_buffer("lat_color", torch.eye(flat))

    def fourier_features(self, x: torch.Tensor) -> torch.Tensor:
        """(B, T, J, 3) -> (B, n_fourier) low-bin spectrum, re/im stacked."""
        n = x.shape[0]
        flat = x.reshape(n, self.n_frames, -1)
        spec = torch.fft.rfft(flat, dim=1)[:, : self.n_bins] / self.n_frames
        return torch.cat([spec.real, spec.imag], dim=1).reshape(n, -1)

    def spectrum_to_frames(self, feats: torch.Tensor) -> torch.Tensor:
        """(B, n_fourier) -> (B, T, J, 3) by zero-padded inverse rFFT."""
        n = feats.shape[0]
        width = self.n_joints * 3
        ri = feats.reshape(n, 2, self.n_bins, width)
        spec = torch.complex(ri[:, 0], ri[:, 1])
        pad = torch.zeros(n, self.n_frames // 2 + 1 - self.n_bins, width,
                          dtype=spec.dtype, device=spec.device)
        full = torch.cat([spec, pad], dim=1) * self.n_frames
        frames = torch.fft.irfft(full, n=self.n_frames, dim=1)
        return frames.reshape(n, self.n_frames, self.n_joints, 3)

    def encode_raw(self, x: torch.Tensor):
        """(B, T, J, 3) -> posterior mean and logvar, each (B, N_z, D_z)."""
        feats = self.fourier_features(x)
        shape = (x.shape[0], N_TOKENS, D_LATENT)
        return (self.enc_mean(feats).reshape(shape),
                self.enc_logvar(feats).reshape(shape))

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        """(B, N_z, D_z) raw latent -> (B, T, J, 3)."""
        return self.spectrum_to_frames(self.dec(z.reshape(z.shape[0], -1)))


@dataclass
class MotionVAE:
    skeleton: Skeleton
    fps: float = 20.0
    n_frames: int = 64
    net: _VAENet | None = None
    frozen: bool = False
    train_log: list = field(default_factory=list)

    def _require_ready(self):
        if self.net is None or not self.frozen:
            raise ModelNotReady("motion VAE has not been trained/loaded")

    # whitened-latent interface used by everything downstream; whitening to
    # unit covariance makes the generative prior's N(0, I) starting point
    # match the data marginal under the finite-step noising schedule

    def _whiten(self, mean: torch.Tensor) -> torch.Tensor:
        flat = mean.reshape(mean.shape[0], -1)
        return ((flat - self.net.lat_mean) @ self.net.lat_whiten.T).reshape(
            mean.shape)

    def encode(self, motion: Motion) -> torch.Tensor:
        """Whitened posterior mean, (N_z, D_z)."""
        self._require_ready()
        if motion.n_frames != self.n_frames:
            raise ShapeError(f"VAE expects {self.n_frames} frames")
        x = torch.from_numpy(motion.frames).float().unsqueeze(0)
        with torch.no_grad():
            mean, _ = self.net.encode_raw(x)
            return self._whiten(mean)[0]

    def encode_batch(self, motions) -> torch.Tensor:
        self._require_ready()
        x = torch.from_numpy(np.stack([m.frames for m in motions])).float()
        with torch.no_grad():
            mean, _ = self.net.encode_raw(x)
            return self._whiten(mean)

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor:
        """Differentiable decode of whitened latents -> (B, T, J, 3)."""
        self._require_ready()
        flat = z.reshape(z.shape[0], -1)
        raw = (flat @ self.net.lat_color.T + self.net.lat_mean).reshape(z.shape)
        return self.net.decode_raw(raw)

    def decode(self, z: torch.Tensor, label: str = "") -> Motion:
        if z.dim() == 2:
            z = z.unsqueeze(0)
        with torch.no_grad():
            frames = self.decode_latent(z)[0].double().numpy()
        return Motion(frames=frames, fps=self.fps, skeleton=self.skeleton,
                      label=label)

    def fingerprint(self) -> str:
        self._require_ready()
        return ckpt.module_fingerprint(self.net)

    def save(self, path) -> str:
        self._require_ready()
        meta = {"fps": self.fps, "n_frames": self.n_frames,
                "skeleton": self.skeleton.to_dict(), "train_log": self.train_log}
        return ckpt.save_checkpoint(path, "motion-vae", self.net.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "MotionVAE":
        state, meta, _ = ckpt.load_checkpoint(path, "motion-vae")
        skel = Skeleton.from_dict(meta["skeleton"])
        vae = cls(skeleton=skel, fps=meta["fps"], n_frames=meta["n_frames"],
                  train_log=list(meta.get("train_log", [])))
        vae.net = _VAENet(vae.n_frames, len(skel.joint_names))
        vae.net.load_state_dict(state)
        vae.net.eval()
        for p in vae.net.parameters():
            p.requires_grad_(False)
        vae.frozen = True
        return vae


def train_vae(corpus, hyper: VAEHyper) -> MotionVAE:
    """Reconstruction + small-KL training; latent stats captured at the end."""
    motions = [c[0] if isinstance(c, tuple) else c for c in corpus]
    if not motions:
        raise ShapeError("training corpus is empty")
    vae = MotionVAE(skeleton=motions[0].skeleton, fps=motions[0].fps,
                    n_frames=motions[0].n_frames)
    torch.manual_seed(hyper.seed)
    vae.net = _VAENet(vae.n_frames, len(vae.skeleton.joint_names))

    data = torch.from_numpy(np.stack([m.frames for m in motions])).float()
    n = data.shape[0]
    opt = torch.optim.Adam(vae.net.parameters(), lr=hyper.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=hyper.epochs)
    gen = torch.Generator().manual_seed(hyper.seed)
    noise_gen = torch.Generator().manual_seed(hyper.seed + 1)
    try:
        for epoch in range(hyper.epochs):
            perm = torch.randperm(n, generator=gen)
            total = 0.0
            for start in range(0, n, hyper.batch_size):
                batch = data[perm[start : start + hyper.batch_size]]
                mean, logvar = vae.net.encode_raw(batch)
                eps = torch.randn(mean.shape, generator=noise_gen)
                z = mean + torch.exp(0.5 * logvar) * eps
                recon = vae.net.decode_raw(z)
                rec_loss = ((recon - batch) ** 2).mean()
                kl = 0.5 * (mean ** 2 + logvar.exp() - 1 - logvar).mean()
                loss = rec_loss + hyper.kl_weight * kl
                if not torch.isfinite(loss):
                    raise TrainingDiverged(
                        f"VAE loss non-finite at epoch {epoch}", checkpoint=vae)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.detach().item() * batch.shape[0]
            sched.step()
            vae.train_log.append({"epoch": epoch, "loss": total / n})
    except TrainingDiverged:
        raise
    vae.net.eval()
    with torch.no_grad():
        means, logvar = vae.net.encode_raw(data)
        flat = means.reshape(means.shape[0], -1).double()
        mu = flat.mean(dim=0)
        centered = flat - mu
        cov = centered.T @ centered / max(flat.shape[0] - 1, 1)
        evals, evecs = torch.linalg.eigh(cov)
        # Floored whitening: directions whose corpus variance exceeds the
        # encoder's own posterior noise become exactly unit variance (so the
        # generative prior's N(0, I) start matches the data marginal where
        # the structure lives); sub-noise directions are left small rather
        # than amplified into unit-scale junk.
        floor = float(logvar.exp().mean().clamp(min=1e-8))
        lam = evals.clamp(min=floor)
        vae.net.lat_mean.copy_(mu.float())
        vae.net.lat_whiten.copy_((evecs * lam.rsqrt() @ evecs.T).float())
        vae.net.lat_color.copy_((evecs * lam.sqrt() @ evecs.T).float())
    for p in vae.net.parameters():
        p.requires_grad_(False)
    vae.frozen = True
    return vae
