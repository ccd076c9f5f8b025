"""Stage I: per-part periodic autoencoders over kinematic signals.

Each body part owns an independent temporal-conv encoder and decoder; parts
share no weights. The bottleneck is the differentiable sinusoid fit from
`spectral`, so everything the decoder sees is already a parametric sinusoid
and the fitted (A, F, S, B) tuples double as the extracted phase
description. Phase shifts are read out by Fourier projection of each latent
curve at its own fitted frequency; a frequency-fixed learned readout cannot
track fundamentals that differ per sample.

All five parts run in one grouped-convolution module for speed; grouping
keeps the per-part weight separation intact.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt
from .errors import ModelNotReady, ShapeError, TrainingDiverged
from .manifold import K_CHANNELS, PhaseParams
from .motion import PARTS, KinematicSignal, Motion, part_signal_matrix, whole_body_signal
from .spectral import (resynthesize, shift_from_vec, spectral_concentrate,
                       spectral_params)

WINDOW = 64


@dataclass(frozen=True)
class Stage1Hyper:
    epochs: int = 800
    batch_size: int = 32
    lr: float = 1e-3
    # relative step size for the decoder parameter group; amplitude/shift are
    # read from the signal itself, so decoder gain drift cannot de-calibrate
    # them and the full step is safe
    decoder_lr_scale: float = 1.0
    seed: int = 0


class _GroupedPAE(nn.Module):
    """Grouped encoder/decoder over n_parts scalar signals.

    Latent channels are extracted in a cascade: channel 0's encoder fits the
    signal, the signal's own component at the fitted frequency is explained
    away, and channel 1's encoder sees only the residual. A parallel encoder
    at K=2 reliably falls into an amplitude-splitting minimum where both
    channels share the fundamental (the power-weighted frequency of a mixed
    curve sits between harmonics, which walls off the second harmonic); the
    cascade removes the mixed state from the picture. Encoder outputs pass
    through a spectral-concentration stage for the same reason: it stops
    neighbouring harmonics from dragging the fitted frequency off its line.
    """

    def __init__(self, n_parts: int, window: int, k: int, hidden: int, kernel: int):
        super().__init__()
        self.n_parts, self.window, self.k = n_parts, window, k
        pad = kernel // 2
        conv = lambda ci, co: nn.Conv1d(ci, co, kernel, padding=pad,
                                        padding_mode="replicate",
                                        groups=n_parts)
        self.encoders = nn.ModuleList([
            nn.Sequential(conv(n_parts, n_parts * hidden), nn.ELU(),
                          conv(n_parts * hidden, n_parts * hidden), nn.ELU(),
                          conv(n_parts * hidden, n_parts))
            for _ in range(k)])
        # The decoder is a single linear conv on purpose: a time-invariant
        # linear map cannot mint new frequencies, so reconstructing a
        # multi-harmonic signal forces the latent channels onto distinct
        # harmonics instead of letting a waveshaping nonlinearity fake the
        # overtones from one carrier. Initialized as channel summation.
        self.decoder = conv(n_parts * k, n_parts)
        with torch.no_grad():
            self.decoder.weight.zero_()
            self.decoder.weight[:, :, kernel // 2] = 1.0
            self.decoder.bias.zero_()
        # per-part signal scale, filled in from the training corpus so the
        # loss treats large-excursion and subtle parts alike
        self.register_buffer("scale", torch.ones(1, n_parts, 1))

    def fit_params(self, signals: torch.Tensor):
        """(B, P, W) signals -> (A, F, S, B) each (B, P, K), signal units.

        Channel extraction is cascaded: each encoder proposes a frequency
        from what previous channels left unexplained, then the amplitude and
        shift of that channel are read by Fourier projection of the residual
        signal itself at the fitted frequency. Reading the signal side (not
        the latent curve) keeps A calibrated in signal units no matter how
        the decoder's gain drifts during training, and the projection doubles
        as the explaining-away step for the next channel. The offset rides on
        channel 0 so reconstruction needs nothing beyond the fitted tuples.
        """
        n, P, W = signals.shape
        norm = signals / self.scale
        mu = norm.mean(dim=-1, keepdim=True)
        residual = norm - mu
        t = torch.arange(W, dtype=signals.dtype, device=signals.device)
        fits = []
        for stage, enc in enumerate(self.encoders):
            lat = spectral_concentrate(enc(residual))  # (B, P, W)
            if stage == 0:
                lat = lat + mu
            _, F_k, B_k = spectral_params(lat)
            ph = 2 * torch.pi * F_k.unsqueeze(-1) * t / W  # (B, P, W)
            cosv, sinv = torch.cos(ph), torch.sin(ph)
            a_c = (residual * cosv).sum(-1, keepdim=True) * 2 / W
            a_s = (residual * sinv).sum(-1, keepdim=True) * 2 / W
            A_k = torch.sqrt(a_c * a_c + a_s * a_s + 1e-24).squeeze(-1)
            S_k = shift_from_vec(torch.cat([a_c, -a_s], dim=-1))
            fits.append((A_k, F_k, S_k, B_k))
            if stage + 1 < self.k:
                residual = residual - a_c * cosv - a_s * sinv
        A = torch.stack([f[0] for f in fits], dim=-1)
        F = torch.stack([f[1] for f in fits], dim=-1)
        S = torch.stack([f[2] for f in fits], dim=-1)
        B = torch.stack([f[3] for f in fits], dim=-1)
        unit = self.scale.squeeze(-1).unsqueeze(-1)  # (1, P, 1)
        return A * unit, F, S, B * unit

    def decode(self, A, F, S, B):
        """Parametric sinusoids (signal units) -> decoded signals (B, P, W)."""
        unit = self.scale.squeeze(-1).unsqueeze(-1)
        curves = resynthesize(A / unit, F, S, B / unit, self.window)
        n = curves.shape[0]
        out = self.decoder(curves.view(n, self.n_parts * self.k, self.window))
        return out * self.scale

    def forward(self, signals: torch.Tensor):
        A, F, S, B = self.fit_params(signals)
        return self.decode(A, F, S, B), (A, F, S, B)


@dataclass
class PhaseExtractor:
    """A trained (or not yet trained) Stage I model.

    mode "parts" drives the five-part pipeline; mode "whole" is the
    single-signal ablation that treats the entire body as one part.
    """

    mode: str = "parts"
    window: int = WINDOW
    fps: float = 20.0
    hidden: int = 24
    kernel: int = 9
    module: _GroupedPAE | None = None
    frozen: bool = False
    train_log: list = field(default_factory=list)

    @property
    def parts(self) -> tuple[str, ...]:
        return PARTS if self.mode == "parts" else ("whole",)

    def _require_ready(self):
        if self.module is None or not self.frozen:
            raise ModelNotReady("phase extractor has not been trained/loaded")

    def signal_matrix(self, motion: Motion) -> np.ndarray:
        if motion.n_frames != self.window:
            raise ShapeError(
                f"extractor window is {self.window}, motion has {motion.n_frames}")
        if self.mode == "parts":
            return part_signal_matrix(motion)
        return whole_body_signal(motion).values[None, :]

    def _init_module(self) -> _GroupedPAE:
        return _GroupedPAE(len(self.parts), self.window, K_CHANNELS,
                           self.hidden, self.kernel)

    # -- evaluation ---------------------------------------------------------

    def params_from_signals(self, signals: torch.Tensor) -> torch.Tensor:
        """Differentiable (B, P, K, 4) parameter tensor from (B, P, W) signals."""
        self._require_ready()
        A, F, S, B = self.module.fit_params(signals)
        return torch.stack([A, F, S, B], dim=-1)

    def extract(self, motion: Motion) -> np.ndarray:
        """(P, K, 4) float64 parameters for one motion window."""
        self._require_ready()
        sig = torch.from_numpy(self.signal_matrix(motion)).float().unsqueeze(0)
        with torch.no_grad():
            params = self.params_from_signals(sig)
        return params[0].double().numpy()

    def extract_phase(self, motion: Motion) -> PhaseParams:
        if self.mode != "parts":
            raise ModelNotReady("extract_phase needs the five-part extractor")
        return PhaseParams(self.extract(motion))

    def reconstruct_signal(self, params, part: str) -> KinematicSignal:
        """Decode fitted or edited parameters back into one part's signal."""
        self._require_ready()
        vals = params.values if isinstance(params, PhaseParams) else np.asarray(params)
        t = torch.from_numpy(vals).float().unsqueeze(0)  # (1, P, K, 4)
        with torch.no_grad():
            out = self.module.decode(t[..., 0], t[..., 1], t[..., 2], t[..., 3])
        i = self.parts.index(part)
        return KinematicSignal(part=part, values=out[0, i].double().numpy(),
                               fps=self.fps)

    def reconstruct_all(self, signals: torch.Tensor) -> torch.Tensor:
        """Differentiable round trip (B, P, W) -> (B, P, W)."""
        self._require_ready()
        out, _ = self.module(signals)
        return out

    # -- persistence --------------------------------------------------------

    def fingerprint(self) -> str:
        self._require_ready()
        return ckpt.module_fingerprint(self.module)

    def save(self, path) -> str:
        self._require_ready()
        meta = {"mode": self.mode, "window": self.window, "fps": self.fps,
                "hidden": self.hidden, "kernel": self.kernel,
                "train_log": self.train_log}
        return ckpt.save_checkpoint(path, "phase-extractor",
                                    self.module.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "PhaseExtractor":
        state, meta, _ = ckpt.load_checkpoint(path, "phase-extractor")
        ex = cls(mode=meta["mode"], window=meta["window"], fps=meta["fps"],
                 hidden=meta["hidden"], kernel=meta["kernel"],
                 train_log=list(meta.get("train_log", [])))
        ex.module = ex._init_module()
        ex.module.load_state_dict(state)
        ex.module.eval()
        for p in ex.module.parameters():
            p.requires_grad_(False)
        ex.frozen = True
        return ex


def train_stage1(corpus, hyper: Stage1Hyper, mode: str = "parts",
                 fps: float | None = None) -> PhaseExtractor:
    """Fit the periodic autoencoders by summed squared reconstruction error.

    corpus: list of (Motion, GroundTruthPhase) or plain Motion objects.
    Deterministic for a fixed seed on a fixed thread count.
    """
    motions = [c[0] if isinstance(c, tuple) else c for c in corpus]
    if not motions:
        raise ShapeError("training corpus is empty")
    ex = PhaseExtractor(mode=mode, fps=fps if fps is not None else motions[0].fps)
    torch.manual_seed(hyper.seed)
    ex.module = ex._init_module()

    sig = np.stack([ex.signal_matrix(m) for m in motions])  # (N, P, W)
    data = torch.from_numpy(sig).float()
    n = data.shape[0]
    # per-part scale: RMS of the centered signals across the corpus
    centered = data - data.mean(dim=-1, keepdim=True)
    rms = centered.pow(2).mean(dim=(0, 2)).sqrt().clamp(min=1e-6)
    with torch.no_grad():
        ex.module.scale.copy_(rms.view(1, -1, 1))
    opt = torch.optim.Adam(
        [{"params": ex.module.encoders.parameters()},
         {"params": ex.module.decoder.parameters(),
          "lr": hyper.lr * hyper.decoder_lr_scale}],
        lr=hyper.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=hyper.epochs)
    gen = torch.Generator().manual_seed(hyper.seed)
    ex.frozen = True  # module exists; flip back if training dies mid-way
    try:
        for epoch in range(hyper.epochs):
            perm = torch.randperm(n, generator=gen)
            total = 0.0
            for start in range(0, n, hyper.batch_size):
                batch = data[perm[start : start + hyper.batch_size]]
                out, _ = ex.module(batch)
                err = (out - batch) / ex.module.scale
                loss = (err ** 2).sum(dim=(1, 2)).mean()
                if not torch.isfinite(loss):
                    raise TrainingDiverged(
                        f"stage I loss non-finite at epoch {epoch}",
                        checkpoint=ex)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.detach().item() * batch.shape[0]
            sched.step()
            ex.train_log.append({"epoch": epoch, "loss": total / n})
    except TrainingDiverged:
        ex.frozen = False
        raise
    ex.module.eval()
    for p in ex.module.parameters():
        p.requires_grad_(False)
    return ex
