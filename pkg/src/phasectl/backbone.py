"""Latent generative backbone: DDPM diffusion and rectified flow.

One denoiser architecture serves both objectives: nine pre-norm residual
blocks over a small token grid, each block mixing across tokens then across
channels, modulated by time + class embeddings (FiLM). Block outputs are
exposed so external adapters can add per-block residuals through the hook
interface; a hook that returns zeros is exactly a no-op.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from . import checkpoint as ckpt
from .errors import (ConfigInvalid, HookShapeError, ModelNotReady, ShapeError,
                     StepOutOfRange, TrainingDiverged)

N_TOKENS = 4
D_LATENT = 32
N_BLOCKS = 9
D_COND = 32
D_EMB = 64
T_STEPS = 100


class NoiseSchedule:
    """Linear-beta variance schedule over integer steps 1..T."""

    def __init__(self, t_steps: int = T_STEPS, beta_start: float = 1e-4,
                 beta_end: float = 2e-2):
        if t_steps < 1:
            raise ConfigInvalid("schedule needs at least one step")
        self.t_steps = t_steps
        self.betas = torch.linspace(beta_start, beta_end, t_steps,
                                    dtype=torch.float64)
        bars = torch.cumprod(1.0 - self.betas, dim=0)
        self.alpha_bars = torch.cat([torch.ones(1, dtype=torch.float64), bars])

    def _check(self, t):
        t = torch.as_tensor(t)
        if torch.any(t < 0) or torch.any(t > self.t_steps):
            raise StepOutOfRange(
                f"step must lie in [0, {self.t_steps}]")
        return t.long()

    def alpha_bar(self, t) -> torch.Tensor:
        return self.alpha_bars[self._check(t)]

    def q_sample(self, z0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
        """Forward-noise z0 to step t: sqrt(ab)*z0 + sqrt(1-ab)*eps."""
        ab = self.alpha_bar(t).to(z0.dtype)
        while ab.dim() < z0.dim():
            ab = ab.unsqueeze(-1)
        return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps


def time_features(t: torch.Tensor, dim: int = D_COND) -> torch.Tensor:
    """Sinusoidal features of a [0, 1] scalar time, (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(torch.arange(half, dtype=t.dtype, device=t.device)
                      * (-math.log(200.0) / max(half - 1, 1)))
    ang = t.unsqueeze(-1) * 200.0 * freqs
    return torch.cat([torch.cos(ang), torch.sin(ang)], dim=-1)


class MixerBlock(nn.Module):
    """Pre-norm residual block: token mixing then channel MLP, FiLM-modulated."""

    def __init__(self, n_tokens: int = N_TOKENS, d: int = D_LATENT,
                 d_emb: int = D_EMB):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.mix = nn.Linear(n_tokens, n_tokens)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 2 * d), nn.ELU(),
                                 nn.Linear(2 * d, d))
        self.mod1 = nn.Linear(d_emb, 2 * d)
        self.mod2 = nn.Linear(d_emb, 2 * d)

    def forward(self, h: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        g1, b1 = self.mod1(emb).unsqueeze(1).chunk(2, dim=-1)
        x = self.norm1(h) * (1 + g1) + b1
        h = h + self.mix(x.transpose(1, 2)).transpose(1, 2)
        g2, b2 = self.mod2(emb).unsqueeze(1).chunk(2, dim=-1)
        x = self.norm2(h) * (1 + g2) + b2
        return h + self.mlp(x)


class DenoiserNet(nn.Module):
    """Stack of mixer blocks predicting noise (diffusion) or velocity (flow).

    `cond` holds class indices; index == n_classes is the learned null class
    used for classifier-free guidance and condition dropout. `hooks`, when
    given, is either a callable `(z, t, cond) -> list of N_BLOCKS tensors`
    (each added to the corresponding block output) or an object exposing
    any of `block_residuals(z, t, cond)`, `input_shift(z, t, cond)` and
    `output_correction(z, t, cond, out)`; the input shift, if not None, is
    added to `z` before the first block, and the output correction, if not
    None, replaces the head output (it receives the original, unshifted
    noisy latent so it can do sampler-consistent algebra on it).
    """

    def __init__(self, n_classes: int):
        super().__init__()
        self.n_classes = n_classes
        self.class_emb = nn.Embedding(n_classes + 1, D_COND)
        self.time_proj = nn.Linear(D_COND, D_EMB)
        self.class_proj = nn.Linear(D_COND, D_EMB)
        self.blocks = nn.ModuleList(MixerBlock() for _ in range(N_BLOCKS))
        self.head_norm = nn.LayerNorm(D_LATENT)
        self.head = nn.Linear(D_LATENT, D_LATENT)

    def embed(self, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        return torch.nn.functional.elu(
            self.time_proj(time_features(t)) + self.class_proj(self.class_emb(cond)))

    def forward(self, z: torch.Tensor, t: torch.Tensor, cond: torch.Tensor,
                hooks=None) -> torch.Tensor:
        if z.dim() != 3 or z.shape[-2:] != (N_TOKENS, D_LATENT):
            raise ShapeError(
                f"latent must be (B, {N_TOKENS}, {D_LATENT}), got {tuple(z.shape)}")
        emb = self.embed(t, cond)
        z_in = z
        res = None
        out_fn = None
        if hooks is not None:
            shift_fn = getattr(hooks, "input_shift", None)
            res_fn = getattr(hooks, "block_residuals", None)
            out_fn = getattr(hooks, "output_correction", None)
            if res_fn is None and callable(hooks):
                res_fn = hooks
            if shift_fn is not None:
                shift = shift_fn(z, t, cond)
                if shift is not None:
                    if tuple(shift.shape) != tuple(z.shape):
                        raise HookShapeError(
                            f"input shift has shape {tuple(shift.shape)}, "
                            f"expected {tuple(z.shape)}")
                    z = z + shift
            if res_fn is not None:
                res = res_fn(z, t, cond)
            if res is not None and len(res) != N_BLOCKS:
                raise HookShapeError(
                    f"expected {N_BLOCKS} hook residuals, got {len(res)}")
        h = z
        for i, block in enumerate(self.blocks):
            h = block(h, emb)
            if res is not None:
                if tuple(res[i].shape) != tuple(h.shape):
                    raise HookShapeError(
                        f"hook residual {i} has shape {tuple(res[i].shape)}, "
                        f"expected {tuple(h.shape)}")
                h = h + res[i]
        out = self.head(self.head_norm(h))
        if out_fn is not None:
            fixed = out_fn(z_in, t, cond, out)
            if fixed is not None:
                if tuple(fixed.shape) != tuple(out.shape):
                    raise HookShapeError(
                        f"output correction has shape {tuple(fixed.shape)}, "
                        f"expected {tuple(out.shape)}")
                out = fixed
        return out


def diffusion_loss(predict, schedule: NoiseSchedule, z0: torch.Tensor,
                   cond: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Noise-prediction loss with one (t, eps) draw per sample.

    Squared error is summed over token/channel dims and averaged over the
    batch, so an all-zero predictor scores ~N_TOKENS*D_LATENT.
    """
    n = z0.shape[0]
    t = torch.randint(1, schedule.t_steps + 1, (n,), generator=gen)
    eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    zt = schedule.q_sample(z0, t, eps)
    pred = predict(zt, t.to(z0.dtype) / schedule.t_steps, cond)
    return ((pred - eps) ** 2).sum(dim=(1, 2)).mean()


def flow_loss(predict, z0: torch.Tensor, cond: torch.Tensor,
              gen: torch.Generator) -> torch.Tensor:
    """Rectified-flow matching loss with one (t, z1) draw per sample."""
    n = z0.shape[0]
    t = torch.rand((n,), generator=gen, dtype=z0.dtype)
    z1 = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    tt = t.view(-1, 1, 1)
    zt = (1.0 - tt) * z0 + tt * z1
    pred = predict(zt, t, cond)
    return ((pred - (z1 - z0)) ** 2).sum(dim=(1, 2)).mean()


@dataclass(frozen=True)
class BackboneHyper:
    epochs: int = 3000
    batch_size: int = 64
    lr: float = 2e-3
    cond_dropout: float = 0.1
    seed: int = 0


@dataclass
class GenerativeBackbone:
    """Frozen latent prior with seeded, hook-aware samplers."""

    kind: str  # "diffusion" | "flow"
    class_names: list
    net: DenoiserNet | None = None
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    frozen: bool = False
    train_log: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("diffusion", "flow"):
            raise ConfigInvalid(f"unknown backbone kind {self.kind!r}")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def null_class(self) -> int:
        return self.n_classes

    def _require_ready(self):
        if self.net is None or not self.frozen:
            raise ModelNotReady("backbone has not been trained/loaded")

    def class_id(self, name: str) -> int:
        if name not in self.class_names:
            raise ConfigInvalid(
                f"unknown class {name!r}; choose from {self.class_names}")
        return self.class_names.index(name)

    def _guided(self, z, t, cond, w: float, hooks):
        """Classifier-free guidance: u + w * (c - u).

        w == 0 evaluates only the unconditional branch and w == 1 only the
        conditional one; the blend needs both. No branch consumes RNG, so
        the shortcuts leave the sampling noise sequence untouched.
        """
        null = torch.full_like(cond, self.null_class)
        if w == 0.0:
            return self.net(z, t, null, hooks=hooks)
        if w == 1.0:
            return self.net(z, t, cond, hooks=hooks)
        un = self.net(z, t, null, hooks=hooks)
        co = self.net(z, t, cond, hooks=hooks)
        return un + w * (co - un)

    def sample(self, n: int, class_ids, seed: int, steps: int = 50,
               guidance: float = 1.0, hooks=None) -> torch.Tensor:
        """Draw n latents; identical arguments give bitwise-identical output."""
        self._require_ready()
        if steps < 1:
            raise StepOutOfRange("sampler needs at least one step")
        if self.kind == "diffusion" and steps > self.schedule.t_steps:
            raise StepOutOfRange(
                f"diffusion sampler supports at most {self.schedule.t_steps} steps")
        cond = torch.as_tensor(class_ids, dtype=torch.long)
        if cond.dim() == 0:
            cond = cond.expand(n).clone()
        if cond.shape[0] != n:
            raise ShapeError("class_ids must be scalar or length n")
        if torch.any(cond < 0) or torch.any(cond > self.null_class):
            raise ConfigInvalid("class id out of range")
        gen = torch.Generator().manual_seed(seed)
        z = torch.randn((n, N_TOKENS, D_LATENT), generator=gen)
        with torch.no_grad():
            if self.kind == "diffusion":
                z = self._sample_ddpm(z, cond, steps, guidance, hooks, gen)
            else:
                z = self._sample_flow(z, cond, steps, guidance, hooks)
        return z

    def _sample_ddpm(self, z, cond, steps, w, hooks, gen):
        ts = torch.linspace(self.schedule.t_steps, 1, steps).round().long()
        ts = torch.unique(ts, sorted=True).flip(0)
        for i, t in enumerate(ts.tolist()):
            t_prev = ts[i + 1].item() if i + 1 < len(ts) else 0
            tv = torch.full((z.shape[0],), t / self.schedule.t_steps,
                            dtype=z.dtype)
            eps_hat = self._guided(z, tv, cond, w, hooks)
            ab_t = self.schedule.alpha_bar(t).to(z.dtype)
            ab_prev = self.schedule.alpha_bar(t_prev).to(z.dtype)
            z0_hat = (z - torch.sqrt(1 - ab_t) * eps_hat) / torch.sqrt(ab_t)
            alpha_eff = ab_t / ab_prev
            beta_eff = 1 - alpha_eff
            mean = (torch.sqrt(ab_prev) * beta_eff / (1 - ab_t)) * z0_hat \
                + (torch.sqrt(alpha_eff) * (1 - ab_prev) / (1 - ab_t)) * z
            if t_prev > 0:
                var = beta_eff * (1 - ab_prev) / (1 - ab_t)
                noise = torch.randn(z.shape, generator=gen, dtype=z.dtype)
                z = mean + torch.sqrt(var) * noise
            else:
                z = mean
        return z

    def _sample_flow(self, z, cond, steps, w, hooks):
        ts = torch.linspace(1.0, 0.0, steps + 1)
        for i in range(steps):
            tv = torch.full((z.shape[0],), ts[i].item(), dtype=z.dtype)
            v = self._guided(z, tv, cond, w, hooks)
            z = z + (ts[i + 1] - ts[i]).item() * v
        return z

    def loss(self, z0: torch.Tensor, cond: torch.Tensor,
             gen: torch.Generator) -> torch.Tensor:
        predict = lambda zt, t, c: self.net(zt, t, c)
        if self.kind == "diffusion":
            return diffusion_loss(predict, self.schedule, z0, cond, gen)
        return flow_loss(predict, z0, cond, gen)

    def fingerprint(self) -> str:
        self._require_ready()
        return ckpt.module_fingerprint(self.net)

    def save(self, path) -> str:
        self._require_ready()
        meta = {"kind": self.kind, "class_names": list(self.class_names),
                "train_log": self.train_log}
        return ckpt.save_checkpoint(path, "latent-backbone",
                                    self.net.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "GenerativeBackbone":
        state, meta, _ = ckpt.load_checkpoint(path, "latent-backbone")
        bb = cls(kind=meta["kind"], class_names=list(meta["class_names"]),
                 train_log=list(meta.get("train_log", [])))
        bb.net = DenoiserNet(bb.n_classes)
        bb.net.load_state_dict(state)
        bb.net.eval()
        for p in bb.net.parameters():
            p.requires_grad_(False)
        bb.frozen = True
        return bb


def train_backbone(latents: torch.Tensor, class_ids, class_names, kind: str,
                   hyper: BackboneHyper) -> GenerativeBackbone:
    """Train a denoiser on frozen normalized latents with condition dropout."""
    bb = GenerativeBackbone(kind=kind, class_names=list(class_names))
    torch.manual_seed(hyper.seed)
    bb.net = DenoiserNet(bb.n_classes)
    data = latents.detach().float()
    cond_all = torch.as_tensor(class_ids, dtype=torch.long)
    if cond_all.shape[0] != data.shape[0]:
        raise ShapeError("class_ids must match latents")
    n = data.shape[0]
    opt = torch.optim.Adam(bb.net.parameters(), lr=hyper.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=hyper.epochs)
    gen = torch.Generator().manual_seed(hyper.seed)
    for epoch in range(hyper.epochs):
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, hyper.batch_size):
            idx = perm[start : start + hyper.batch_size]
            batch, cond = data[idx], cond_all[idx].clone()
            drop = torch.rand(cond.shape, generator=gen) < hyper.cond_dropout
            cond[drop] = bb.null_class
            loss = bb.loss(batch, cond, gen)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"backbone loss non-finite at epoch {epoch}", checkpoint=bb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.detach().item() * batch.shape[0]
        sched.step()
        bb.train_log.append({"epoch": epoch, "loss": total / n})
    bb.net.eval()
    for p in bb.net.parameters():
        p.requires_grad_(False)
    bb.frozen = True
    return bb
