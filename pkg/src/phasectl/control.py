"""Stage II: steer the frozen backbone with a phase-manifold condition.

Two injection modes share one interface. `controlnet` runs a trainable
mirror of the backbone's blocks on an input copy shifted by the encoded
phase vector plus a carried clean-latent anchor estimate, and feeds each
mirrored block's output through a zero-initialized projection into the
corresponding backbone block. `concat` adds the (zero-initialized)
projection of the phase vector to the backbone input only. Both start as
exact no-ops, so an untrained control model leaves sampling bitwise
unchanged.

Training keeps the backbone, VAE and phase extractor frozen and minimizes
the backbone's own denoising/flow-matching loss plus three condition-
coupling terms: a phase-consistency loss (the clean-latent estimate is
decoded to motion, its part speed curves are re-extracted, and the
resulting manifold is compared to the conditioning manifold under a column
mask), the clean-latent estimate's squared error, and the anchor head's
direct clean-latent regression.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt
from .backbone import (D_EMB, D_LATENT, N_BLOCKS, N_TOKENS,
                       GenerativeBackbone, MixerBlock)
from .errors import (ConfigInvalid, MaskEmpty, ModelNotReady, ShapeError,
                     TrainingDiverged)
from .extractor import PhaseExtractor
from .manifold import manifold_torch
from .motion import PARTS, speed_curves_torch
from .vae import MotionVAE

D_PHASE = 32  # default pooled phase-vector width (config key control.d_g)

CONTROL_MODES = ("controlnet", "concat")


MAX_BINS = 17  # temporal spectrum bins kept when featurizing a manifold


def manifold_spectrum(P: torch.Tensor, n_cols: int) -> torch.Tensor:
    """Low-bin temporal rFFT features of a (B, T, C) manifold, flattened.

    The manifold columns are sinusoidal rails, so their spectrum places each
    channel's amplitude-and-shift pair (A cos 2piS, A sin 2piS) at the bin
    selected by its frequency — the same coordinates the motion latent is
    linear in. A time-domain summary (convs with global pooling) hides the
    shift S and forces the network to rediscover the bin structure. The
    truncated rFFT is itself a fixed full-width 1D temporal convolution bank
    (one cosine and one sine kernel per bin), evaluated exactly.
    """
    if P.dim() != 3 or P.shape[-1] != n_cols:
        raise ShapeError(
            f"manifold must be (B, T, {n_cols}), got {tuple(P.shape)}")
    spec = torch.fft.rfft(P, dim=1)[:, :MAX_BINS] / P.shape[1]
    if spec.shape[1] < MAX_BINS:
        pad = torch.zeros(P.shape[0], MAX_BINS - spec.shape[1], n_cols,
                          dtype=spec.dtype, device=P.device)
        spec = torch.cat([spec, pad], dim=1)
    return torch.cat([spec.real, spec.imag], dim=1).reshape(P.shape[0], -1)


class PhaseEncoder(nn.Module):
    """Pooled phase vector g from a manifold's temporal spectrum."""

    def __init__(self, n_cols: int, d_g: int = D_PHASE, width: int = 128):
        super().__init__()
        self.n_cols = n_cols
        self.net = nn.Sequential(
            nn.Linear(2 * MAX_BINS * n_cols, width), nn.ELU(),
            nn.Linear(width, d_g))

    def forward(self, P: torch.Tensor) -> torch.Tensor:
        return self.net(manifold_spectrum(P, self.n_cols))


class AnchorHead(nn.Module):
    """Direct clean-latent estimate from manifold spectrum and class.

    The denoising objective alone leaves the condition-to-latent coupling
    undertrained at high noise levels, exactly where the sampler commits to
    the coarse motion structure; a plainly supervised estimate of the clean
    latent gives the mirror an explicit target to carry. The class input
    uses the control's own embedding (the null class included), so guidance
    branches and condition dropout behave consistently.
    """

    def __init__(self, n_cols: int, n_classes: int, d_class: int = 32):
        super().__init__()
        flat = N_TOKENS * D_LATENT
        self.class_emb = nn.Embedding(n_classes, d_class)
        d_in = 2 * MAX_BINS * n_cols + d_class
        self.net = nn.Sequential(
            nn.Linear(d_in, 512), nn.ELU(),
            nn.Linear(512, 256), nn.ELU(),
            nn.Linear(256, flat))
        # parallel linear branch: the spectrum -> latent map is close to
        # linear (both are linear images of the same underlying harmonics),
        # and amplitude edits in particular act by scaling spectrum rows,
        # so a direct linear path carries the edit response much more
        # readily than the saturating MLP alone
        self.lin = nn.Linear(d_in, flat)

    def forward(self, feats: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        h = torch.cat([feats, self.class_emb(cond)], dim=-1)
        return (self.net(h) + self.lin(h)).reshape(-1, N_TOKENS, D_LATENT)


class ControlNet(nn.Module):
    """Trainable control branch; construction copies the backbone blocks."""

    def __init__(self, mode: str, n_cols: int, backbone_net,
                 d_g: int = D_PHASE):
        super().__init__()
        if mode not in CONTROL_MODES:
            raise ConfigInvalid(f"unknown control mode {mode!r}")
        self.mode = mode
        self.d_g = d_g
        self.phase_encoder = PhaseEncoder(n_cols, d_g)
        # g is added to every latent token as one shared channel vector
        self.inj = nn.Sequential(nn.Linear(d_g, 2 * d_g), nn.ELU(),
                                 nn.Linear(2 * d_g, D_LATENT))
        if mode == "concat":
            # concat feeds inj(g) straight into the backbone input, so the
            # zero start must live here. The controlnet branch gets its
            # exact zero start from out_proj instead; zeroing inj there too
            # would stall the phase path (its gradient passes through the
            # zero projections), leaving the condition unused for most of
            # the budget.
            nn.init.zeros_(self.inj[-1].weight)
            nn.init.zeros_(self.inj[-1].bias)
        if mode == "controlnet":
            self.mirror = nn.ModuleList(
                copy.deepcopy(b) for b in backbone_net.blocks)
            # deepcopy keeps the donor's requires_grad=False; the mirror is
            # the trainable half of the design, so re-enable gradients
            for p in self.mirror.parameters():
                p.requires_grad_(True)
            self.out_proj = nn.ModuleList(
                nn.Linear(D_LATENT, D_LATENT) for _ in range(N_BLOCKS))
            for proj in self.out_proj:
                nn.init.zeros_(proj.weight)
                nn.init.zeros_(proj.bias)
            flat = N_TOKENS * D_LATENT
            n_classes = backbone_net.class_emb.num_embeddings
            self.anchor = AnchorHead(n_cols, n_classes)
            # carries the anchor's latent estimate into the mirror input
            self.carry = nn.Linear(flat, flat)
            # the bridge adds time-scheduled channel gains on the noisy
            # latent and the anchor estimate straight into each residual:
            # the ideal high-noise correction is linear in (z_t, anchor)
            # with coefficients that depend only on the step, and routing
            # it through the mirror blocks alone trains far too slowly
            self.bridge = nn.ModuleList(
                nn.Linear(D_EMB, 2 * D_LATENT) for _ in range(N_BLOCKS))
            for lin in self.bridge:
                nn.init.zeros_(lin.weight)
                nn.init.zeros_(lin.bias)
            # steering gate: at every noise level there is a closed-form
            # output that would move the sampler's implied clean latent
            # exactly onto the anchor estimate; the gate learns, per step
            # and per condition, what fraction of that move to apply. This
            # is the only path whose steering strength does not have to be
            # re-learned through the mirror blocks at each noise level, so
            # it is what lets an edit survive the full reverse chain. Zero
            # init keeps the fresh control an exact no-op.
            self.gate = nn.Linear(D_EMB + d_g, 1)
            nn.init.zeros_(self.gate.weight)
            nn.init.zeros_(self.gate.bias)

    def shift(self, g: torch.Tensor) -> torch.Tensor:
        """Injection of the phase vector, broadcast across latent tokens."""
        return self.inj(g).unsqueeze(1).expand(-1, N_TOKENS, -1)

    def residuals(self, z: torch.Tensor, emb: torch.Tensor, g: torch.Tensor,
                  z0_anchor: torch.Tensor) -> list:
        """Mirrored-block residuals for the backbone (controlnet mode)."""
        a = self.carry(z0_anchor.reshape(z0_anchor.shape[0], -1))
        h = z + self.shift(g) + a.reshape(-1, N_TOKENS, D_LATENT)
        out = []
        for block, proj, lin in zip(self.mirror, self.out_proj, self.bridge):
            h = block(h, emb)
            gain_z, gain_a = lin(emb).unsqueeze(1).split(D_LATENT, dim=-1)
            out.append(proj(h) + gain_z * z + gain_a * z0_anchor)
        return out


class _ControlHooks:
    """Binds a control net, the frozen backbone and one manifold batch.

    The phase vector depends only on the manifold, so it is computed once
    and reused across sampler steps and guidance branches.
    """

    def __init__(self, control: "ControlNet", backbone: GenerativeBackbone,
                 P: torch.Tensor):
        self.control = control
        self.backbone_net = backbone.net
        self.kind = backbone.kind
        self.schedule = backbone.schedule
        self.feats = manifold_spectrum(P, control.phase_encoder.n_cols)
        self.g = control.phase_encoder.net(self.feats)

    def _match(self, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        if x.shape[0] == z.shape[0]:
            return x
        if x.shape[0] == 1:
            return x.expand(z.shape[0], *x.shape[1:])
        raise ShapeError(
            f"manifold batch {x.shape[0]} does not match latent batch "
            f"{z.shape[0]}")

    def input_shift(self, z, t, cond):
        if self.control.mode != "concat":
            return None
        return self.control.shift(self._match(self.g, z))

    def block_residuals(self, z, t, cond):
        if self.control.mode != "controlnet":
            return None
        emb = self.backbone_net.embed(t, cond)
        z0a = self.control.anchor(self._match(self.feats, z), cond)
        return self.control.residuals(z, emb, self._match(self.g, z), z0a)

    def output_correction(self, z, t, cond, out):
        """Gated pull of the implied clean latent toward the anchor.

        For a prediction `out`, the sampler's implied clean latent is
        (z - sqrt(1-abar)*out)/sqrt(abar) for diffusion and z - t*out for
        flow. Adding coef*(z0_implied - z0_anchor) to the output with
        coef = sqrt(abar/(1-abar)) resp. 1/t moves that implied latent
        exactly onto the anchor; the learned gate scales the move. The
        conversion coefficient is capped at 3 so low-noise steps (where it
        diverges and where the trajectory, not the condition, should win)
        fade out smoothly and cannot dominate training gradients.
        """
        if self.control.mode != "controlnet":
            return None
        emb = self.backbone_net.embed(t, cond)
        gate = self.control.gate(
            torch.cat([emb, self._match(self.g, z)], dim=-1)).unsqueeze(-1)
        z0a = self.control.anchor(self._match(self.feats, z), cond)
        if self.kind == "diffusion":
            ti = torch.round(t * self.schedule.t_steps).long().clamp(min=1)
            ab = self.schedule.alpha_bar(ti).to(z.dtype).view(-1, 1, 1)
            coef = torch.sqrt(ab / (1 - ab)).clamp(max=3.0)
            z0_impl = (z - torch.sqrt(1 - ab) * out) / torch.sqrt(ab)
        else:
            tt = t.view(-1, 1, 1).clamp(min=1e-6)
            coef = (1.0 / tt).clamp(max=3.0)
            z0_impl = z - tt * out
        return out + gate * coef * (z0_impl - z0a)


def phase_consistency_loss(extractor: PhaseExtractor, vae: MotionVAE,
                           z0_hat: torch.Tensor, target: torch.Tensor,
                           mask: torch.Tensor) -> torch.Tensor:
    """Masked L1 between the manifold of decoded motion and the target.

    target and mask are (T, C) or (B, T, C); unmasked columns contribute
    nothing. The reduction is a per-sample sum over masked elements, mean
    over the batch — the same scale convention as the denoising and
    clean-latent terms, so a unit loss weight means comparable gradient
    influence. Because the extracted amplitude and frequency are invariant
    to the sign of the underlying oscillation, this term stays well-posed
    even where the noisy trajectory has not yet committed to a phase sign.
    """
    if mask.sum() == 0:
        raise MaskEmpty("phase-consistency mask selects no columns")
    frames = vae.decode_latent(z0_hat)
    groups = [vae.skeleton.joints_of(p) for p in extractor.parts] \
        if extractor.mode == "parts" else [range(len(vae.skeleton.joint_names))]
    signals = speed_curves_torch(frames, vae.fps, groups)
    vals = extractor.params_from_signals(signals.float())
    P_hat = manifold_torch(vals, frames.shape[1])
    diff = (P_hat - target).abs() * mask
    return diff.sum() / z0_hat.shape[0]


@dataclass(frozen=True)
class Stage2Hyper:
    steps: int = 2500
    d_g: int = D_PHASE
    batch_size: int = 64
    lr: float = 1e-3
    warmup: int = 100
    lambda_phase: float = 0.5
    # weight of the clean-latent estimate error; the plain denoising loss
    # underweights high-noise steps, which is exactly where the condition
    # carries most of the usable information
    lambda_latent: float = 1.0
    # weight of the anchor head's direct clean-latent regression
    lambda_anchor: float = 1.0
    # weight of the anchor's pair-difference regression: on matched
    # (base, edited) rows the anchor's output difference is regressed onto
    # the true latent difference. Differencing cancels every factor the two
    # motions share, so this supervises exactly the edit-response direction
    # that plain per-row regression shrinks toward the conditional mean.
    lambda_pair: float = 2.0
    cond_dropout: float = 0.1
    val_fraction: float = 0.1
    eval_every: int = 250
    seed: int = 0


@dataclass
class PhaseControl:
    """A trained (or fresh) control model bound to one backbone kind."""

    mode: str
    phase_mode: str  # "parts" | "whole"
    n_cols: int
    d_g: int = D_PHASE
    net: ControlNet | None = None
    frozen: bool = False
    train_log: list = field(default_factory=list)
    val_log: list = field(default_factory=list)

    def _require_net(self):
        if self.net is None:
            raise ModelNotReady("control model has no network yet")

    def hooks(self, backbone: GenerativeBackbone, P: torch.Tensor):
        """Hook object for backbone.sample / the denoiser forward."""
        self._require_net()
        if P.dim() == 2:
            P = P.unsqueeze(0)
        return _ControlHooks(self.net, backbone, P.float())

    def fingerprint(self) -> str:
        self._require_net()
        return ckpt.module_fingerprint(self.net)

    def save(self, path) -> str:
        self._require_net()
        meta = {"mode": self.mode, "phase_mode": self.phase_mode,
                "n_cols": self.n_cols, "d_g": self.d_g,
                "zero_init": not self.frozen, "train_log": self.train_log,
                "val_log": self.val_log}
        return ckpt.save_checkpoint(path, "phase-control",
                                    self.net.state_dict(), meta)

    @classmethod
    def load(cls, path, backbone: GenerativeBackbone) -> "PhaseControl":
        state, meta, _ = ckpt.load_checkpoint(path, "phase-control")
        pc = cls(mode=meta["mode"], phase_mode=meta["phase_mode"],
                 n_cols=meta["n_cols"], d_g=meta.get("d_g", D_PHASE),
                 train_log=list(meta["train_log"]),
                 val_log=list(meta["val_log"]))
        pc.net = ControlNet(pc.mode, pc.n_cols, backbone.net, d_g=pc.d_g)
        pc.net.load_state_dict(state)
        pc.net.eval()
        for p in pc.net.parameters():
            p.requires_grad_(False)
        pc.frozen = True
        return pc


def fresh_control(backbone: GenerativeBackbone, mode: str = "controlnet",
                  phase_mode: str = "parts", seed: int = 0,
                  d_g: int = D_PHASE) -> PhaseControl:
    """Zero-influence control model mirroring the given backbone."""
    if phase_mode not in ("parts", "whole"):
        raise ConfigInvalid(f"unknown phase mode {phase_mode!r}")
    n_cols = 20 if phase_mode == "parts" else 4
    torch.manual_seed(seed)
    pc = PhaseControl(mode=mode, phase_mode=phase_mode, n_cols=n_cols, d_g=d_g)
    pc.net = ControlNet(mode, n_cols, backbone.net, d_g=d_g)
    return pc


def _estimate_clean(backbone: GenerativeBackbone, z0, cond, gen, hooks,
                    draws=None, delta=None):
    """One training draw: returns (dm_loss, clean-latent estimate).

    `draws`, when given, fixes (t, noise) instead of sampling them — used by
    finite-difference checks of the composite loss.

    `delta` retargets rows: the noisy latent is built from `z0`, but the
    regression target is shifted so a perfect prediction implies the clean
    latent `z0 - delta` instead. An all-zero row reduces exactly to the
    plain objective. Rows with a nonzero delta draw their time from the
    upper two thirds of the schedule: the reverse chain only preserves a
    structural change if it is in place before the final low-noise steps, so
    the push toward the retargeted latent has to keep acting through the
    mid-noise range, while at very low noise the retarget coefficient
    (sqrt(abar/(1-abar)) for diffusion, 1/t for flow) diverges and would
    dominate the batch; at one third of the schedule it is still <= 3.
    """
    n = z0.shape[0]
    hot = None
    if delta is not None:
        hot = delta.abs().sum(dim=(1, 2)) > 0
    if backbone.kind == "diffusion":
        T = backbone.schedule.t_steps
        if draws is not None:
            t, eps = draws
        else:
            t = torch.randint(1, T + 1, (n,), generator=gen)
            if hot is not None:
                t_hi = torch.randint(T // 3 + 1, T + 1, (n,), generator=gen)
                t = torch.where(hot, t_hi, t)
            eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
        zt = backbone.schedule.q_sample(z0, t, eps)
        tv = t.to(z0.dtype) / T
        pred = backbone.net(zt, tv, cond, hooks=hooks)
        ab = backbone.schedule.alpha_bar(t).to(z0.dtype).view(-1, 1, 1)
        target = eps
        if delta is not None:
            target = eps + torch.sqrt(ab / (1 - ab)) * delta
        dm = ((pred - target) ** 2).sum(dim=(1, 2)).mean()
        z0_hat = (zt - torch.sqrt(1 - ab) * pred) / torch.sqrt(ab)
    else:
        if draws is not None:
            t, z1 = draws
        else:
            t = torch.rand((n,), generator=gen, dtype=z0.dtype)
            if hot is not None:
                t_hi = (1.0 + 2.0 * torch.rand((n,), generator=gen,
                                               dtype=z0.dtype)) / 3.0
                t = torch.where(hot, t_hi, t)
            z1 = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
        tt = t.view(-1, 1, 1)
        zt = (1.0 - tt) * z0 + tt * z1
        pred = backbone.net(zt, t, cond, hooks=hooks)
        target = z1 - z0
        if delta is not None:
            target = target + delta / tt.clamp(min=1e-6)
        dm = ((pred - target) ** 2).sum(dim=(1, 2)).mean()
        z0_hat = zt - tt * pred
    return dm, z0_hat


def train_stage2(backbone: GenerativeBackbone, vae: MotionVAE,
                 extractor: PhaseExtractor, corpus, hyper: Stage2Hyper,
                 mode: str = "controlnet", variants=None) -> PhaseControl:
    """Train a control model by identity and edited self-conditioning.

    Each reference motion conditions its own reconstruction: the manifold of
    the reference is the control input and the phase-consistency target with
    an all-ones mask. `variants`, when given, adds edited rows — triples
    (index, motion, edit) where the motion realizes `edit` applied to corpus
    sample `index`; the control input is then the analytically edited base
    manifold (exactly what a user-supplied edit produces at test time) and
    the targets come from the realized motion.

    Each variant contributes two rows. A consistent row noises the edited
    latent and regresses the plain objective, teaching the on-distribution
    mapping from edited manifolds. A disagreement row noises the *base*
    latent while the condition and the targets still say *edited*: during
    sampling the trajectory routinely disagrees with an edited manifold
    (early steps carry no edit), and a model trained only on self-consistent
    pairs resolves that conflict in favor of the trajectory, ignoring the
    condition. Disagreement rows teach the opposite preference.

    Backbone/VAE/extractor stay frozen; only control parameters are
    optimized.
    """
    motions = [c[0] if isinstance(c, tuple) else c for c in corpus]
    if not motions:
        raise ShapeError("training corpus is empty")
    pc = fresh_control(backbone, mode=mode, phase_mode=extractor.mode,
                       seed=hyper.seed, d_g=hyper.d_g)
    before = backbone.fingerprint()

    with torch.no_grad():
        z0_all = vae.encode_batch(motions)
        sigs = torch.from_numpy(
            np.stack([extractor.signal_matrix(m) for m in motions])).float()
        vals = extractor.params_from_signals(sigs)
        P_all = manifold_torch(vals, motions[0].n_frames).float()
    cond_all = torch.tensor([backbone.class_id(m.label) for m in motions])

    delta_all = torch.zeros_like(z0_all)
    if variants:
        edited_motions = [m for _, m, _ in variants]
        with torch.no_grad():
            z0_var = vae.encode_batch(edited_motions)
            rows = []
            for i, _, spec in variants:
                v = vals[i].clone()
                for name, e in spec.parts.items():
                    # whole mode has one row; part edits degrade onto it
                    r = PARTS.index(name) if v.shape[0] > 1 else 0
                    v[r, :, 0] = v[r, :, 0] * e.amp_scale
                    v[r, :, 1] = v[r, :, 1] * e.freq_scale
                    v[r, :, 2] = torch.remainder(v[r, :, 2] + e.shift_delta,
                                                 1.0)
                rows.append(v)
            P_var = manifold_torch(torch.stack(rows),
                                   motions[0].n_frames).float()
        base_idx = torch.tensor([i for i, _, _ in variants])
        cond_var = cond_all[base_idx]
        z0_base = z0_all[base_idx]
        n_id = z0_all.shape[0]
        pair_rows = torch.stack(
            [base_idx, torch.arange(n_id, n_id + z0_var.shape[0])], dim=1)
        z0_all = torch.cat([z0_all, z0_var, z0_base])
        P_all = torch.cat([P_all, P_var, P_var])
        cond_all = torch.cat([cond_all, cond_var, cond_var])
        delta_all = torch.cat([delta_all, torch.zeros_like(z0_var),
                               z0_base - z0_var])
    else:
        pair_rows = None

    n = z0_all.shape[0]
    n_val = max(4, int(round(hyper.val_fraction * n)))
    split_gen = torch.Generator().manual_seed(hyper.seed + 101)
    order = torch.randperm(n, generator=split_gen)
    val_idx, tr_idx = order[:n_val], order[n_val:]
    mask = torch.ones(motions[0].n_frames, pc.n_cols)

    params = [p for p in pc.net.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=hyper.lr)
    ramp = lambda s: min((s + 1) / max(hyper.warmup, 1), 1.0) * 0.5 * (
        1 + math.cos(math.pi * s / hyper.steps))
    sched = torch.optim.lr_scheduler.LambdaLR(opt, ramp)
    gen = torch.Generator().manual_seed(hyper.seed)

    def latent_err(z0_hat, z0_ref):
        return (z0_hat - z0_ref).pow(2).sum(dim=(1, 2)).mean()

    def anchor_err(hooks, cond, z0_ref):
        if pc.mode != "controlnet":
            return torch.zeros(())
        z0a = pc.net.anchor(hooks.feats, cond)
        return latent_err(z0a, z0_ref)

    use_pairs = pc.mode == "controlnet" and pair_rows is not None
    feats_all = manifold_spectrum(P_all, pc.n_cols) if use_pairs else None

    def pair_err(rows):
        if not use_pairs:
            return torch.zeros(())
        b, v = rows[:, 0], rows[:, 1]
        da = pc.net.anchor(feats_all[v], cond_all[v]) \
            - pc.net.anchor(feats_all[b], cond_all[b])
        return latent_err(da, z0_all[v] - z0_all[b])

    if use_pairs:
        val_pairs = pair_rows[torch.randperm(
            pair_rows.shape[0],
            generator=torch.Generator().manual_seed(hyper.seed + 77))[:64]]

    def validation():
        vgen = torch.Generator().manual_seed(hyper.seed + 999)
        with torch.no_grad():
            hooks = pc.hooks(backbone, P_all[val_idx])
            dm, z0_hat = _estimate_clean(
                backbone, z0_all[val_idx], cond_all[val_idx], vgen, hooks,
                delta=delta_all[val_idx])
            z0_tgt = z0_all[val_idx] - delta_all[val_idx]
            ph = phase_consistency_loss(extractor, vae, z0_hat,
                                        P_all[val_idx], mask)
            lat = latent_err(z0_hat, z0_tgt)
            anc = anchor_err(hooks, cond_all[val_idx], z0_tgt)
            pr = pair_err(val_pairs) if use_pairs else torch.zeros(())
        return {"dm": dm.item(), "phase": ph.item(), "latent": lat.item(),
                "anchor": anc.item(), "pair": pr.item()}

    pc.val_log.append({"step": 0, **validation()})

    for step in range(hyper.steps):
        idx = torch.randint(0, tr_idx.shape[0], (hyper.batch_size,),
                            generator=gen)
        idx = tr_idx[idx]
        cond = cond_all[idx].clone()
        drop = torch.rand(cond.shape, generator=gen) < hyper.cond_dropout
        cond[drop] = backbone.null_class
        hooks = pc.hooks(backbone, P_all[idx])
        dm, z0_hat = _estimate_clean(backbone, z0_all[idx], cond, gen, hooks,
                                     delta=delta_all[idx])
        z0_tgt = z0_all[idx] - delta_all[idx]
        ph = phase_consistency_loss(extractor, vae, z0_hat, P_all[idx], mask)
        lat = latent_err(z0_hat, z0_tgt)
        anc = anchor_err(hooks, cond, z0_tgt)
        pr = torch.zeros(())
        if use_pairs:
            pidx = torch.randint(0, pair_rows.shape[0], (hyper.batch_size,),
                                 generator=gen)
            pr = pair_err(pair_rows[pidx])
        loss = dm + hyper.lambda_phase * ph + hyper.lambda_latent * lat \
            + hyper.lambda_anchor * anc + hyper.lambda_pair * pr
        if not torch.isfinite(loss):
            raise TrainingDiverged(
                f"stage II loss non-finite at step {step}", checkpoint=pc)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        pc.train_log.append({"step": step, "dm": dm.item(),
                             "phase": ph.item(), "latent": lat.item(),
                             "anchor": anc.item(), "pair": pr.item()})
        if (step + 1) % hyper.eval_every == 0 or step + 1 == hyper.steps:
            pc.val_log.append({"step": step + 1, **validation()})

    if backbone.fingerprint() != before:
        raise TrainingDiverged("backbone weights changed during stage II",
                               checkpoint=pc)
    pc.net.eval()
    for p in pc.net.parameters():
        p.requires_grad_(False)
    pc.frozen = True
    return pc


def generate_controlled(backbone: GenerativeBackbone, vae: MotionVAE,
                        control: PhaseControl | None, manifold, class_ids,
                        n: int, seed: int, steps: int = 50,
                        guidance: float = 1.0) -> torch.Tensor:
    """Sample latents, optionally steered by a manifold condition."""
    hooks = None
    if control is not None:
        if manifold is None:
            raise ConfigInvalid("controlled generation needs a manifold")
        P = manifold if isinstance(manifold, torch.Tensor) \
            else torch.as_tensor(np.asarray(manifold))
        hooks = control.hooks(backbone, P)
    return backbone.sample(n, class_ids, seed=seed, steps=steps,
                           guidance=guidance, hooks=hooks)
