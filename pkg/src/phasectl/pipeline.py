"""Artifact orchestration and the end-to-end generation facade.

Training commands write checkpoints plus CSV logs under one working
directory; inference-side code loads them through `Pipeline`, which bundles
the frozen VAE, phase extractor, backbone and (optionally) control model
behind motion-level generate/edit calls.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneHyper, GenerativeBackbone, train_backbone
from .config import RunConfig
from .control import (PhaseControl, Stage2Hyper, fresh_control,
                      generate_controlled, train_stage2)
from .corpus import CorpusConfig, make_corpus, make_edit_variants
from .errors import ConfigInvalid, EditInvalid
from .extractor import PhaseExtractor, Stage1Hyper, train_stage1
from .manifold import EditSpec, PhaseParams, apply_edit, manifold_torch
from .motion import Motion
from .vae import MotionVAE, VAEHyper, train_vae


def vae_path(workdir) -> Path:
    return Path(workdir) / "vae.ckpt"


def extractor_path(workdir, mode: str = "parts") -> Path:
    return Path(workdir) / f"phase-{mode}.ckpt"


def backbone_path(workdir, kind: str) -> Path:
    return Path(workdir) / f"backbone-{kind}.ckpt"


def control_path(workdir, kind: str, mode: str, phase_mode: str) -> Path:
    return Path(workdir) / f"control-{kind}-{mode}-{phase_mode}.ckpt"


def corpus_for(cfg: RunConfig):
    c = cfg.corpus
    return make_corpus(CorpusConfig(
        n_samples=c.n_samples, n_frames=c.n_frames, fps=c.fps,
        classes=tuple(c.classes), noise_level=c.noise_level,
        amp_jitter=tuple(c.amp_jitter)), seed=cfg.seed)


def holdout_for(cfg: RunConfig):
    """Noise-free held-out references used by evaluation and acceptance."""
    c = cfg.corpus
    return make_corpus(CorpusConfig(
        n_samples=c.holdout_samples, n_frames=c.n_frames, fps=c.fps,
        classes=tuple(c.classes), noise_level=0.0,
        amp_jitter=tuple(c.amp_jitter)), seed=c.holdout_seed)


def write_log_csv(path, log: list) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not log:
        path.write_text("")
        return
    keys = list(log[0].keys())
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(log)


def _require(path: Path, what: str):
    if not path.exists():
        raise ConfigInvalid(f"missing {what} checkpoint: {path}")
    return path


def train_vae_artifact(cfg: RunConfig, workdir) -> Path:
    corpus = corpus_for(cfg)
    hyper = VAEHyper(epochs=cfg.vae.epochs, batch_size=cfg.vae.batch_size,
                     lr=cfg.vae.lr, kl_weight=cfg.vae.kl_weight, seed=cfg.seed)
    vae = train_vae(corpus, hyper)
    path = vae_path(workdir)
    path.parent.mkdir(parents=True, exist_ok=True)
    vae.save(path)
    write_log_csv(Path(workdir) / "logs" / "vae.csv", vae.train_log)
    return path


def train_extractor_artifact(cfg: RunConfig, workdir) -> Path:
    corpus = corpus_for(cfg)
    hyper = Stage1Hyper(epochs=cfg.phase.epochs,
                        batch_size=cfg.phase.batch_size, lr=cfg.phase.lr,
                        decoder_lr_scale=cfg.phase.decoder_lr_scale,
                        seed=cfg.seed)
    ex = train_stage1(corpus, hyper, mode=cfg.phase.mode)
    path = extractor_path(workdir, cfg.phase.mode)
    path.parent.mkdir(parents=True, exist_ok=True)
    ex.save(path)
    write_log_csv(Path(workdir) / "logs" / f"phase-{cfg.phase.mode}.csv",
                  ex.train_log)
    return path


def train_backbone_artifact(cfg: RunConfig, workdir) -> Path:
    vae = MotionVAE.load(_require(vae_path(workdir), "VAE"))
    corpus = corpus_for(cfg)
    motions = [m for m, _ in corpus]
    latents = vae.encode_batch(motions)
    classes = tuple(cfg.corpus.classes)
    cond = [classes.index(m.label) for m in motions]
    hyper = BackboneHyper(epochs=cfg.backbone.epochs,
                          batch_size=cfg.backbone.batch_size,
                          lr=cfg.backbone.lr,
                          cond_dropout=cfg.backbone.cond_dropout,
                          seed=cfg.seed)
    bb = train_backbone(latents, cond, classes, cfg.backbone.kind, hyper)
    path = backbone_path(workdir, cfg.backbone.kind)
    bb.save(path)
    write_log_csv(Path(workdir) / "logs" / f"backbone-{cfg.backbone.kind}.csv",
                  bb.train_log)
    return path


def control_corpus_for(cfg: RunConfig) -> CorpusConfig:
    """The control stage's own (larger) corpus configuration."""
    c = cfg.corpus
    return CorpusConfig(
        n_samples=cfg.control.n_samples, n_frames=c.n_frames, fps=c.fps,
        classes=tuple(c.classes), noise_level=c.noise_level,
        amp_jitter=tuple(c.amp_jitter))


def train_control_artifact(cfg: RunConfig, workdir) -> Path:
    vae = MotionVAE.load(_require(vae_path(workdir), "VAE"))
    ex = PhaseExtractor.load(
        _require(extractor_path(workdir, cfg.phase.mode), "phase extractor"))
    bb = GenerativeBackbone.load(
        _require(backbone_path(workdir, cfg.backbone.kind), "backbone"))
    ccfg = control_corpus_for(cfg)
    corpus = make_corpus(ccfg, seed=cfg.control.corpus_seed)
    variants = make_edit_variants(ccfg, cfg.control.corpus_seed,
                                  cfg.control.edit_seed) \
        if cfg.control.edit_variants else None
    hyper = Stage2Hyper(steps=cfg.control.steps, d_g=cfg.control.d_g,
                        batch_size=cfg.control.batch_size, lr=cfg.control.lr,
                        warmup=cfg.control.warmup,
                        lambda_phase=cfg.control.lambda_phase,
                        lambda_latent=cfg.control.lambda_latent,
                        lambda_anchor=cfg.control.lambda_anchor,
                        lambda_pair=cfg.control.lambda_pair,
                        cond_dropout=cfg.control.cond_dropout,
                        val_fraction=cfg.control.val_fraction,
                        eval_every=cfg.control.eval_every, seed=cfg.seed)
    pc = train_stage2(bb, vae, ex, corpus, hyper, mode=cfg.control.mode,
                      variants=variants)
    path = control_path(workdir, cfg.backbone.kind, cfg.control.mode,
                        cfg.phase.mode)
    pc.save(path)
    name = path.stem
    write_log_csv(Path(workdir) / "logs" / f"{name}.csv", pc.train_log)
    write_log_csv(Path(workdir) / "logs" / f"{name}-val.csv", pc.val_log)
    return path


@dataclass
class Pipeline:
    """Frozen model bundle exposing motion-level generation and editing."""

    vae: MotionVAE
    extractor: PhaseExtractor
    backbone: GenerativeBackbone
    control: PhaseControl | None
    steps: int = 50
    guidance: float = 1.0

    @classmethod
    def load(cls, cfg: RunConfig, workdir, with_control: bool = True
             ) -> "Pipeline":
        vae = MotionVAE.load(_require(vae_path(workdir), "VAE"))
        ex = PhaseExtractor.load(
            _require(extractor_path(workdir, cfg.phase.mode),
                     "phase extractor"))
        bb = GenerativeBackbone.load(
            _require(backbone_path(workdir, cfg.backbone.kind), "backbone"))
        pc = None
        if with_control:
            pc = PhaseControl.load(
                _require(control_path(workdir, cfg.backbone.kind,
                                      cfg.control.mode, cfg.phase.mode),
                         "control model"), bb)
        return cls(vae=vae, extractor=ex, backbone=bb, control=pc,
                   steps=cfg.sampling.steps, guidance=cfg.sampling.guidance)

    @property
    def class_names(self):
        return tuple(self.backbone.class_names)

    def params_of(self, motion: Motion) -> np.ndarray:
        """(P, K, 4) phase parameters of a reference motion."""
        return self.extractor.extract(motion)

    def manifold_of(self, values: np.ndarray) -> torch.Tensor:
        v = torch.as_tensor(np.asarray(values, dtype=np.float64))
        return manifold_torch(v, self.vae.n_frames).float()

    def generate(self, class_id: int, seed: int, n: int = 1,
                 params_values=None, plain: bool = False) -> list:
        """Sample motions; with params and a control model, generation is
        steered by the corresponding phase manifold."""
        control = None if plain else self.control
        manifold = None
        if control is not None:
            if params_values is None:
                raise ConfigInvalid("controlled generation needs phase "
                                    "parameters (or pass plain=True)")
            manifold = self.manifold_of(params_values)
        z = generate_controlled(self.backbone, self.vae, control, manifold,
                                class_id, n, seed=seed, steps=self.steps,
                                guidance=self.guidance)
        label = self.backbone.class_names[class_id] \
            if class_id < len(self.backbone.class_names) else ""
        return [self.vae.decode(z[i], label=label) for i in range(n)]

    def edit_generate(self, reference: Motion, spec: EditSpec, seed: int,
                      n: int = 1) -> dict:
        """Baseline (identity) + edited generation with matched seeds."""
        if self.extractor.mode != "parts":
            raise ConfigInvalid("part editing needs a parts-mode extractor")
        params = self.extractor.extract_phase(reference)
        edited = apply_edit(params, spec)
        class_id = self.backbone.class_id(reference.label) \
            if reference.label in self.backbone.class_names else 0
        baseline = self.generate(class_id, seed, n,
                                 params_values=params.values)
        edited_m = self.generate(class_id, seed, n,
                                 params_values=edited.values)
        return {"params": params, "edited_params": edited,
                "baseline": baseline, "edited": edited_m,
                "class_id": class_id, "seed": seed}
