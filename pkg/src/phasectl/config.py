"""Run configuration: strict YAML with documented defaults.

Every section and key is declared here; unknown keys anywhere in the file
are rejected so typos cannot silently fall back to defaults. `resolved()`
returns the full effective mapping (defaults filled in), which commands
echo into their output directories for reproducibility.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .corpus import CLASS_NAMES
from .errors import ConfigInvalid


def _build(cls, data: dict, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigInvalid(f"{where} must be a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigInvalid(f"unknown config keys in {where}: {unknown}")
    kwargs = {}
    for f in fields(cls):
        if f.name in data:
            v = data[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as ex:
        raise ConfigInvalid(f"bad value in {where}: {ex}") from ex


@dataclass(frozen=True)
class CorpusSection:
    n_samples: int = 200
    n_frames: int = 64
    fps: float = 20.0
    classes: tuple = CLASS_NAMES
    noise_level: float = 0.02
    amp_jitter: tuple = (0.55, 1.70)
    holdout_samples: int = 50  # noise-free references for evaluation
    holdout_seed: int = 777


@dataclass(frozen=True)
class VAESection:
    epochs: int = 1500
    batch_size: int = 32
    lr: float = 1e-3
    kl_weight: float = 1e-4


@dataclass(frozen=True)
class PhaseSection:
    epochs: int = 800
    batch_size: int = 32
    lr: float = 1e-3
    decoder_lr_scale: float = 1.0
    mode: str = "parts"  # parts | whole


@dataclass(frozen=True)
class BackboneSection:
    kind: str = "diffusion"  # diffusion | flow
    epochs: int = 3000
    batch_size: int = 64
    lr: float = 2e-3
    cond_dropout: float = 0.1


@dataclass(frozen=True)
class ControlSection:
    mode: str = "controlnet"  # controlnet | concat
    steps: int = 2500
    batch_size: int = 64
    lr: float = 1e-3
    warmup: int = 100
    lambda_phase: float = 0.5
    lambda_latent: float = 1.0
    lambda_anchor: float = 1.0
    lambda_pair: float = 2.0
    cond_dropout: float = 0.1
    d_g: int = 32
    val_fraction: float = 0.1
    eval_every: int = 250
    # the control stage trains on its own larger corpus: the backbone corpus
    # is small enough that the mirror memorizes it (train/validation gap)
    n_samples: int = 1760
    corpus_seed: int = 11
    # pair every sample with a generator-realized edited counterpart
    edit_variants: bool = True
    edit_seed: int = 12


@dataclass(frozen=True)
class SamplingSection:
    steps: int = 50
    guidance: float = 1.0


@dataclass(frozen=True)
class EvalSection:
    n_cases: int = 10
    samples_per_case: int = 2
    set_size: int = 24
    n_pairs: int = 12  # diversity pairs; needs set_size >= 2 * n_pairs
    latency_runs: int = 30  # 0 disables the wall-clock (non-deterministic) metric
    amp_grid: tuple = (0.5, 0.75, 1.0, 1.25, 1.5)
    freq_grid: tuple = (0.5, 1.0, 2.0)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workdir: str = "runs/desk"
    corpus: CorpusSection = field(default_factory=CorpusSection)
    vae: VAESection = field(default_factory=VAESection)
    phase: PhaseSection = field(default_factory=PhaseSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    control: ControlSection = field(default_factory=ControlSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def resolved(self) -> dict:
        d = asdict(self)

        def detuple(v):
            if isinstance(v, tuple):
                return [detuple(x) for x in v]
            if isinstance(v, dict):
                return {k: detuple(x) for k, x in v.items()}
            return v

        return detuple(d)

    def echo(self, out_dir) -> Path:
        """Write the resolved config into an output directory."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "config.resolved.yaml"
        path.write_text(yaml.safe_dump(self.resolved(), sort_keys=True))
        return path


_SECTIONS = {"corpus": CorpusSection, "vae": VAESection, "phase": PhaseSection,
             "backbone": BackboneSection, "control": ControlSection,
             "sampling": SamplingSection, "eval": EvalSection}


def config_from_dict(data: dict) -> RunConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigInvalid("config root must be a mapping")
    known = set(_SECTIONS) | {"seed", "workdir"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigInvalid(f"unknown config keys at top level: {unknown}")
    kwargs = {}
    if "seed" in data:
        if not isinstance(data["seed"], int):
            raise ConfigInvalid("seed must be an integer")
        kwargs["seed"] = data["seed"]
    if "workdir" in data:
        kwargs["workdir"] = str(data["workdir"])
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build(cls, data[name], name)
    cfg = RunConfig(**kwargs)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    if cfg.backbone.kind not in ("diffusion", "flow"):
        raise ConfigInvalid(f"backbone.kind must be diffusion|flow, got {cfg.backbone.kind!r}")
    if cfg.control.mode not in ("controlnet", "concat"):
        raise ConfigInvalid(f"control.mode must be controlnet|concat, got {cfg.control.mode!r}")
    if cfg.phase.mode not in ("parts", "whole"):
        raise ConfigInvalid(f"phase.mode must be parts|whole, got {cfg.phase.mode!r}")
    if cfg.sampling.steps < 1:
        raise ConfigInvalid("sampling.steps must be >= 1")
    if cfg.control.lambda_phase < 0:
        raise ConfigInvalid("control.lambda_phase must be >= 0")
    for g, name in ((cfg.eval.amp_grid, "eval.amp_grid"),
                    (cfg.eval.freq_grid, "eval.freq_grid")):
        if any(x <= 0 for x in g):
            raise ConfigInvalid(f"{name} entries must be positive")


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigInvalid(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as ex:
        raise ConfigInvalid(f"config file {p} is not valid YAML: {ex}") from ex
    return config_from_dict(data)


def config_fingerprint(cfg: RunConfig) -> str:
    """Stable short hash of the resolved config (artifact cache key)."""
    import hashlib

    blob = json.dumps(cfg.resolved(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
