"""Shared fixtures: a disk-cached bundle of trained artifacts.

Training the full stack (VAE, phase extractors, two backbones, six control
models) takes tens of minutes, so artifacts are built at most once per
configuration fingerprint and reused across pytest runs from
``tests/_artifacts/run-<fp>/``. Wall-clock build durations are recorded in
``timings.json`` next to the checkpoints; time-budget assertions read the
recorded measurement so cached runs still check the number that was
actually observed on this machine. Delete the cache directory to force a
full retrain.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from pathlib import Path

import pytest
import torch

from phasectl import pipeline as pl
from phasectl.config import RunConfig

torch.set_num_threads(1)

TESTS_DIR = Path(__file__).resolve().parent
CACHE_DIR = TESTS_DIR / "_artifacts"

KINDS = ("diffusion", "flow")


def config_fingerprint(cfg: RunConfig) -> str:
    blob = json.dumps(cfg.resolved(), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def with_sections(cfg: RunConfig, **section_fields) -> RunConfig:
    """Copy of cfg with replacements like backbone={'kind': 'flow'}."""
    updates = {}
    for section, field_map in section_fields.items():
        current = getattr(cfg, section)
        updates[section] = dataclasses.replace(current, **field_map)
    return dataclasses.replace(cfg, **updates)


class ArtifactStore:
    """Builds and caches every trained artifact under one workdir."""

    def __init__(self, workdir: Path, cfg: RunConfig):
        self.workdir = workdir
        self.cfg = cfg
        self.timings_path = workdir / "timings.json"

    # -- timing ledger ----------------------------------------------------

    def timings(self) -> dict:
        if self.timings_path.exists():
            return json.loads(self.timings_path.read_text())
        return {}

    def _record(self, name: str, seconds: float) -> None:
        data = self.timings()
        data[name] = round(seconds, 3)
        self.timings_path.write_text(json.dumps(data, indent=2, sort_keys=True))

    def _ensure(self, path: Path, name: str, build) -> Path:
        if path.exists():
            return path
        t0 = time.time()
        build()
        self._record(name, time.time() - t0)
        assert path.exists(), f"builder for {name} did not produce {path}"
        return path

    # -- artifact builders --------------------------------------------------

    def vae(self) -> Path:
        return self._ensure(
            pl.vae_path(self.workdir), "vae",
            lambda: pl.train_vae_artifact(self.cfg, self.workdir))

    def extractor(self, mode: str = "parts") -> Path:
        self.vae()
        cfg = with_sections(self.cfg, phase={"mode": mode})
        return self._ensure(
            pl.extractor_path(self.workdir, mode), f"phase-{mode}",
            lambda: pl.train_extractor_artifact(cfg, self.workdir))

    def backbone(self, kind: str) -> Path:
        self.vae()
        cfg = with_sections(self.cfg, backbone={"kind": kind})
        return self._ensure(
            pl.backbone_path(self.workdir, kind), f"backbone-{kind}",
            lambda: pl.train_backbone_artifact(cfg, self.workdir))

    def control(self, kind: str, mode: str = "controlnet",
                phase_mode: str = "parts") -> Path:
        self.extractor(phase_mode)
        self.backbone(kind)
        cfg = with_sections(self.cfg, backbone={"kind": kind},
                            control={"mode": mode},
                            phase={"mode": phase_mode})
        name = f"control-{kind}-{mode}-{phase_mode}"
        return self._ensure(
            pl.control_path(self.workdir, kind, mode, phase_mode), name,
            lambda: pl.train_control_artifact(cfg, self.workdir))

    # -- assembled pipelines ------------------------------------------------

    def pipeline(self, kind: str, mode: str = "controlnet",
                 phase_mode: str = "parts") -> pl.Pipeline:
        self.control(kind, mode, phase_mode)
        cfg = with_sections(self.cfg, backbone={"kind": kind},
                            control={"mode": mode},
                            phase={"mode": phase_mode})
        return pl.Pipeline.load(cfg, self.workdir)


@pytest.fixture(scope="session")
def run_config() -> RunConfig:
    return RunConfig()


@pytest.fixture(scope="session")
def store(run_config) -> ArtifactStore:
    workdir = CACHE_DIR / f"run-{config_fingerprint(run_config)}"
    workdir.mkdir(parents=True, exist_ok=True)
    return ArtifactStore(workdir, run_config)


@pytest.fixture(scope="session", params=KINDS)
def kind(request) -> str:
    return request.param


@pytest.fixture(scope="session")
def holdout(run_config):
    """Noise-free reference motions shared by response/locality checks."""
    return pl.holdout_for(run_config)


@pytest.fixture(scope="session")
def pipe_diffusion(store) -> pl.Pipeline:
    return store.pipeline("diffusion")
