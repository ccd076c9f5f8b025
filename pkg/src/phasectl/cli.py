"""Command-line entry points.

Conventions shared by every command: `--config` points at a strict YAML
run config, `--seed` overrides its seed, `--out` picks the output
directory, logs go to stderr and data products only to files. Exit codes:
0 success, 2 configuration/precondition error, 3 training divergence,
4 port unavailable.
"""
from __future__ import annotations

import json
import logging
import socket
import sys
from dataclasses import replace
from pathlib import Path

import click
import torch

from .config import RunConfig, config_fingerprint, load_config
from .corpus import CLASS_NAMES
from .errors import (ConfigInvalid, EditInvalid, FormatError, PhasectlError,
                     TrainingDiverged)
from .manifold import EditSpec, PhaseParams, apply_edit
from .motion import PARTS, load_motion, save_motion

log = logging.getLogger("phasectl")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_PORT = 4


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")


def _load_cfg(config_path, seed, workdir) -> RunConfig:
    cfg = load_config(config_path) if config_path else RunConfig()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if workdir is not None:
        cfg = replace(cfg, workdir=str(workdir))
    return cfg


def common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(),
                      default=None, help="YAML run config (strict keys).")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="Override the config seed.")(fn)
    fn = click.option("--out", "workdir", type=click.Path(), default=None,
                      help="Output/working directory (config `workdir`).")(fn)
    fn = click.option("-v", "--verbose", is_flag=True, default=False)(fn)
    return fn


class _Exit(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _run(fn) -> None:
    """Uniform error-to-exit-code mapping for all commands."""
    try:
        fn()
    except _Exit as ex:
        log.error("%s", ex)
        sys.exit(ex.code)
    except TrainingDiverged as ex:
        log.error("training diverged: %s", ex)
        sys.exit(EXIT_DIVERGED)
    except (ConfigInvalid, EditInvalid, FormatError) as ex:
        log.error("%s", ex)
        sys.exit(EXIT_CONFIG)
    except PhasectlError as ex:
        log.error("%s", ex)
        sys.exit(EXIT_CONFIG)
    sys.exit(EXIT_OK)


@click.group()
def main() -> None:
    """Body-part phase extraction, control training, and generation."""
    # fixed thread count keeps float reductions, and therefore every
    # artifact and report, bit-reproducible across invocations
    torch.set_num_threads(1)


@main.command("corpus")
@common_options
@click.option("--split", type=click.Choice(["train", "holdout"]),
              default="train", show_default=True)
def cmd_corpus(config_path, seed, workdir, verbose, split) -> None:
    """Write the synthetic motion corpus and its ground-truth phase records."""
    _setup_logging(verbose)

    def body():
        from .pipeline import corpus_for, holdout_for

        cfg = _load_cfg(config_path, seed, workdir)
        out = Path(cfg.workdir) / f"corpus-{split}"
        out.mkdir(parents=True, exist_ok=True)
        cfg.echo(out)
        samples = corpus_for(cfg) if split == "train" else holdout_for(cfg)
        truths = {}
        for i, (motion, truth) in enumerate(samples):
            name = f"{i:04d}-{motion.label}"
            save_motion(motion, out / f"{name}.motion.json")
            truths[name] = truth.to_dict()
        (out / "ground-truth.json").write_text(
            json.dumps(truths, sort_keys=True, indent=1), encoding="utf-8")
        log.info("wrote %d motions to %s", len(samples), out)

    _run(body)


def _train_command(name: str, runner_name: str, help_text: str):
    @main.command(name, help=help_text)
    @common_options
    def cmd(config_path, seed, workdir, verbose):
        _setup_logging(verbose)

        def body():
            from . import pipeline as pl

            cfg = _load_cfg(config_path, seed, workdir)
            cfg.echo(cfg.workdir)
            runner = getattr(pl, runner_name)
            path = runner(cfg, cfg.workdir)
            log.info("saved %s", path)

        _run(body)

    return cmd


cmd_train_vae = _train_command(
    "train-vae", "train_vae_artifact",
    "Train the motion VAE and freeze its checkpoint.")
cmd_train_phase = _train_command(
    "train-phase", "train_extractor_artifact",
    "Train the Stage I phase extractor (periodic autoencoder).")
cmd_train_backbone = _train_command(
    "train-backbone", "train_backbone_artifact",
    "Train the frozen latent generative backbone (diffusion or flow).")
cmd_train_control = _train_command(
    "train-control", "train_control_artifact",
    "Train the Stage II phase control model against frozen prerequisites.")


_EDIT_FLAGS = {"amp_scale": "--amp", "freq_scale": "--freq",
               "shift_delta": "--shift"}


def _parse_part_edits(pairs, field: str, edits: dict) -> None:
    """Fold `part=value` strings (or `all=value`) into {part: {field: v}}."""
    for raw in pairs:
        if "=" not in raw:
            raise EditInvalid(
                f"{_EDIT_FLAGS[field]} expects part=value, got {raw!r}")
        name, _, val = raw.partition("=")
        try:
            value = float(val)
        except ValueError as ex:
            raise EditInvalid(f"{raw!r}: value must be a number") from ex
        targets = PARTS if name == "all" else (name,)
        for part in targets:
            if part not in PARTS:
                raise EditInvalid(
                    f"unknown part {part!r}; expected one of "
                    f"{list(PARTS)} or 'all'")
            edits.setdefault(part, {})[field] = value


@main.command("generate")
@common_options
@click.option("--reference", "reference_path", type=click.Path(),
              default=None, help="Reference .motion.json to extract phase "
              "parameters from; defaults to a clean synthetic reference of "
              "--class-name.")
@click.option("--class-name", default=None,
              help=f"Motion class ({', '.join(CLASS_NAMES)}).")
@click.option("--spec", "spec_path", type=click.Path(), default=None,
              help="Edit-spec JSON file (conflicts with inline flags).")
@click.option("--amp", multiple=True, help="Inline amplitude scale, "
              "part=value or all=value; repeatable.")
@click.option("--freq", multiple=True, help="Inline frequency scale.")
@click.option("--shift", multiple=True, help="Inline shift delta (cycles).")
@click.option("--n", "n_samples", type=int, default=1, show_default=True)
@click.option("--plain", is_flag=True, default=False,
              help="Ignore the control model (unconditioned-by-phase "
              "backbone sampling).")
def cmd_generate(config_path, seed, workdir, verbose, reference_path,
                 class_name, spec_path, amp, freq, shift, n_samples,
                 plain) -> None:
    """Generate motions, optionally steering with an edited phase manifold.

    Writes the samples plus the pre- and post-edit phase parameters
    (.phase.json) so every run is auditable and re-usable as the next
    round's input.
    """
    _setup_logging(verbose)

    def body():
        from .pipeline import Pipeline, holdout_for

        if spec_path and (amp or freq or shift):
            raise _Exit(EXIT_CONFIG, "give either --spec or inline "
                        "--amp/--freq/--shift flags, not both")
        cfg = _load_cfg(config_path, seed, workdir)
        out = Path(cfg.workdir) / "generated"
        out.mkdir(parents=True, exist_ok=True)
        cfg.echo(out)

        if spec_path:
            try:
                doc = json.loads(Path(spec_path).read_text())
            except json.JSONDecodeError as ex:
                raise FormatError(f"{spec_path}: invalid JSON: {ex}") from ex
            spec = EditSpec.from_dict(doc)
        else:
            edits: dict = {}
            _parse_part_edits(amp, "amp_scale", edits)
            _parse_part_edits(freq, "freq_scale", edits)
            _parse_part_edits(shift, "shift_delta", edits)
            spec = EditSpec.from_dict({"parts": edits})

        pipe = Pipeline.load(cfg, cfg.workdir, with_control=not plain)
        if reference_path:
            reference = load_motion(reference_path)
        else:
            label = class_name or cfg.corpus.classes[0]
            if label not in cfg.corpus.classes:
                raise ConfigInvalid(
                    f"unknown class {label!r}; expected one of "
                    f"{list(cfg.corpus.classes)}")
            candidates = [m for m, _ in holdout_for(cfg) if m.label == label]
            if not candidates:
                raise ConfigInvalid(f"no holdout reference for {label!r}")
            reference = candidates[0]

        if plain:
            class_id = pipe.backbone.class_id(reference.label) \
                if reference.label in pipe.class_names else 0
            motions = pipe.generate(class_id, cfg.seed, n_samples, plain=True)
            for i, m in enumerate(motions):
                save_motion(m, out / f"sample-{i:03d}.motion.json")
            log.info("wrote %d plain samples to %s", n_samples, out)
            return

        result = pipe.edit_generate(reference, spec, seed=cfg.seed,
                                    n=n_samples)
        result["params"].save(out / "params.pre.phase.json")
        result["edited_params"].save(out / "params.post.phase.json")
        for i, m in enumerate(result["baseline"]):
            save_motion(m, out / f"baseline-{i:03d}.motion.json")
        for i, m in enumerate(result["edited"]):
            save_motion(m, out / f"edited-{i:03d}.motion.json")
        (out / "run.json").write_text(json.dumps({
            "seed": result["seed"], "class_id": result["class_id"],
            "spec": spec.to_dict(), "n": n_samples}, indent=1),
            encoding="utf-8")
        log.info("wrote %d baseline + %d edited samples to %s",
                 n_samples, n_samples, out)

    _run(body)


@main.command("eval")
@common_options
@click.option("--with-ablations", is_flag=True, default=False,
              help="Also build the {controlnet,concat} x {parts,whole} "
              "table; requires the four control checkpoints.")
def cmd_eval(config_path, seed, workdir, verbose, with_ablations) -> None:
    """Measure response curves, leakage, feature distance and diversity."""
    _setup_logging(verbose)

    def body():
        from . import evalsuite as ev
        from .pipeline import Pipeline, holdout_for

        cfg = _load_cfg(config_path, seed, workdir)
        if cfg.eval.n_cases < 1:
            raise ConfigInvalid("eval.n_cases must be >= 1")
        out = Path(cfg.workdir) / "eval"
        out.mkdir(parents=True, exist_ok=True)
        cfg.echo(out)
        pipe = Pipeline.load(cfg, cfg.workdir)
        references = [m for m, _ in holdout_for(cfg)]
        report = ev.run_eval(
            pipe, references, amp_grid=cfg.eval.amp_grid,
            freq_grid=cfg.eval.freq_grid, n_cases=cfg.eval.n_cases,
            samples_per_case=cfg.eval.samples_per_case,
            set_size=cfg.eval.set_size, n_pairs=cfg.eval.n_pairs,
            latency_runs=cfg.eval.latency_runs, seed=cfg.seed,
            config_fingerprint=config_fingerprint(cfg),
            progress=lambda msg: log.info("eval: %s", msg))
        if with_ablations:
            report.ablations = _ablation_rows(cfg, references)
        report.save(out)
        log.info("report written to %s", out / "report.json")

    _run(body)


def _ablation_rows(cfg: RunConfig, references) -> list:
    from dataclasses import replace as _re

    from . import evalsuite as ev
    from .pipeline import Pipeline

    rows = []
    refs = references[:cfg.eval.n_cases]
    for mode in ("controlnet", "concat"):
        for phase_mode in ("parts", "whole"):
            variant = _re(cfg, phase=_re(cfg.phase, mode=phase_mode),
                          control=_re(cfg.control, mode=mode))
            pipe = Pipeline.load(variant, variant.workdir)
            rows.append(ev.ablation_row(
                pipe, refs, mode=mode, phase_mode=phase_mode,
                amp_grid=cfg.eval.amp_grid, base_seed=cfg.seed,
                samples_per_case=cfg.eval.samples_per_case))
            log.info("ablation row done: %s + %s", mode, phase_mode)
    return rows


@main.command("serve")
@common_options
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8787, show_default=True)
@click.option("--persist", "persist_dir", type=click.Path(), default=None,
              help="Directory for per-session JSON-lines journals; existing "
              "journals are replayed on startup.")
def cmd_serve(config_path, seed, workdir, verbose, host, port,
              persist_dir) -> None:
    """Serve the interactive editing HTTP API (blocks until interrupted)."""
    _setup_logging(verbose)

    def body():
        import uvicorn

        from .pipeline import Pipeline
        from .server import build_app

        cfg = _load_cfg(config_path, seed, workdir)
        probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        try:
            probe.bind((host, port))
        except OSError as ex:
            raise _Exit(EXIT_PORT, f"cannot bind {host}:{port}: {ex}")
        finally:
            probe.close()
        pipe = Pipeline.load(cfg, cfg.workdir)
        app = build_app(pipe, cfg, persist_dir=persist_dir)
        log.info("serving on http://%s:%d", host, port)
        uvicorn.run(app, host=host, port=port, log_level="warning")

    _run(body)


if __name__ == "__main__":
    main()
