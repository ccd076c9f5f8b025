"""Measurement harness for the controlled generator.

Everything here measures motions with the plain-DFT oracle, never with the
learned extractor, so the numbers grade the pipeline against an independent
instrument. The driver functions follow one discipline throughout: an edited
generation is always compared against a baseline generation that used the
same seed and an identity edit, so the edit spec is the only varied factor.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import EditInvalid, ReferenceDegenerate, ShapeError
from .manifold import EditSpec, apply_edit
from .motion import PARTS, Motion, kinematic_signal, whole_body_signal
from .spectral import oracle_phase

log = logging.getLogger(__name__)

ATTRIBUTES = ("amplitude", "frequency")
DEGENERATE_EPS = 1e-6


def _measure(motion: Motion, part: str, attribute: str) -> float:
    """Oracle amplitude or dominant frequency of one part's speed signal.

    part "global" measures the whole-body signal, used for global-edit
    curves where no single part is the target.
    """
    if attribute not in ATTRIBUTES:
        raise EditInvalid(f"unknown attribute {attribute!r}; "
                          f"expected one of {ATTRIBUTES}")
    if part == "global":
        values = whole_body_signal(motion).values
    else:
        values = kinematic_signal(motion, part).values
    amp, freq, _, _ = oracle_phase(values, k=1)[0]
    return amp if attribute == "amplitude" else freq


def effective_ratio(generated: Motion, reference: Motion, part: str,
                    attribute: str = "amplitude") -> float:
    """X'/X: the measured attribute on `generated` over the same on
    `reference`. The realized control response for one sample."""
    x = _measure(reference, part, attribute)
    if abs(x) < DEGENERATE_EPS:
        raise ReferenceDegenerate(
            f"reference {attribute} of {part!r} is {x:.2e} (< {DEGENERATE_EPS})")
    return _measure(generated, part, attribute) / x


@dataclass
class ResponseCurve:
    """Mean/std of the effective ratio across cases per grid point."""

    attribute: str
    part: str
    grid: tuple
    means: tuple
    stds: tuple
    n_cases: int
    skipped: int = 0

    def __post_init__(self):
        self.grid = tuple(float(x) for x in self.grid)
        self.means = tuple(float(m) for m in self.means)
        self.stds = tuple(float(s) for s in self.stds)
        if list(self.grid) != sorted(self.grid):
            raise EditInvalid("response grid must be sorted ascending")
        if any(x <= 0 for x in self.grid):
            raise EditInvalid("response grid values must be positive")

    @property
    def slope(self) -> float:
        """Least-squares slope of mean ratio against the grid."""
        return float(np.polyfit(self.grid, self.means, 1)[0])

    @property
    def spearman(self) -> float:
        """Rank correlation between grid and mean ratio (1.0 = monotone)."""
        from scipy.stats import spearmanr

        # the grid is strictly increasing by construction, so strictly
        # increasing means have identical ranks and the correlation is
        # exactly 1 by definition; computing it through pearson-of-ranks
        # would report 1 - 1e-16 instead
        if np.all(np.diff(self.means) > 0):
            return 1.0
        return float(spearmanr(self.grid, self.means).statistic)

    def to_dict(self) -> dict:
        return {"attribute": self.attribute, "part": self.part,
                "grid": list(self.grid), "means": list(self.means),
                "stds": list(self.stds), "n_cases": self.n_cases,
                "skipped": self.skipped}

    def to_csv(self, path) -> None:
        rows = ["x,mean_ratio,std_ratio"]
        rows += [f"{x},{m},{s}"
                 for x, m, s in zip(self.grid, self.means, self.stds)]
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(rows) + "\n")


def _spec_for(part: str, attribute: str, x: float) -> EditSpec:
    kw = {"amp_scale": x} if attribute == "amplitude" else {"freq_scale": x}
    if part == "global":
        return EditSpec.global_edit(**kw)
    return EditSpec.single(part, **kw)


def _whole_mode_values(pipeline, reference: Motion, spec: EditSpec):
    """Edit application for the whole-body-phase ablation.

    A single-signal extractor has no per-part rows to scale, so a part edit
    degrades to the same scalars applied to the one whole-body channel set —
    exactly the granularity loss the ablation is meant to expose.
    """
    params = pipeline.params_of(reference)  # (1, K, 4)
    out = params.copy()
    for name in spec.edited_parts:
        e = spec.parts[name]
        out[0, :, 0] *= e.amp_scale
        out[0, :, 1] *= e.freq_scale
        out[0, :, 2] = (out[0, :, 2] + e.shift_delta) % 1.0
    return params, out


def _case_params(pipeline, reference: Motion, spec: EditSpec):
    """(baseline values, edited values, class id) for one reference/spec."""
    if pipeline.extractor.mode == "parts":
        params = pipeline.extractor.extract_phase(reference)
        edited = apply_edit(params, spec)
        base_vals, edit_vals = params.values, edited.values
    else:
        base_vals, edit_vals = _whole_mode_values(pipeline, reference, spec)
    class_id = pipeline.backbone.class_id(reference.label) \
        if reference.label in pipeline.class_names else 0
    return base_vals, edit_vals, class_id


def _edit_pair(pipeline, reference: Motion, spec: EditSpec, seed: int,
               n: int):
    """(baseline motions, edited motions) with matched seeds."""
    base_vals, edit_vals, class_id = _case_params(pipeline, reference, spec)
    baseline = pipeline.generate(class_id, seed, n, params_values=base_vals)
    edited_m = pipeline.generate(class_id, seed, n, params_values=edit_vals)
    return baseline, edited_m


def _identity_set(pipeline, reference: Motion, seed: int, n: int):
    """n controlled samples conditioned on the reference's own (unedited)
    phase parameters."""
    params, _, class_id = _case_params(pipeline, reference, EditSpec())
    return pipeline.generate(class_id, seed, n, params_values=params)


def _check_skip_budget(skipped: int, total: int, what: str) -> None:
    if total and skipped * 2 > total:
        raise ReferenceDegenerate(
            f"{skipped}/{total} cases degenerate while measuring {what}")
    if skipped:
        log.info("skipped %d/%d degenerate cases while measuring %s",
                 skipped, total, what)


def response_curve(pipeline, attribute: str, part: str, grid,
                   references, base_seed: int = 0,
                   samples_per_case: int = 2) -> ResponseCurve:
    """Effective-ratio curve over a scale grid.

    For each reference case: generate a baseline (identity edit) and one
    edited batch per grid point, all sharing the case seed; per-sample
    ratios are averaged within the case, then mean/std taken across cases.
    Degenerate baselines (attribute below measurement noise) are skipped
    and counted; more than half skipped is an error.
    """
    grid = tuple(sorted(float(x) for x in grid))
    if any(x <= 0 for x in grid):
        raise EditInvalid("response grid values must be positive")
    per_case: list[list[float]] = []
    skipped = 0
    for ci, ref in enumerate(references):
        seed = base_seed + ci
        params, _, class_id = _case_params(pipeline, ref, EditSpec())
        baseline = pipeline.generate(class_id, seed, samples_per_case,
                                     params_values=params)
        base_vals = [_measure(m, part, attribute) for m in baseline]
        if any(abs(v) < DEGENERATE_EPS for v in base_vals):
            skipped += 1
            continue
        case_means = []
        for x in grid:
            if x == 1.0:
                # identity edit: bitwise the same generation as the baseline
                case_means.append(1.0)
                continue
            _, edit_vals, _ = _case_params(pipeline, ref,
                                           _spec_for(part, attribute, x))
            edited = pipeline.generate(class_id, seed, samples_per_case,
                                       params_values=edit_vals)
            ratios = [_measure(m, part, attribute) / b
                      for m, b in zip(edited, base_vals)]
            case_means.append(float(np.mean(ratios)))
        per_case.append(case_means)
    _check_skip_budget(skipped, len(per_case) + skipped,
                       f"{attribute} response of {part}")
    if not per_case:
        raise ReferenceDegenerate("no usable cases for the response curve")
    arr = np.asarray(per_case)  # (cases, grid)
    return ResponseCurve(attribute=attribute, part=part, grid=grid,
                         means=tuple(arr.mean(axis=0)),
                         stds=tuple(arr.std(axis=0)),
                         n_cases=len(per_case), skipped=skipped)


def edit_deviation(pipeline, spec: EditSpec, references, base_seed: int = 0,
                   samples_per_case: int = 2) -> dict:
    """Mean |X'/X - 1| of the oracle amplitude, split by edit membership.

    Returns {"edited": {part: dev}, "unedited": {part: dev}} over matched-seed
    baseline/edited pairs; the unedited half is the leakage measurement.
    """
    if not spec.edited_parts:
        raise EditInvalid("spec edits no parts; leakage needs an actual edit")
    if len(spec.edited_parts) == len(PARTS):
        raise EditInvalid("leakage needs a proper subset of parts edited")
    devs: dict[str, list[float]] = {p: [] for p in PARTS}
    skipped = 0
    usable = 0
    for ci, ref in enumerate(references):
        seed = base_seed + ci
        baseline, edited = _edit_pair(pipeline, ref, spec, seed,
                                      samples_per_case)
        base_amp = {p: [_measure(m, p, "amplitude") for m in baseline]
                    for p in PARTS}
        if any(abs(v) < DEGENERATE_EPS
               for vals in base_amp.values() for v in vals):
            skipped += 1
            continue
        usable += 1
        for p in PARTS:
            ratios = [_measure(m, p, "amplitude") / b
                      for m, b in zip(edited, base_amp[p])]
            devs[p].append(float(np.mean([abs(r - 1.0) for r in ratios])))
    _check_skip_budget(skipped, usable + skipped, "edit leakage")
    if not usable:
        raise ReferenceDegenerate("no usable cases for leakage")
    edited_parts = set(spec.edited_parts)
    return {
        "edited": {p: float(np.mean(devs[p])) for p in PARTS
                   if p in edited_parts},
        "unedited": {p: float(np.mean(devs[p])) for p in PARTS
                     if p not in edited_parts},
    }


def leakage(pipeline, spec: EditSpec, references, base_seed: int = 0,
            samples_per_case: int = 2) -> dict:
    """Per-unedited-part mean |X'/X - 1| (amplitude) for one edit spec."""
    return edit_deviation(pipeline, spec, references, base_seed,
                          samples_per_case)["unedited"]


# -- feature-space metrics ----------------------------------------------------

FEATURE_DIM = len(PARTS) * 5  # (A, F, B) + signal mean/std per part


def motion_features(motion: Motion) -> np.ndarray:
    """25-dim descriptor: per-part oracle (A, F, B) plus signal mean/std."""
    feats = []
    for p in PARTS:
        values = kinematic_signal(motion, p).values
        amp, freq, _, offset = oracle_phase(values, k=1)[0]
        feats += [amp, freq, offset, float(values.mean()), float(values.std())]
    return np.asarray(feats, dtype=np.float64)


def _feature_matrix(motions) -> np.ndarray:
    return np.stack([motion_features(m) for m in motions])


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition."""
    sym = (mat + mat.T) / 2.0
    evals, evecs = np.linalg.eigh(sym)
    evals = np.clip(evals, 0.0, None)
    return (evecs * np.sqrt(evals)) @ evecs.T


def _regularized_cov(features: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    cov = np.cov(features, rowvar=False)
    min_eig = float(np.linalg.eigvalsh((cov + cov.T) / 2.0).min())
    if min_eig < eps:
        log.info("covariance near-singular (min eig %.3e); adding %g*I",
                 min_eig, eps)
        cov = cov + eps * np.eye(cov.shape[0])
    return cov


def frechet_distance(set_a, set_b) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The cross trace is computed as tr((sqrt(S_a) S_b sqrt(S_a))^{1/2}) so
    every square root acts on a symmetric PSD matrix; near-singular
    covariances get an eps*I ridge (logged).
    """
    if len(set_a) < 10 or len(set_b) < 10:
        raise ShapeError("frechet_distance needs at least 10 motions per set")
    fa, fb = _feature_matrix(set_a), _feature_matrix(set_b)
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    cov_a, cov_b = _regularized_cov(fa), _regularized_cov(fb)
    root_a = _psd_sqrt(cov_a)
    cross = np.trace(_psd_sqrt(root_a @ cov_b @ root_a))
    value = float(np.sum((mu_a - mu_b) ** 2)
                  + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross)
    return max(value, 0.0)


def diversity(motions, n_pairs: int, seed: int = 0) -> float:
    """Mean feature distance over disjoint sampled pairs."""
    if len(motions) < 2 * n_pairs:
        raise ShapeError(
            f"diversity needs >= {2 * n_pairs} motions, got {len(motions)}")
    feats = _feature_matrix(motions)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(motions))
    first, second = order[:n_pairs], order[n_pairs:2 * n_pairs]
    return float(np.linalg.norm(feats[first] - feats[second], axis=1).mean())


def latency_overhead(pipeline, runs: int = 30, seed: int = 0,
                     params_values=None) -> float:
    """(controlled - plain) / plain, in percent, over median wall times."""
    if runs < 1:
        raise EditInvalid("latency measurement needs at least one run")
    if params_values is None:
        probe = pipeline.generate(0, seed=seed, n=1, plain=True)[0]
        params_values = pipeline.params_of(probe)
    plain_t, ctrl_t = [], []
    for i in range(runs):
        t0 = time.perf_counter()
        pipeline.generate(0, seed=seed + i, n=1, plain=True)
        plain_t.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        pipeline.generate(0, seed=seed + i, n=1, params_values=params_values)
        ctrl_t.append(time.perf_counter() - t0)
    plain_med = float(np.median(plain_t))
    ctrl_med = float(np.median(ctrl_t))
    return 100.0 * (ctrl_med - plain_med) / plain_med


# -- report assembly ----------------------------------------------------------

BANNER = ("desk-scale metric: feature space is the 25-dim speed-signal "
          "oracle, not comparable to benchmark-suite absolute values")


@dataclass
class EvalReport:
    frechet: float
    diversity: float
    response_curves: list
    leakage: dict
    latency_overhead_pct: float | None
    ablations: list = field(default_factory=list)
    seed: int = 0
    config_fingerprint: str = ""
    banner: str = BANNER

    def to_dict(self) -> dict:
        return {
            "banner": self.banner,
            "seed": self.seed,
            "config_fingerprint": self.config_fingerprint,
            "frechet": self.frechet,
            "diversity": self.diversity,
            "latency_overhead_pct": self.latency_overhead_pct,
            "leakage": self.leakage,
            "response_curves": [c.to_dict() for c in self.response_curves],
            "ablations": self.ablations,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def save(self, out_dir) -> None:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json(), encoding="utf-8")
        for curve in self.response_curves:
            curve.to_csv(out / f"curve-{curve.attribute}-{curve.part}.csv")
        if self.ablations:
            rows = ["mode,phase,frechet,amp_slope,leakage_mean"]
            rows += [f"{r['mode']},{r['phase']},{r['frechet']},"
                     f"{r['amp_slope']},{r['leakage_mean']}"
                     for r in self.ablations]
            (out / "ablations.csv").write_text("\n".join(rows) + "\n",
                                               encoding="utf-8")


def curve_targets(parts=PARTS) -> list[tuple[str, str]]:
    """(attribute, part) pairs the default report covers: amplitude and
    frequency for every part plus the global edit."""
    targets = [(a, p) for a in ATTRIBUTES for p in list(parts) + ["global"]]
    return targets


def run_eval(pipeline, references, *, amp_grid, freq_grid, n_cases: int,
             samples_per_case: int, set_size: int, n_pairs: int,
             latency_runs: int, seed: int = 0, config_fingerprint: str = "",
             curve_parts=None, progress=None) -> EvalReport:
    """Assemble the full report from a loaded pipeline and reference motions.

    latency_runs = 0 disables the wall-clock metric so the report JSON is a
    pure function of config + seed (byte-reproducible).
    """
    refs = list(references)[:n_cases]
    if not refs:
        raise ShapeError("evaluation needs at least one reference motion")

    def tick(msg):
        if progress is not None:
            progress(msg)

    curves = []
    for attribute, part in curve_targets(curve_parts or PARTS):
        grid = amp_grid if attribute == "amplitude" else freq_grid
        tick(f"response curve: {attribute} on {part}")
        curves.append(response_curve(pipeline, attribute, part, grid, refs,
                                     base_seed=seed,
                                     samples_per_case=samples_per_case))

    tick("leakage")
    leak = leakage(pipeline, EditSpec.single("right_up", amp_scale=1.5), refs,
                   base_seed=seed, samples_per_case=samples_per_case)

    tick("feature metrics")
    per_ref = max(1, set_size // max(len(refs), 1))
    generated = []
    for ci, ref in enumerate(refs):
        generated.extend(_identity_set(pipeline, ref, seed + ci, per_ref))
    generated = generated[:set_size]
    fre = frechet_distance(generated, refs if len(refs) >= 10 else references)
    div = diversity(generated, min(n_pairs, len(generated) // 2), seed=seed)

    overhead = None
    if latency_runs > 0:
        tick("latency")
        overhead = latency_overhead(pipeline, runs=latency_runs, seed=seed)

    return EvalReport(frechet=fre, diversity=div, response_curves=curves,
                      leakage=leak, latency_overhead_pct=overhead, seed=seed,
                      config_fingerprint=config_fingerprint)


def ablation_row(pipeline, references, *, mode: str, phase_mode: str,
                 amp_grid, base_seed: int = 0,
                 samples_per_case: int = 2) -> dict:
    """One ablation table row: control quality for a (mode, phase) variant."""
    refs = list(references)
    curve = response_curve(pipeline, "amplitude", "right_up", amp_grid, refs,
                           base_seed=base_seed,
                           samples_per_case=samples_per_case)
    leak = leakage(pipeline, EditSpec.single("right_up", amp_scale=1.5), refs,
                   base_seed=base_seed, samples_per_case=samples_per_case)
    per_ref = max(1, 10 // max(len(refs), 1) + 1)
    generated = []
    for ci, ref in enumerate(refs):
        generated.extend(_identity_set(pipeline, ref, base_seed + ci, per_ref))
    fre = frechet_distance(generated[:max(10, len(refs))], references)
    return {"mode": mode, "phase": phase_mode, "frechet": float(fre),
            "amp_slope": curve.slope,
            "leakage_mean": float(np.mean(list(leak.values()))),
            "spearman": curve.spearman}
