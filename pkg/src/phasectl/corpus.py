"""Synthetic motion corpus with known per-part periodic structure.

Each sample is a floating-parts puppet: every body part rotates rigidly
about a fixed pivot with per-step angle increments chosen so that the
part's mean joint speed is exactly a rectified sinusoid
a * |cos(2*pi*(g*t/T + psi))|. The recorded ground truth describes the
dominant harmonics of that speed signal (fundamental at 2g cycles per
window), which is what any spectral estimator of the signal will see.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigInvalid
from .motion import PARTS, Motion, Skeleton

CLASS_NAMES = ("walk", "wave-right", "march", "idle-sway")

_JOINTS = (
    # name, parent, part, rest position (x: left, y: up, z: forward)
    ("pelvis", -1, "trunk", (0.0, 0.95, 0.0)),
    ("spine", 0, "trunk", (0.0, 1.15, 0.0)),
    ("chest", 1, "trunk", (0.0, 1.35, 0.0)),
    ("neck", 2, "trunk", (0.0, 1.50, 0.0)),
    ("head", 3, "trunk", (0.0, 1.65, 0.0)),
    ("l_shoulder", 2, "left_up", (0.20, 1.45, 0.0)),
    ("l_elbow", 5, "left_up", (0.24, 1.17, 0.0)),
    ("l_wrist", 6, "left_up", (0.26, 0.90, 0.0)),
    ("r_shoulder", 2, "right_up", (-0.20, 1.45, 0.0)),
    ("r_elbow", 8, "right_up", (-0.24, 1.17, 0.0)),
    ("r_wrist", 9, "right_up", (-0.26, 0.90, 0.0)),
    ("l_hip", 0, "left_low", (0.10, 0.90, 0.0)),
    ("l_knee", 11, "left_low", (0.10, 0.50, 0.0)),
    ("l_ankle", 12, "left_low", (0.10, 0.08, 0.0)),
    ("r_hip", 0, "right_low", (-0.10, 0.90, 0.0)),
    ("r_knee", 14, "right_low", (-0.10, 0.50, 0.0)),
    ("r_ankle", 15, "right_low", (-0.10, 0.08, 0.0)),
)

# pivot joint and rotation axis per part
_PIVOT = {"trunk": "pelvis", "left_up": "l_shoulder", "right_up": "r_shoulder",
          "left_low": "l_hip", "right_low": "r_hip"}
_AXIS = {"trunk": (0.0, 0.0, 1.0), "left_up": (1.0, 0.0, 0.0),
         "right_up": (1.0, 0.0, 0.0), "left_low": (1.0, 0.0, 0.0),
         "right_low": (1.0, 0.0, 0.0)}

# per class and part: (angle-drive frequency g in cycles/window,
# speed amplitude a in m/s, phase psi in cycles)
_CLASS_TABLE = {
    "walk": {
        "left_low": (2, 0.90, 0.00), "right_low": (2, 0.90, 0.50),
        "left_up": (2, 0.55, 0.50), "right_up": (2, 0.55, 0.00),
        "trunk": (4, 0.18, 0.25),
    },
    "march": {
        "left_low": (3, 1.20, 0.00), "right_low": (3, 1.20, 0.50),
        "left_up": (3, 0.80, 0.50), "right_up": (3, 0.80, 0.00),
        "trunk": (6, 0.25, 0.25),
    },
    "wave-right": {
        "right_up": (4, 1.00, 0.00), "left_up": (1, 0.15, 0.00),
        "left_low": (1, 0.12, 0.00), "right_low": (1, 0.12, 0.50),
        "trunk": (2, 0.10, 0.00),
    },
    "idle-sway": {
        "trunk": (1, 0.30, 0.00), "left_up": (1, 0.20, 0.25),
        "right_up": (1, 0.20, 0.75), "left_low": (1, 0.15, 0.00),
        "right_low": (1, 0.15, 0.50),
    },
}

# classes whose samples may run at double pace, widening frequency support
_PACE_CLASSES = ("walk", "idle-sway")


def default_skeleton() -> Skeleton:
    return Skeleton(
        joint_names=tuple(j[0] for j in _JOINTS),
        parent_index=tuple(j[1] for j in _JOINTS),
        part_of=tuple(j[2] for j in _JOINTS),
    )


def rest_pose() -> np.ndarray:
    return np.array([j[3] for j in _JOINTS], dtype=np.float64)


@dataclass(frozen=True)
class CorpusConfig:
    n_samples: int
    n_frames: int = 64
    fps: float = 20.0
    classes: tuple[str, ...] = CLASS_NAMES
    noise_level: float = 0.02
    amp_jitter: tuple[float, float] = (0.55, 1.70)

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ConfigInvalid("n_samples must be positive")
        if self.n_frames < 8:
            raise ConfigInvalid("n_frames must be at least 8")
        if self.fps <= 0:
            raise ConfigInvalid("fps must be positive")
        if len(self.classes) == 0:
            raise ConfigInvalid("class vocabulary is empty")
        unknown = [c for c in self.classes if c not in _CLASS_TABLE]
        if unknown:
            raise ConfigInvalid(f"unknown classes {unknown}; known: {CLASS_NAMES}")
        if self.noise_level < 0:
            raise ConfigInvalid("noise_level must be non-negative")


@dataclass(frozen=True)
class GroundTruthPhase:
    """Oracle labels: the two leading harmonics of each part's speed signal.

    parts[p] = ((amp, freq, shift, offset), (amp, freq, shift, offset))
    with freq in cycles per window and shift in cycles, wrapped to [0, 1).
    """

    parts: dict

    def amp_true(self, part: str, k: int = 0) -> float:
        return self.parts[part][k][0]

    def freq_true(self, part: str, k: int = 0) -> float:
        return self.parts[part][k][1]

    def shift_true(self, part: str, k: int = 0) -> float:
        return self.parts[part][k][2]

    def offset_true(self, part: str, k: int = 0) -> float:
        return self.parts[part][k][3]


def _rodrigues(axis: np.ndarray, theta: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Rotate each offset vector about `axis` by each angle: (T, J, 3)."""
    c = np.cos(theta)[:, None, None]
    s = np.sin(theta)[:, None, None]
    cross = np.cross(np.broadcast_to(axis, offsets.shape), offsets)
    dot = offsets @ axis
    return c * offsets + s * cross + (1.0 - c) * dot[None, :, None] * axis


def _smooth_noise(T: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-bounded smooth curve: three random sinusoids, peak-normalized."""
    freqs = rng.uniform(0.5, T / 8, size=3)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    amps = rng.uniform(0.3, 1.0, size=3)
    t = np.arange(T)
    curve = sum(a * np.cos(2 * np.pi * f * t / T + p)
                for a, f, p in zip(amps, freqs, phases))
    peak = np.abs(curve).max()
    return curve / peak if peak > 0 else curve


def _axis_radii(part: str, skeleton: Skeleton, rest: np.ndarray) -> tuple:
    pivot = rest[skeleton.joint_names.index(_PIVOT[part])]
    axis = np.array(_AXIS[part])
    idx = skeleton.joints_of(part)
    offsets = rest[idx] - pivot
    perp = offsets - np.outer(offsets @ axis, axis)
    radii = np.linalg.norm(perp, axis=1)
    return pivot, axis, idx, offsets, radii


def _generate_sample(cfg: CorpusConfig, label: str, rng: np.random.Generator,
                     skeleton: Skeleton, rest: np.ndarray,
                     modifiers: dict | None = None):
    """Synthesize one sample; `modifiers` rescales per-part drive parameters.

    modifiers[part] = (amp_scale, freq_scale, shift_delta) multiplies the
    drawn speed amplitude and drive frequency and offsets the drive phase
    (shift_delta is in units of the extracted phase shift, i.e. twice the
    drive phase). Modifiers consume no random draws, so the same rng seed
    with and without modifiers yields an exactly matched motion pair.
    """
    T, fps = cfg.n_frames, cfg.fps
    frames = np.tile(rest[None, :, :], (T, 1, 1))

    pace = rng.choice([1, 2]) if label in _PACE_CLASSES else 1
    # common time shift keeps inter-part phase relations of the class
    time_shift = rng.uniform(0.0, 1.0)
    root_offset = np.array([rng.uniform(-0.3, 0.3), 0.0, rng.uniform(-0.3, 0.3)])

    truth = {}
    for part in PARTS:
        g_base, a_base, psi_base = _CLASS_TABLE[label][part]
        g = g_base * pace
        a = a_base * rng.uniform(*cfg.amp_jitter)
        psi = (psi_base + g * time_shift + rng.uniform(-0.03, 0.03)) % 1.0
        if modifiers is not None and part in modifiers:
            amp_scale, freq_scale, shift_delta = modifiers[part]
            a *= amp_scale
            g *= freq_scale
            psi = (psi + shift_delta / 2.0) % 1.0

        t = np.arange(T - 1)
        vel = a * np.cos(2 * np.pi * (g * t / T + psi))
        if cfg.noise_level > 0:
            vel = vel + cfg.noise_level * a * _smooth_noise(T - 1, rng)

        pivot, axis, idx, offsets, radii = _axis_radii(part, skeleton, rest)
        r_mean = radii.mean()
        dtheta = 2.0 * np.arcsin(vel / (2.0 * r_mean * fps))
        theta = np.concatenate([[0.0], np.cumsum(dtheta)])
        frames[:, idx, :] = pivot + _rodrigues(axis, theta, offsets)

        # leading harmonics of |a*cos(u)|: (4a/3pi) cos(2u) - (4a/15pi) cos(4u)
        truth[part] = (
            (4 * a / (3 * np.pi), 2 * g, (2 * psi) % 1.0, 2 * a / np.pi),
            (4 * a / (15 * np.pi), 4 * g, (4 * psi + 0.5) % 1.0, 0.0),
        )

    frames += root_offset
    motion = Motion(frames=frames, fps=fps, skeleton=skeleton, label=label)
    return motion, GroundTruthPhase(parts=truth)


def make_corpus(config: CorpusConfig, seed: int):
    """Generate `n_samples` labeled motions with ground-truth phase records.

    Classes are assigned round-robin; each sample draws from its own child
    seed so generation is deterministic regardless of evaluation order.
    """
    skeleton = default_skeleton()
    rest = rest_pose()
    children = np.random.SeedSequence(seed).spawn(config.n_samples)
    out = []
    for i in range(config.n_samples):
        label = config.classes[i % len(config.classes)]
        rng = np.random.default_rng(children[i])
        out.append(_generate_sample(config, label, rng, skeleton, rest))
    return out


def make_edit_variants(config: CorpusConfig, seed: int, edit_seed: int):
    """One edited counterpart per corpus sample, realized by the generator.

    Returns a list of (index, motion, edit) triples where `index` refers to
    `make_corpus(config, seed)`, `motion` is the sample regenerated from the
    same draws with the edit applied to its drive parameters, and `edit` is
    the EditSpec whose application to the base sample's phase parameters
    describes the edited motion. Because both motions share every random
    draw, the pair differs only in the edited parts' amplitude, frequency,
    or phase — matched supervision for conditioning on edited manifolds.
    """
    from .manifold import EditSpec, PartEdit

    skeleton = default_skeleton()
    rest = rest_pose()
    children = np.random.SeedSequence(seed).spawn(config.n_samples)
    edit_children = np.random.SeedSequence(edit_seed).spawn(config.n_samples)
    out = []
    for i in range(config.n_samples):
        label = config.classes[i % len(config.classes)]
        erng = np.random.default_rng(edit_children[i])
        n_edit = 2 if erng.uniform() < 0.25 else 1
        parts = erng.choice(len(PARTS), size=n_edit, replace=False)
        edits = {}
        for p in parts:
            kind = erng.choice(["amp", "freq", "shift"], p=[0.5, 0.25, 0.25])
            amp = freq = 1.0
            shift = 0.0
            if kind == "amp":
                amp = float(np.exp(erng.uniform(np.log(0.4), np.log(2.0))))
            elif kind == "freq":
                freq = float(np.exp(erng.uniform(np.log(0.5), np.log(2.0))))
            else:
                shift = float(erng.uniform(-0.4, 0.4))
            edits[PARTS[p]] = (amp, freq, shift)
        rng = np.random.default_rng(children[i])
        motion, _ = _generate_sample(config, label, rng, skeleton, rest,
                                     modifiers=edits)
        spec = EditSpec(parts={name: PartEdit(*mod)
                               for name, mod in edits.items()})
        out.append((i, motion, spec))
    return out


def class_id(label: str, classes: tuple[str, ...] = CLASS_NAMES) -> int:
    try:
        return classes.index(label)
    except ValueError:
        raise ConfigInvalid(f"unknown class {label!r}") from None
