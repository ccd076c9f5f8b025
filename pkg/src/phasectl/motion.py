"""Skeletal motion representation: skeleton with a 5-way part split, motion
sequences, per-part kinematic signals, and JSON file I/O."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, PartNotFound, SkeletonMismatch

PARTS = ("left_up", "right_up", "left_low", "right_low", "trunk")


@dataclass(frozen=True)
class Skeleton:
    """Joint tree with one body-part label per joint.

    parent_index uses -1 for the root; part_of maps each joint to one of
    the five labels in PARTS.
    """

    joint_names: tuple[str, ...]
    parent_index: tuple[int, ...]
    part_of: tuple[str, ...]

    def __post_init__(self):
        n = len(self.joint_names)
        if len(self.parent_index) != n or len(self.part_of) != n:
            raise FormatError("skeleton field lengths disagree")
        roots = [i for i, p in enumerate(self.parent_index) if p == -1]
        if len(roots) != 1:
            raise FormatError(f"skeleton must have exactly one root, got {len(roots)}")
        for i, p in enumerate(self.parent_index):
            if p != -1 and not (0 <= p < n and p != i):
                raise FormatError(f"bad parent index {p} for joint {i}")
        for lbl in self.part_of:
            if lbl not in PARTS:
                raise FormatError(f"unknown part label {lbl!r}")
        present = set(self.part_of)
        missing = [p for p in PARTS if p not in present]
        if missing:
            raise FormatError(f"parts without joints: {missing}")
        # parent links must form a tree (no cycles)
        for i in range(n):
            seen, j = set(), i
            while j != -1:
                if j in seen:
                    raise FormatError("cycle in skeleton parents")
                seen.add(j)
                j = self.parent_index[j]

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    def joints_of(self, part: str) -> np.ndarray:
        """Indices of the joints belonging to one part label."""
        if part not in PARTS:
            raise PartNotFound(f"unknown part {part!r}; expected one of {PARTS}")
        return np.array([i for i, lbl in enumerate(self.part_of) if lbl == part])

    def to_dict(self) -> dict:
        return {
            "joints": list(self.joint_names),
            "parents": list(self.parent_index),
            "parts": list(self.part_of),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        try:
            return cls(tuple(d["joints"]), tuple(int(p) for p in d["parents"]),
                       tuple(d["parts"]))
        except KeyError as e:
            raise FormatError(f"skeleton missing field {e}") from e


@dataclass
class Motion:
    """A fixed-fps sequence of 3D joint positions (meters), shape (T, J, 3)."""

    frames: np.ndarray
    fps: float
    skeleton: Skeleton
    label: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise FormatError(f"frames must be (T, J, 3), got {self.frames.shape}")
        if self.frames.shape[0] < 2:
            raise FormatError("motion needs at least 2 frames")
        if self.frames.shape[1] != self.skeleton.n_joints:
            raise SkeletonMismatch(
                f"frames have {self.frames.shape[1]} joints, skeleton has "
                f"{self.skeleton.n_joints}")
        if self.fps <= 0:
            raise FormatError("fps must be positive")
        if not np.isfinite(self.frames).all():
            raise FormatError("frames contain non-finite values")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class KinematicSignal:
    """Per-part scalar speed signal: mean joint speed in m/s, length T."""

    part: str
    values: np.ndarray
    fps: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)


def kinematic_signal(motion: Motion, part: str) -> KinematicSignal:
    """Mean joint speed of one body part per frame.

    values[t] = mean_j ||frames[t+1, j] - frames[t, j]|| * fps for t < T-1;
    the last sample duplicates values[T-2] so the signal keeps length T.
    """
    idx = motion.skeleton.joints_of(part)
    pts = motion.frames[:, idx, :]
    diffs = np.linalg.norm(pts[1:] - pts[:-1], axis=2)  # (T-1, |part|)
    speeds = diffs.mean(axis=1) * motion.fps
    values = np.concatenate([speeds, speeds[-1:]])
    return KinematicSignal(part=part, values=values, fps=motion.fps)


def part_signal_matrix(motion: Motion) -> np.ndarray:
    """All five part signals stacked as a (5, T) array in PARTS order."""
    return np.stack([kinematic_signal(motion, p).values for p in PARTS])


def whole_body_signal(motion: Motion) -> KinematicSignal:
    """Mean joint speed over every joint at once (the single-part ablation)."""
    diffs = np.linalg.norm(motion.frames[1:] - motion.frames[:-1], axis=2)
    speeds = diffs.mean(axis=1) * motion.fps
    values = np.concatenate([speeds, speeds[-1:]])
    return KinematicSignal(part="whole", values=values, fps=motion.fps)


def speed_curves_torch(frames, fps: float, joint_groups) -> "object":
    """Differentiable twin of the speed signals for batched frame tensors.

    frames: (B, T, J, 3) torch tensor; joint_groups: sequence of joint-index
    lists. Returns (B, len(joint_groups), T) with the same last-sample
    duplication as `kinematic_signal`. A tiny epsilon inside the square root
    keeps the gradient finite for coincident frames.
    """
    import torch

    d = frames[:, 1:] - frames[:, :-1]
    dist = torch.sqrt((d * d).sum(dim=-1) + 1e-16)  # (B, T-1, J)
    curves = []
    for idx in joint_groups:
        sel = dist[:, :, list(idx)].mean(dim=-1) * fps  # (B, T-1)
        curves.append(torch.cat([sel, sel[:, -1:]], dim=1))
    return torch.stack(curves, dim=1)


MOTION_SUFFIX = ".motion.json"


def save_motion(motion: Motion, path) -> None:
    doc = {
        "fps": motion.fps,
        "label": motion.label,
        "skeleton": motion.skeleton.to_dict(),
        "frames": motion.frames.tolist(),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)


def load_motion(path, skeleton: Skeleton | None = None) -> Motion:
    """Load a `.motion.json` file.

    When `skeleton` is given, the file's skeleton must match it exactly
    (fixed-skeleton contexts such as the service refuse foreign rigs).
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    for key in ("fps", "skeleton", "frames"):
        if key not in doc:
            raise FormatError(f"{path}: missing field {key!r}")
    skel = Skeleton.from_dict(doc["skeleton"])
    if skeleton is not None and skel != skeleton:
        raise SkeletonMismatch(f"{path}: skeleton differs from the expected rig")
    frames = np.asarray(doc["frames"], dtype=np.float64)
    if frames.ndim != 3:
        raise FormatError(f"{path}: frames must be a T x J x 3 array")
    try:
        return Motion(frames=frames, fps=float(doc["fps"]), skeleton=skel,
                      label=str(doc.get("label", "")))
    except (FormatError, SkeletonMismatch) as e:
        raise type(e)(f"{path}: {e}") from e
