"""Phase parameters, the time-dependent phase manifold, and scalar edits.

The manifold P is a (T, 20) matrix: for each of the 5 parts x K=2 channels,
the amplitude-scaled pair (A*cos(phi), A*sin(phi)) with
phi = 2*pi*(F*tau + S) on the inclusive grid tau_t = t/(T-1). Offsets B are
carried only in PhaseParams, never embedded in P.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import EditInvalid, FormatError
from .motion import PARTS
from .spectral import wrap_cycles

K_CHANNELS = 2
MANIFOLD_COLS = len(PARTS) * K_CHANNELS * 2  # 20


@dataclass
class PhaseParams:
    """Per-part, per-channel (A, F, S, B) scalars, shape (5, K, 4).

    Part axis follows PARTS order; last axis is (amp, freq, shift, offset).
    """

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(PARTS), K_CHANNELS, 4):
            raise FormatError(
                f"phase params must be {(len(PARTS), K_CHANNELS, 4)}, "
                f"got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise FormatError("phase params contain non-finite values")
        if (self.values[:, :, 0] < 0).any():
            raise FormatError("amplitudes must be non-negative")
        if (self.values[:, :, 1] <= 0).any():
            raise FormatError("frequencies must be positive")
        shifts = self.values[:, :, 2]
        if (shifts < 0).any() or (shifts >= 1).any():
            raise FormatError("shifts must lie in [0, 1)")

    def part(self, part: str) -> np.ndarray:
        return self.values[PARTS.index(part)]

    def copy(self) -> "PhaseParams":
        return PhaseParams(self.values.copy())

    def to_dict(self) -> dict:
        return {"parts": {
            p: [{"A": float(a), "F": float(f), "S": float(s), "B": float(b)}
                for a, f, s, b in self.values[i]]
            for i, p in enumerate(PARTS)}}

    @classmethod
    def from_dict(cls, d: dict) -> "PhaseParams":
        try:
            vals = np.array([[[c["A"], c["F"], c["S"], c["B"]]
                              for c in d["parts"][p]] for p in PARTS])
        except KeyError as e:
            raise FormatError(f"phase file missing {e}") from e
        return cls(vals)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def load(cls, path) -> "PhaseParams":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


_IDENTITY = (1.0, 1.0, 0.0)


@dataclass(frozen=True)
class PartEdit:
    amp_scale: float = 1.0
    freq_scale: float = 1.0
    shift_delta: float = 0.0

    def is_identity(self) -> bool:
        return (self.amp_scale, self.freq_scale, self.shift_delta) == _IDENTITY


@dataclass(frozen=True)
class EditSpec:
    """Scalar controls per part; unspecified parts are left untouched."""

    parts: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, edit in self.parts.items():
            if name not in PARTS:
                raise EditInvalid(f"unknown part {name!r}")
            if edit.amp_scale <= 0 or edit.freq_scale <= 0:
                raise EditInvalid(
                    f"{name}: amp_scale and freq_scale must be positive")
            if not all(np.isfinite([edit.amp_scale, edit.freq_scale,
                                    edit.shift_delta])):
                raise EditInvalid(f"{name}: non-finite edit value")

    @property
    def edited_parts(self) -> tuple[str, ...]:
        return tuple(p for p in PARTS
                     if p in self.parts and not self.parts[p].is_identity())

    def is_identity(self) -> bool:
        return not self.edited_parts

    def to_dict(self) -> dict:
        out = {}
        for name, e in self.parts.items():
            fields = {}
            if e.amp_scale != 1.0:
                fields["amp_scale"] = e.amp_scale
            if e.freq_scale != 1.0:
                fields["freq_scale"] = e.freq_scale
            if e.shift_delta != 0.0:
                fields["shift_delta"] = e.shift_delta
            if fields:
                out[name] = fields
        return {"parts": out}

    @classmethod
    def from_dict(cls, d: dict) -> "EditSpec":
        unknown_top = set(d) - {"parts"}
        if unknown_top:
            raise EditInvalid(f"unknown edit keys {sorted(unknown_top)}; "
                              "expected {'parts': {part: fields}}")
        body = d.get("parts", {})
        if not isinstance(body, dict):
            raise EditInvalid("'parts' must be an object of part edits")
        parts = {}
        for name, fields in body.items():
            if not isinstance(fields, dict):
                raise EditInvalid(f"{name}: edit fields must be an object")
            unknown = set(fields) - {"amp_scale", "freq_scale", "shift_delta"}
            if unknown:
                raise EditInvalid(f"{name}: unknown edit fields {sorted(unknown)}")
            parts[name] = PartEdit(
                amp_scale=float(fields.get("amp_scale", 1.0)),
                freq_scale=float(fields.get("freq_scale", 1.0)),
                shift_delta=float(fields.get("shift_delta", 0.0)))
        return cls(parts=parts)

    @classmethod
    def single(cls, part: str, amp_scale: float = 1.0, freq_scale: float = 1.0,
               shift_delta: float = 0.0) -> "EditSpec":
        return cls(parts={part: PartEdit(amp_scale, freq_scale, shift_delta)})

    @classmethod
    def global_edit(cls, amp_scale: float = 1.0, freq_scale: float = 1.0,
                    shift_delta: float = 0.0) -> "EditSpec":
        return cls(parts={p: PartEdit(amp_scale, freq_scale, shift_delta)
                          for p in PARTS})


def apply_edit(params: PhaseParams, spec: EditSpec) -> PhaseParams:
    """Return edited params; the input object is never mutated.

    A -> amp_scale*A, F -> freq_scale*F, S -> wrap(S + shift_delta) on the
    edited parts; unedited part rows are bitwise unchanged.
    """
    out = params.values.copy()
    for name in spec.edited_parts:
        i = PARTS.index(name)
        e = spec.parts[name]
        out[i, :, 0] *= e.amp_scale
        out[i, :, 1] *= e.freq_scale
        out[i, :, 2] = wrap_cycles(out[i, :, 2] + e.shift_delta)
    return PhaseParams(out)


def manifold_torch(values: torch.Tensor, T: int) -> torch.Tensor:
    """Phase manifold from a (..., P, K, 4) parameter tensor -> (..., T, P*K*2).

    Differentiable; used verbatim by the numpy wrapper so both routes share
    one formula. P is 5 for the part-level pipeline and 1 for the
    whole-body ablation.
    """
    if T < 2:
        raise FormatError("manifold needs T >= 2")
    n_parts, n_chan = values.shape[-3], values.shape[-2]
    tau = torch.arange(T, dtype=values.dtype, device=values.device) / (T - 1)
    A = values[..., 0]
    phi = 2 * torch.pi * (values[..., 1].unsqueeze(-1) * tau
                          + values[..., 2].unsqueeze(-1))  # (..., P, K, T)
    pair = torch.stack([A.unsqueeze(-1) * torch.cos(phi),
                        A.unsqueeze(-1) * torch.sin(phi)], dim=-1)  # (...,P,K,T,2)
    cols = pair.permute(*range(pair.dim() - 4), -2, -4, -3, -1)  # (...,T,P,K,2)
    return cols.reshape(*values.shape[:-3], T, n_parts * n_chan * 2)


@dataclass
class PhaseSequence:
    """The (T, 20) manifold matrix P."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != MANIFOLD_COLS:
            raise FormatError(f"phase sequence must be (T, {MANIFOLD_COLS})")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @staticmethod
    def column_names() -> list[str]:
        return [f"{p}_k{k}_{trig}" for p in PARTS for k in range(K_CHANNELS)
                for trig in ("cos", "sin")]

    def to_csv(self, path) -> None:
        header = ",".join(self.column_names())
        np.savetxt(path, self.values, delimiter=",", header=header, comments="")


def build_manifold(params: PhaseParams, T: int) -> PhaseSequence:
    vals = manifold_torch(torch.from_numpy(params.values), T)
    return PhaseSequence(vals.numpy())


def part_columns(part: str) -> np.ndarray:
    """Column indices of one part's (cos, sin) pairs in the manifold."""
    i = PARTS.index(part)
    base = i * K_CHANNELS * 2
    return np.arange(base, base + K_CHANNELS * 2)


def edit_mask(spec: EditSpec, T: int) -> np.ndarray:
    """(T, 20) binary mask: 1 on every column of every edited part."""
    mask = np.zeros((T, MANIFOLD_COLS))
    for name in spec.edited_parts:
        mask[:, part_columns(name)] = 1.0
    return mask
