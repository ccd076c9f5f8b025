"""Checkpoint files with an embedded version string and content checksum."""
from __future__ import annotations

import hashlib
import io

import torch

from .errors import ChecksumMismatch, FormatError

FORMAT_VERSION = "phasectl-ckpt-1"


def _payload_bytes(kind: str, state: dict, meta: dict) -> bytes:
    buf = io.BytesIO()
    torch.save({"kind": kind, "state": state, "meta": meta}, buf)
    return buf.getvalue()


def save_checkpoint(path, kind: str, state: dict, meta: dict | None = None) -> str:
    """Write one archival file; returns the hex checksum it embeds."""
    payload = _payload_bytes(kind, state, dict(meta or {}))
    digest = hashlib.sha256(payload).hexdigest()
    torch.save({"format": FORMAT_VERSION, "checksum": digest,
                "payload": payload}, path)
    return digest


def load_checkpoint(path, kind: str) -> tuple[dict, dict, str]:
    """Read back (state, meta, checksum), verifying integrity and kind."""
    try:
        wrapper = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise FormatError(f"unreadable checkpoint {path}: {e}") from e
    if not isinstance(wrapper, dict) or wrapper.get("format") != FORMAT_VERSION:
        raise FormatError(f"{path}: not a {FORMAT_VERSION} checkpoint")
    payload = wrapper["payload"]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != wrapper.get("checksum"):
        raise ChecksumMismatch(f"{path}: checksum mismatch, file corrupted")
    inner = torch.load(io.BytesIO(payload), map_location="cpu",
                       weights_only=False)
    if inner.get("kind") != kind:
        raise FormatError(
            f"{path}: holds a {inner.get('kind')!r} model, expected {kind!r}")
    return inner["state"], inner["meta"], digest


def module_fingerprint(module: torch.nn.Module) -> str:
    """Order-stable hash of all parameters and buffers.

    Used to assert that frozen models are bit-identical before and after
    downstream training stages.
    """
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
