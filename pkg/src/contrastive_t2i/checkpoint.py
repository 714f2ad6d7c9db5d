"""Versioned checkpoint files.

A checkpoint is a ``torch.save`` archive of one dict::

    {"format_version": 1, "kind": "encoders" | "gan" | "classifier",
     "models": {name: state_dict}, "optimizers": {name: state_dict},
     "counters": {"step": int, "epoch": int}, "config": {...}, "extra": {...}}

Archives are serialised through an in-memory buffer so the bytes do not
depend on the destination filename; save -> load -> save is byte-identical.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    kind: str
    models: dict[str, dict[str, Any]]
    optimizers: dict[str, dict[str, Any]] = field(default_factory=dict)
    counters: dict[str, int] = field(default_factory=dict)
    config: dict[str, Any] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        torch.save(
            {
                "format_version": self.format_version,
                "kind": self.kind,
                "models": self.models,
                "optimizers": self.optimizers,
                "counters": self.counters,
                "config": self.config,
                "extra": self.extra,
            },
            buf,
        )
        return buf.getvalue()

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return path


def load_checkpoint(path: str | Path, kind: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        raw = torch.load(io.BytesIO(path.read_bytes()), map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises a zoo of types for corrupt archives
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(raw, dict) or "format_version" not in raw:
        raise CheckpointError(f"{path}: not a checkpoint archive")
    if raw["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format_version {raw['format_version']} is not supported (expected {FORMAT_VERSION})"
        )
    if kind is not None and raw["kind"] != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {raw['kind']!r}")
    return Checkpoint(
        kind=raw["kind"],
        models=raw["models"],
        optimizers=raw["optimizers"],
        counters=raw["counters"],
        config=raw["config"],
        extra=raw["extra"],
        format_version=raw["format_version"],
    )
