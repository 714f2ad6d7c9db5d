"""Run configuration: typed sections, YAML round-trip and validation."""

from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """A configuration value is outside its domain."""


@dataclass
class DataConfig:
    root: str = "data"
    n_train: int = 500
    n_test: int = 100
    captions_per_image: int = 4
    resolution: int = 32
    color_dropout: float = 0.15
    position_jitter: float = 0.15
    shapes: list[str] = field(default_factory=lambda: ["circle", "square", "triangle", "diamond", "cross"])
    colors: list[str] = field(default_factory=lambda: ["red", "green", "blue", "yellow", "purple", "cyan"])
    sizes: list[str] = field(default_factory=lambda: ["small", "large"])


@dataclass
class MatchingConfig:
    embed_dim: int = 64
    word_dim: int = 32
    image_channels: int = 32
    batch_size: int = 16
    epochs: int = 40
    lr: float = 2e-4
    tau: float = 0.5
    gamma1: float = 4.0
    gamma2: float = 5.0
    gamma3: float = 10.0
    checkpoint_every: int = 50


@dataclass
class GanConfig:
    lambda_c: float = 0.2
    tau: float = 0.5
    lambda_damsm: float = 10.0
    use_damsm: bool = True
    saturating: bool = False
    batch_size: int = 16
    steps: int = 1000
    z_dim: int = 32
    g_channels: int = 32
    d_channels: int = 16
    stage_resolutions: list[int] = field(default_factory=lambda: [16, 32])
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    checkpoint_every: int = 500


@dataclass
class MetricsConfig:
    n_samples: int = 2000
    is_splits: int = 10
    rp_pool_size: int = 100
    rp_repeats: int = 5
    classifier_epochs: int = 5
    batch_size: int = 100


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    matching: MatchingConfig = field(default_factory=MatchingConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def validate(self) -> "RunConfig":
        errors = []

        def need(ok, where, msg):
            if not ok:
                errors.append(f"{where}: {msg}")

        d, m, g, mt = self.data, self.matching, self.gan, self.metrics
        need(d.n_train >= 1, "data.n_train", "must be >= 1")
        need(d.n_test >= 1, "data.n_test", "must be >= 1")
        need(d.captions_per_image >= 2, "data.captions_per_image", "must be >= 2")
        need(d.resolution >= 8, "data.resolution", "must be >= 8")
        need(0 <= d.color_dropout <= 1, "data.color_dropout", "must lie in [0, 1]")
        need(m.tau > 0, "matching.tau", "must be > 0")
        need(m.lr > 0, "matching.lr", "must be > 0")
        need(m.embed_dim >= 2 and m.embed_dim % 2 == 0, "matching.embed_dim", "must be an even number >= 2")
        need(m.batch_size >= 2, "matching.batch_size", "must be >= 2 (DAMSM posterior is over the batch)")
        need(m.epochs >= 1, "matching.epochs", "must be >= 1")
        need(m.checkpoint_every >= 1, "matching.checkpoint_every", "must be >= 1")
        for name in ("gamma1", "gamma2", "gamma3"):
            need(getattr(m, name) > 0, f"matching.{name}", "must be > 0")
        need(g.tau > 0, "gan.tau", "must be > 0")
        need(g.lambda_c >= 0, "gan.lambda_c", "must be >= 0")
        need(g.lambda_damsm >= 0, "gan.lambda_damsm", "must be >= 0")
        need(g.batch_size >= 2, "gan.batch_size", "must be >= 2")
        need(g.steps >= 1, "gan.steps", "must be >= 1")
        need(g.checkpoint_every >= 1, "gan.checkpoint_every", "must be >= 1")
        res = g.stage_resolutions
        need(
            len(res) >= 1 and all(r >= 4 for r in res) and all(b == 2 * a for a, b in zip(res, res[1:])),
            "gan.stage_resolutions",
            "must be nonempty, >= 4 and doubling per stage",
        )
        need(bool(res) and res[-1] == d.resolution, "gan.stage_resolutions", "last stage must equal data.resolution")
        need(bool(res) and res[0] >= 4 and (res[0] & (res[0] - 1)) == 0, "gan.stage_resolutions", "first stage must be a power of two")
        need(mt.n_samples >= 2, "metrics.n_samples", "must be >= 2")
        need(1 <= mt.is_splits <= mt.n_samples, "metrics.is_splits", "must lie in [1, n_samples]")
        need(mt.rp_pool_size >= 2, "metrics.rp_pool_size", "must be >= 2")
        need(mt.rp_repeats >= 1, "metrics.rp_repeats", "must be >= 1")
        if errors:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
        return self


def _build(cls, raw: dict[str, Any], where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {unknown}")
    kwargs = {}
    for name, value in raw.items():
        f = known[name]
        default = f.default_factory() if f.default is dataclasses.MISSING else f.default
        key = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, key)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{key}: expected a boolean, got {value!r}")
            kwargs[name] = value
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{key}: expected an integer, got {value!r}")
            kwargs[name] = value
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{key}: expected a number, got {value!r}")
            kwargs[name] = float(value)
        elif isinstance(default, list):
            if not isinstance(value, list):
                raise ConfigError(f"{key}: expected a list, got {value!r}")
            kwargs[name] = list(value)
        else:
            kwargs[name] = str(value)
    return cls(**kwargs)


def config_from_dict(raw: dict[str, Any] | None) -> RunConfig:
    return _build(RunConfig, raw or {}, "")


def load_config(path: str | Path | None) -> RunConfig:
    """Read a YAML config; missing fields take their defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return config_from_dict(raw)
