"""Experiment configuration: a flat ``key = value`` text format with a schema version.

One key per line, ``#`` starts a comment, list values are comma separated::

    schema_version = 1
    data = reviews.jsonl
    models = bias, mf, hft
    latent_dims = 4, 8
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

from .corpus import DEFAULT_FIELDS
from .models import MODELS, TrainConfig
from .search import Grid

SCHEMA_VERSION = 1

ALL_MODELS = ("bias", "mf", "neumf", "hft", "deepconn", "deepconn++", "narre")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    # data
    data: str = ""
    field_user: str = DEFAULT_FIELDS["user"]
    field_item: str = DEFAULT_FIELDS["item"]
    field_rating: str = DEFAULT_FIELDS["rating"]
    field_review: str = DEFAULT_FIELDS["review"]
    field_time: str = DEFAULT_FIELDS["time"]
    rating_min: float = 1.0
    rating_max: float = 5.0
    k_core: int = 0
    mask: float = 0.0
    seeds: tuple[int, ...] = (0,)
    # text
    emb_dim: int = 64
    vocab_size: int = 50_000
    # models and grid
    models: tuple[str, ...] = ALL_MODELS
    model: str = ""
    latent_dims: tuple[int, ...] = Grid().latent_dims
    l2: tuple[float, ...] = Grid().l2
    dropout: tuple[float, ...] = Grid().dropout
    lr: float = TrainConfig.lr
    batch_size: int = TrainConfig.batch_size
    max_epochs: int = TrainConfig.max_epochs
    patience: int = TrainConfig.patience
    mu: float = TrainConfig.mu
    resample_period: int = TrainConfig.resample_period
    n_filters: int = TrainConfig.n_filters
    filter_width: int = TrainConfig.filter_width
    finetune_embeddings: bool = TrainConfig.finetune_embeddings
    dtype: str = TrainConfig.dtype
    # experiments
    sweep: str = "mask"
    mask_values: tuple[float, ...] = (0.0, 20.0, 40.0, 60.0, 80.0, 100.0)
    k_max: int = -1  # -1: keep going until the core is empty
    retune: bool = True
    hr_seed: int = 0
    # output and resources
    out_dir: str = "runs"
    max_jobs: int = 1

    def validate(self) -> "ExperimentConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}; expected {SCHEMA_VERSION}")
        if not (self.latent_dims and self.l2 and self.dropout):
            raise ConfigError("grid axes latent_dims, l2 and dropout must be non-empty")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        unknown = [m for m in self.models + ((self.model,) if self.model else ()) if m not in MODELS]
        if unknown:
            raise ConfigError(f"unknown model kind(s) {unknown}; choose from {sorted(MODELS)}")
        if self.sweep not in ("mask", "density"):
            raise ConfigError("sweep must be 'mask' or 'density'")
        if self.k_core < 0 or not 0 <= self.mask <= 100:
            raise ConfigError("k_core must be >= 0 and mask within [0, 100]")
        if self.rating_min >= self.rating_max:
            raise ConfigError("rating_min must be below rating_max")
        if self.max_jobs < 1:
            raise ConfigError("max_jobs must be >= 1")
        try:
            self.train_config(self.seeds[0]).validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    @property
    def field_map(self) -> dict[str, str]:
        return {k: getattr(self, f"field_{k}") for k in DEFAULT_FIELDS}

    @property
    def rating_scale(self) -> tuple[float, float]:
        return (self.rating_min, self.rating_max)

    @property
    def grid(self) -> Grid:
        return Grid(self.latent_dims, self.l2, self.dropout)

    def train_config(self, seed: int) -> TrainConfig:
        """Shared training settings; the grid axes start at their smallest values."""
        names = {f.name for f in fields(TrainConfig)} - {"seed", "latent_dim", "l2", "dropout"}
        return TrainConfig(
            seed=seed,
            latent_dim=min(self.latent_dims),
            l2=min(self.l2),
            dropout=min(self.dropout),
            **{k: v for k, v in asdict(self).items() if k in names},
        )

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {_format(v)}")
        return "\n".join(lines) + "\n"


def _format(v: Any) -> str:
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _scalar(kind: str, raw: str, key: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind}") from None
    return raw


def coerce(key: str, raw: str):
    """Parse a raw string for ``key`` according to the field's declared type."""
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    t = _TYPES[key]
    if t.startswith("tuple["):
        inner = t[len("tuple[") :].split(",")[0].strip()
        return tuple(_scalar(inner, part, key) for part in raw.split(",") if part.strip())
    return _scalar(t, raw, key)


def parse_config(text: str, source: str = "<config>") -> dict[str, Any]:
    """Raw key/value overrides from config text; unknown keys and duplicates are errors."""
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            out[key] = coerce(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    if "schema_version" not in out:
        raise ConfigError(f"{source}: missing schema_version")
    return out


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Defaults, then the file, then ``overrides`` (already typed), validated."""
    values: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
        values.update(parse_config(text, str(p)))
    values.update(overrides or {})
    return replace(ExperimentConfig(), **values).validate()


def is_tuple_field(key: str) -> bool:
    return _TYPES[key].startswith("tuple[")


def config_keys() -> list[str]:
    return [f.name for f in fields(ExperimentConfig)]


__all__ = [
    "ALL_MODELS",
    "ConfigError",
    "ExperimentConfig",
    "SCHEMA_VERSION",
    "coerce",
    "config_keys",
    "load_config",
    "parse_config",
]
