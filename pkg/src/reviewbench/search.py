"""Hyperparameter grid search on validation MSE."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

from .corpus import SplitDataset
from .models import MODELS, TrainConfig, TrainingDiverged, TrainResult, train
from .text import TextFeatures

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Grid:
    latent_dims: tuple[int, ...] = (1, 4, 8, 25, 50)
    l2: tuple[float, ...] = (1e-4, 1e-5, 1e-6, 1e-7)
    dropout: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8)

    def __post_init__(self):
        if not (self.latent_dims and self.l2 and self.dropout):
            raise ValueError("every grid axis needs at least one value")

    def configs(self, kind: str, base: TrainConfig) -> list[TrainConfig]:
        """Grid points for ``kind``; axes the model ignores collapse to their smallest value."""
        cls = MODELS[kind]
        dims = sorted(self.latent_dims) if cls.uses_latent else [min(self.latent_dims)]
        drops = sorted(self.dropout) if cls.uses_dropout else [min(self.dropout)]
        return [
            replace(base, latent_dim=k, l2=l2, dropout=p) for k in dims for l2 in sorted(self.l2) for p in drops
        ]


FULL_GRID = Grid()
REDUCED_GRID = Grid(latent_dims=(4, 8), l2=(1e-5, 1e-6), dropout=(0.4,))


def config_id(cfg: TrainConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class Trial:
    cfg: TrainConfig
    val_mse: float | None
    best_epoch: int = 0
    epochs_run: int = 0
    error: str | None = None

    def row(self) -> dict:
        return {
            "config_id": config_id(self.cfg),
            "latent_dim": self.cfg.latent_dim,
            "l2": self.cfg.l2,
            "dropout": self.cfg.dropout,
            "val_mse": self.val_mse,
            "best_epoch": self.best_epoch,
            "epochs_run": self.epochs_run,
            "error": self.error or "",
        }


@dataclass
class GridResult:
    kind: str
    best: TrainResult
    trials: list[Trial] = field(default_factory=list)

    @property
    def best_cfg(self) -> TrainConfig:
        return self.best.cfg


class GridSearchFailed(RuntimeError):
    pass


def grid_search(
    s: SplitDataset,
    kind: str,
    features: TextFeatures | None,
    grid: Grid | Sequence[TrainConfig] = FULL_GRID,
    base: TrainConfig = TrainConfig(),
    max_jobs: int = 1,
) -> GridResult:
    """Train every grid point and keep the lowest validation MSE.

    Ties go to the smaller latent dim, then smaller L2, then smaller dropout.
    Diverged trials are recorded and skipped.
    """
    configs = grid.configs(kind, base) if isinstance(grid, Grid) else list(grid)
    if not configs:
        raise ValueError("empty grid")

    def run(cfg: TrainConfig):
        try:
            return train(kind, s, features, cfg)
        except TrainingDiverged as exc:
            log.warning("trial %s diverged: %s", config_id(cfg), exc)
            return exc

    if max_jobs > 1 and len(configs) > 1:
        with ThreadPoolExecutor(max_workers=max_jobs) as pool:
            outcomes = list(pool.map(run, configs))
    else:
        outcomes = [run(c) for c in configs]

    trials, results = [], []
    for cfg, out in zip(configs, outcomes):
        if isinstance(out, TrainResult):
            trials.append(Trial(cfg, out.best_val_mse, out.best_epoch, out.epochs_run))
            results.append(out)
        else:
            trials.append(Trial(cfg, None, error=str(out)))
    if not results:
        raise GridSearchFailed(f"{kind}: all {len(configs)} trials diverged:\n" + "\n".join(t.error for t in trials))
    best = min(results, key=lambda r: (r.best_val_mse, r.cfg.latent_dim, r.cfg.l2, r.cfg.dropout))
    return GridResult(kind, best, trials)
