"""Metrics (MSE, HR@1, frequency-bucketed improvement) and the density and masking sweeps."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import Dataset, SplitDataset, Stats, k_core, mask_reviews, split, stats
from .models import MODELS, RatingModel, TrainConfig
from .models.training import clipped
from .search import FULL_GRID, Grid, config_id, grid_search
from .text import Layout, TextFeatures, prepare_features

log = logging.getLogger(__name__)

Scorer = Callable[[np.ndarray, np.ndarray], np.ndarray]


def mse(preds, truths) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if preds.shape != truths.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {truths.shape}")
    if preds.size == 0:
        raise ValueError("mse of an empty list")
    diff = preds - truths
    return float(np.dot(diff, diff) / diff.size)


@dataclass(frozen=True)
class HitRate:
    """HR@1 over eligible test users; ``value`` is None when no user is eligible."""

    value: float | None
    eligible: int
    skipped: int

    @property
    def applicable(self) -> bool:
        return self.value is not None


def _as_scorer(model) -> Scorer:
    return model.predict if hasattr(model, "predict") else model


def hit_rate_at_1(model: RatingModel | Scorer, s: SplitDataset, seed: int = 0, negatives: int = 5) -> HitRate:
    """Rank one top-rated test item against five other test items per user.

    Positives are test items the user rated at the scale maximum; negatives are
    the user's other test items. Users need one positive and five distinct
    negatives. A hit needs the positive's score strictly above every negative.
    """
    users, items, ratings = s.arrays("test")
    top = s.dataset.rating_scale[1]
    order = np.lexsort((items, users))
    users, items, ratings = users[order], items[order], ratings[order]
    rng = np.random.default_rng(seed)
    bounds = np.flatnonzero(np.diff(users)) + 1
    pairs_u, pairs_i = [], []
    skipped = 0
    for grp in np.split(np.arange(len(users)), bounds):
        if len(grp) == 0:
            continue
        pos = np.unique(items[grp][ratings[grp] == top])
        neg = np.setdiff1d(np.unique(items[grp][ratings[grp] != top]), pos)
        if len(pos) < 1 or len(neg) < negatives:
            skipped += 1
            continue
        chosen = np.concatenate([[rng.choice(pos)], rng.choice(neg, size=negatives, replace=False)])
        pairs_u.append(np.full(negatives + 1, users[grp[0]]))
        pairs_i.append(chosen)
    if not pairs_u:
        return HitRate(None, 0, skipped)
    su, si = np.concatenate(pairs_u), np.concatenate(pairs_i)
    scores = np.asarray(_as_scorer(model)(su, si), dtype=np.float64).reshape(-1, negatives + 1)
    hits = scores[:, 0] > scores[:, 1:].max(axis=1)
    return HitRate(float(hits.mean()), len(hits), skipped)


def frequency_buckets(max_freq: int) -> list[tuple[int, int]]:
    """Log-spaced inclusive ranges 0, 1, 2, 3-4, 5-8, 9-16, ... covering 0..max_freq."""
    out = [(0, 0), (1, 1), (2, 2)]
    lo, hi = 3, 4
    while out[-1][1] < max_freq:
        out.append((lo, hi))
        lo, hi = hi + 1, hi * 2
    return [b for b in out if b[0] <= max(max_freq, 0)]


@dataclass(frozen=True)
class Bucket:
    lo: int
    hi: int
    n_items: int
    n_test: int
    improvement: float  # MSE(bias) - MSE(model); NaN for empty buckets


def bucket_improvement(
    report: "MetricReport | np.ndarray", bias_report: "MetricReport | np.ndarray", s: SplitDataset
) -> list[Bucket]:
    """Test-MSE improvement over the bias model, grouped by the item's training frequency."""
    preds = report.predictions if isinstance(report, MetricReport) else np.asarray(report)
    base = bias_report.predictions if isinstance(bias_report, MetricReport) else np.asarray(bias_report)
    d = s.dataset
    _, items, truth = s.arrays("test")
    if preds.shape != truth.shape or base.shape != truth.shape:
        raise ValueError("both reports must cover the same test interactions")
    freq = np.bincount(d.items[s.train], minlength=d.n_items)[items]
    out = []
    for lo, hi in frequency_buckets(int(freq.max(initial=0))):
        sel = (freq >= lo) & (freq <= hi)
        n = int(sel.sum())
        if n == 0:
            out.append(Bucket(lo, hi, 0, 0, math.nan))
            continue
        imp = mse(base[sel], truth[sel]) - mse(preds[sel], truth[sel])
        out.append(Bucket(lo, hi, int(len(np.unique(items[sel]))), n, imp))
    return out


@dataclass
class MetricReport:
    model: str
    test_mse: float
    val_mse: float
    predictions: np.ndarray  # clipped test predictions, in test-partition order
    cfg: TrainConfig
    hr1: HitRate | None = None
    buckets: list[Bucket] = field(default_factory=list)
    dataset_hash: str = ""
    n_train: int = 0
    n_test: int = 0

    def row(self) -> dict:
        hr = self.hr1
        return {
            "model": self.model,
            "config_id": config_id(self.cfg),
            "seed": self.cfg.seed,
            "latent_dim": self.cfg.latent_dim,
            "l2": self.cfg.l2,
            "dropout": self.cfg.dropout,
            "val_mse": self.val_mse,
            "test_mse": self.test_mse,
            "hr1": "" if hr is None or hr.value is None else hr.value,
            "hr1_users": "" if hr is None else hr.eligible,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "dataset_hash": self.dataset_hash,
        }


def evaluate(model: RatingModel, s: SplitDataset, val_mse: float = math.nan, hr_seed: int | None = 0) -> MetricReport:
    users, items, truth = s.arrays("test")
    preds = clipped(model.predict(users, items), s.dataset.rating_scale)
    return MetricReport(
        model=model.kind,
        test_mse=mse(preds, truth),
        val_mse=val_mse,
        predictions=preds,
        cfg=model.cfg,
        hr1=None if hr_seed is None else hit_rate_at_1(model, s, hr_seed),
        dataset_hash=s.dataset.fingerprint(),
        n_train=len(s.train),
        n_test=len(s.test),
    )


def features_for(s: SplitDataset, kinds: Sequence[str], emb_dim: int = 64, seed: int = 0) -> TextFeatures | None:
    """Build only the text artifacts the given model kinds read."""
    needs = {MODELS[k].text for k in kinds} - {None}
    if not needs:
        return None
    layouts = [Layout(n) for n in needs if n in ("concat", "per_review")]
    return prepare_features(
        s,
        need_embeddings=bool(layouts),
        layouts=layouts,
        need_corpus="corpus" in needs,
        emb_dim=emb_dim,
        seed=seed,
    )


def run_models(
    s: SplitDataset,
    kinds: Sequence[str],
    grid: Grid | dict[str, list[TrainConfig]] = FULL_GRID,
    base: TrainConfig = TrainConfig(),
    emb_dim: int = 64,
    max_jobs: int = 1,
    hr_seed: int | None = 0,
    features: TextFeatures | None = None,
) -> dict[str, MetricReport]:
    """Grid-search and evaluate each model kind on one split.

    ``grid`` may map kinds to explicit config lists instead. When the bias
    model is among ``kinds`` every report gets frequency-bucket improvements.
    """
    if features is None:
        features = features_for(s, kinds, emb_dim, base.seed)
    reports = {}
    for kind in kinds:
        g = grid[kind] if isinstance(grid, dict) else grid
        res = grid_search(s, kind, features, g, base, max_jobs)
        reports[kind] = evaluate(res.best.model, s, res.best.best_val_mse, hr_seed)
    if "bias" in reports:
        for r in reports.values():
            r.buckets = bucket_improvement(r, reports["bias"], s)
    return reports


@dataclass
class SweepPoint:
    value: float
    stats: Stats
    reports: dict[str, MetricReport] = field(default_factory=dict)
    note: str = ""


@dataclass
class SweepResult:
    axis: str  # "k" or "mask"
    seed: int
    points: list[SweepPoint] = field(default_factory=list)

    @property
    def values(self) -> list[float]:
        return [p.value for p in self.points]


def density_sweep(
    d: Dataset,
    kinds: Sequence[str],
    grid: Grid = FULL_GRID,
    seed: int = 0,
    base: TrainConfig = TrainConfig(),
    retune: bool = True,
    emb_dim: int = 64,
    max_jobs: int = 1,
    k_max: int | None = None,
) -> SweepResult:
    """Evaluate on k-cores for k = 0, 1, 2, ... until the core is empty.

    Every k re-splits with the same seed and rebuilds all text artifacts. With
    ``retune`` off, the configs chosen at the first k are reused afterwards.
    A non-empty core too small to split is recorded without reports.
    """
    out = SweepResult("k", seed)
    fixed: dict[str, list[TrainConfig]] | None = None
    k = 0
    while k_max is None or k <= k_max:
        core = k_core(d, k)
        if len(core) == 0:
            break
        point = SweepPoint(k, stats(core))
        out.points.append(point)
        if len(core) < 10:
            point.note = "too few interactions to split"
            k += 1
            continue
        s = split(core, seed)
        g = grid if (retune or fixed is None) else fixed
        point.reports = run_models(s, kinds, g, base, emb_dim, max_jobs)
        if fixed is None:
            fixed = {kind: [r.cfg] for kind, r in point.reports.items()}
        log.info("k=%d %s", k, {kind: round(r.test_mse, 4) for kind, r in point.reports.items()})
        k += 1
    return out


def mask_sweep(
    s: SplitDataset,
    kinds: Sequence[str],
    x_values: Sequence[float] = (0, 20, 40, 60, 80, 100),
    seed: int = 0,
    grid: Grid | dict[str, list[TrainConfig]] = FULL_GRID,
    base: TrainConfig = TrainConfig(),
    emb_dim: int = 64,
    max_jobs: int = 1,
) -> SweepResult:
    """Blank x% of training reviews, rebuild the text pipeline, retrain and evaluate, for each x."""
    xs = list(x_values)
    if any(not 0 <= x <= 100 for x in xs) or any(b <= a for a, b in zip(xs, xs[1:])):
        raise ValueError("mask percentages must be strictly increasing within [0, 100]")
    out = SweepResult("mask", seed)
    for x in xs:
        masked = mask_reviews(s, x, seed)
        point = SweepPoint(x, stats(masked.dataset))
        point.reports = run_models(masked, kinds, grid, base, emb_dim, max_jobs)
        log.info("mask=%g%% %s", x, {kind: round(r.test_mse, 4) for kind, r in point.reports.items()})
        out.points.append(point)
    return out
