"""Mini-batch Adam training with validation early stopping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..autodiff import Tape
from ..corpus import SplitDataset
from ..text import TextFeatures
from .base import Adam, Batch, RatingModel, TrainConfig
from .hft import HFTModel
from .latent import BiasModel, MFModel, NeuMFModel
from .reviews import DeepCoNNModel, DeepCoNNPlusModel, NARREModel

log = logging.getLogger(__name__)

MODELS: dict[str, type[RatingModel]] = {
    cls.kind: cls for cls in (BiasModel, MFModel, NeuMFModel, HFTModel, DeepCoNNModel, DeepCoNNPlusModel, NARREModel)
}


class TrainingDiverged(RuntimeError):
    def __init__(self, kind: str, epoch: int, batch: int):
        super().__init__(f"{kind}: loss became non-finite at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


@dataclass
class TrainResult:
    model: RatingModel
    cfg: TrainConfig
    val_trace: list[float] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def best_val_mse(self) -> float:
        return self.val_trace[self.best_epoch - 1]

    @property
    def epochs_run(self) -> int:
        return len(self.val_trace)


def build_model(kind: str, s: SplitDataset, cfg: TrainConfig, features: TextFeatures | None = None) -> RatingModel:
    """Fresh model for ``kind`` with parameters initialized from ``cfg.seed``."""
    if kind not in MODELS:
        raise ValueError(f"unknown model kind {kind!r}; choose from {sorted(MODELS)}")
    cls = MODELS[kind]
    d = s.dataset
    ratings = d.ratings[s.train]
    global_mean = float(ratings.mean()) if len(ratings) else 0.5 * sum(d.rating_scale)
    rng = np.random.default_rng([cfg.seed, 0])
    args = (d.n_users, d.n_items, cfg, global_mean, rng)
    if cls.text is None:
        model = cls(*args)
    elif features is None:
        raise ValueError(f"{kind} needs text features")
    elif cls.text == "corpus":
        model = cls(*args, corpus=features.corpus, vocab_size=len(features.vocab))
    else:
        docs = features.concat if cls.text == "concat" else features.per_review
        if docs is None or features.embeddings is None:
            raise ValueError(f"{kind} needs {cls.text} documents and embeddings")
        model = cls(*args, docs=docs, embeddings=features.embeddings)
    model.seen_users = np.bincount(d.users[s.train], minlength=d.n_users) > 0
    model.seen_items = np.bincount(d.items[s.train], minlength=d.n_items) > 0
    return model


def clipped(pred: np.ndarray, scale: tuple[float, float]) -> np.ndarray:
    return np.clip(pred, scale[0], scale[1])


def train(kind: str, s: SplitDataset, features: TextFeatures | None, cfg: TrainConfig) -> TrainResult:
    """Train one model; returns the parameters of the best validation epoch.

    Validation MSE uses predictions clipped to the rating scale. Training
    stops once ``cfg.patience`` epochs pass without improvement.
    """
    cfg.validate()
    model = build_model(kind, s, cfg, features)
    d = s.dataset
    tr_u, tr_i, tr_r = s.arrays("train")
    va_u, va_i, va_r = s.arrays("validation")
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    dropout_rng = np.random.default_rng([cfg.seed, 2])
    params = model.trainable()
    opt = Adam(params, cfg.lr)
    result = TrainResult(model, cfg)
    best = np.inf
    snapshot = None
    for epoch in range(1, cfg.max_epochs + 1):
        model.begin_epoch(epoch)
        perm = shuffle_rng.permutation(len(tr_r))
        total = 0.0
        for b, start in enumerate(range(0, len(perm), cfg.batch_size)):
            rows = perm[start : start + cfg.batch_size]
            batch = Batch(tr_u[rows], tr_i[rows], tr_r[rows], rows)
            with Tape() as tape:
                loss = model.loss(batch, training=True, rng=dropout_rng)
            value = float(loss.value)
            if not np.isfinite(value):
                raise TrainingDiverged(kind, epoch, b)
            tape.backward(loss, params.values())
            opt.step()
            total += value * len(rows)
        result.train_loss.append(total / max(1, len(perm)))
        pred = model.predict(va_u, va_i)
        if not np.all(np.isfinite(pred)):
            raise TrainingDiverged(kind, epoch, b)
        diff = clipped(pred, d.rating_scale) - va_r
        val = float(np.dot(diff, diff) / max(1, len(diff)))
        result.val_trace.append(val)
        log.debug("%s epoch %d: train %.5f val %.5f", kind, epoch, result.train_loss[-1], val)
        if val < best:
            best = val
            result.best_epoch = epoch
            snapshot = {k: p.value.copy() for k, p in model.params.items()}
        elif epoch - result.best_epoch >= cfg.patience:
            break
    for k, v in snapshot.items():
        model.params[k].value = v
    return result
