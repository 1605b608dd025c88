"""Shared model machinery: configuration, initialization, the optimizer and the model base class."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import ClassVar, NamedTuple

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor


@dataclass(frozen=True)
class TrainConfig:
    latent_dim: int = 8
    l2: float = 1e-6
    dropout: float = 0.2
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 30
    patience: int = 3
    seed: int = 0
    # HFT
    mu: float = 0.1
    resample_period: int = 1
    # text CNNs
    n_filters: int = 100
    filter_width: int = 3
    finetune_embeddings: bool = False
    dtype: str = "float64"

    def validate(self) -> "TrainConfig":
        problems = []
        if self.latent_dim < 1:
            problems.append("latent_dim must be >= 1")
        if self.l2 < 0:
            problems.append("l2 must be >= 0")
        if not 0 <= self.dropout < 1:
            problems.append("dropout must be in [0, 1)")
        if self.lr <= 0:
            problems.append("lr must be > 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            problems.append("batch_size, max_epochs and patience must be >= 1")
        if self.mu < 0 or self.resample_period < 1:
            problems.append("mu must be >= 0 and resample_period >= 1")
        if self.n_filters < 1 or self.filter_width < 1 or self.filter_width % 2 == 0:
            problems.append("n_filters must be >= 1 and filter_width odd")
        if self.dtype not in ("float32", "float64"):
            problems.append("dtype must be float32 or float64")
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class Batch(NamedTuple):
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    rows: np.ndarray  # positions within the training partition, or None outside training


def glorot(rng: np.random.Generator, shape: tuple[int, ...], dtype, fan: tuple[int, int] | None = None) -> np.ndarray:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)); for 2-d shapes the fans are the two extents."""
    if fan is None:
        fan = (int(np.prod(shape[:-1])), shape[-1]) if len(shape) > 1 else (shape[0], 1)
    limit = np.sqrt(6.0 / (fan[0] + fan[1]))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Adam:
    def __init__(
        self, params: dict[str, Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
    ):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.value)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class RatingModel:
    """Base class for rating predictors.

    Subclasses create their parameters in ``__init__`` via :meth:`add_param`
    and implement :meth:`score`, which returns unclipped predictions for a
    batch and records onto the active tape. Parameters named in
    ``unregularized`` are excluded from the L2 penalty.
    """

    kind: ClassVar[str] = ""
    has_bias: ClassVar[bool] = False
    uses_dropout: ClassVar[bool] = False
    uses_latent: ClassVar[bool] = True
    text: ClassVar[str | None] = None  # None, "concat", "per_review" or "corpus"
    unregularized: ClassVar[frozenset[str]] = frozenset({"alpha"})

    def __init__(self, n_users: int, n_items: int, cfg: TrainConfig, global_mean: float, rng: np.random.Generator):
        self.n_users, self.n_items = n_users, n_items
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        self.global_mean = float(global_mean)
        self.rng = rng
        self.params: dict[str, Tensor] = {}
        self.seen_users = np.ones(n_users, dtype=bool)
        self.seen_items = np.ones(n_items, dtype=bool)

    def add_param(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=trainable, name=name)
        self.params[name] = t
        return t

    def add_bias_params(self) -> None:
        self.add_param("alpha", np.full((), self.global_mean))
        self.add_param("beta_user", np.zeros(self.n_users))
        self.add_param("beta_item", np.zeros(self.n_items))

    def bias_terms(self, users: np.ndarray, items: np.ndarray) -> Tensor:
        p = self.params
        bu = ad.embed_lookup(ad.reshape(p["beta_user"], (-1, 1)), users)
        bi = ad.embed_lookup(ad.reshape(p["beta_item"], (-1, 1)), items)
        return ad.add(ad.reshape(ad.add(bu, bi), (-1,)), p["alpha"])

    def trainable(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.params.items() if p.requires_grad}

    def score(self, batch: Batch, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        raise NotImplementedError

    def l2_penalty(self) -> Tensor | None:
        terms = [ad.sum_squares(p) for k, p in self.params.items() if p.requires_grad and k not in self.unregularized]
        if not terms or self.cfg.l2 == 0:
            return None
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        return ad.mul(total, self.cfg.l2)

    def loss(self, batch: Batch, training: bool = True, rng: np.random.Generator | None = None) -> Tensor:
        """Mean squared rating error on the batch plus the L2 penalty."""
        out = ad.mse_loss(self.score(batch, training, rng), batch.ratings.astype(self.dtype))
        pen = self.l2_penalty()
        return out if pen is None else ad.add(out, pen)

    def predict(self, users: np.ndarray, items: np.ndarray, chunk: int = 4096) -> np.ndarray:
        """Unclipped predictions with the unseen-entity fallback.

        A pair whose user or item had no training interaction is predicted as
        alpha plus whichever bias exists (the training mean stands in for
        alpha in models without bias terms).
        """
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        out = np.empty(len(users))
        for s in range(0, len(users), chunk):
            u, i = users[s : s + chunk], items[s : s + chunk]
            out[s : s + chunk] = self.score(Batch(u, i, np.zeros(len(u)), None), training=False).value
        su, si = self.seen_users[users], self.seen_items[items]
        cold = ~(su & si)
        if cold.any():
            if self.has_bias:
                p = self.params
                fb = float(p["alpha"].value) + np.where(su, p["beta_user"].value[users], 0.0) + np.where(
                    si, p["beta_item"].value[items], 0.0
                )
            else:
                fb = np.full(len(users), self.global_mean)
            out[cold] = fb[cold]
        return out

    # checkpoint support
    def state(self) -> dict[str, np.ndarray]:
        st = {k: p.value.copy() for k, p in self.params.items()}
        st["_seen_users"] = self.seen_users.astype(np.float64)
        st["_seen_items"] = self.seen_items.astype(np.float64)
        return st

    def load_state(self, st: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if st[k].shape != p.shape:
                raise ValueError(f"checkpoint shape mismatch for {k}: {st[k].shape} vs {p.shape}")
            p.value = st[k].astype(self.dtype).copy()
        self.seen_users = st["_seen_users"] > 0.5
        self.seen_items = st["_seen_items"] > 0.5

    def begin_epoch(self, epoch: int) -> None:
        """Hook for per-epoch work outside gradient descent."""
