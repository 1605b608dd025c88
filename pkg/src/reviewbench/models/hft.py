"""Hidden factors and topics: MF whose item factors double as LDA topic proportions."""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..text import TokenCorpus
from .base import Batch, TrainConfig, glorot
from .latent import MFModel


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class HFTModel(MFModel):
    """MF plus a topic-likelihood regularizer over training reviews.

    Topic proportions of item i are theta_i = softmax(kappa * gamma_i) and
    topic-word distributions are phi_k = softmax(psi_k); the number of topics
    equals the latent dimension. Every training token carries a topic
    assignment ``z``, resampled from its posterior at the start of every
    ``resample_period``-th epoch. MF parameters are drawn from the
    initialization stream before psi, so with mu = 0 training follows MF
    exactly.
    """

    kind = "hft"
    text = "corpus"
    unregularized = frozenset({"alpha", "psi", "kappa"})

    def __init__(
        self,
        n_users,
        n_items,
        cfg: TrainConfig,
        global_mean: float,
        rng: np.random.Generator,
        corpus: TokenCorpus,
        vocab_size: int,
    ):
        super().__init__(n_users, n_items, cfg, global_mean, rng)
        self.add_param("psi", glorot(rng, (cfg.latent_dim, vocab_size), self.dtype))
        self.add_param("kappa", np.ones(()))
        self.corpus = corpus
        self.z = np.zeros(len(corpus.words), dtype=np.int64)
        self.resample_rng = np.random.default_rng([cfg.seed, 3])

    def theta(self, items: np.ndarray | None = None) -> np.ndarray:
        g = self.params["gamma_item"].value
        if items is not None:
            g = g[items]
        return _softmax_rows(float(self.params["kappa"].value) * g.astype(np.float64))

    def phi(self) -> np.ndarray:
        return _softmax_rows(self.params["psi"].value.astype(np.float64))

    def topic_loglik(self, rows: np.ndarray) -> Tensor | None:
        """Log-likelihood of the tokens of the given training rows at the current assignments."""
        tok = self.corpus.token_index(np.asarray(rows, dtype=np.int64))
        if len(tok) == 0:
            return None
        words, z = self.corpus.words[tok], self.z[tok]
        uniq, inv = np.unique(self.corpus.items[tok], return_inverse=True)
        p = self.params
        log_theta = ad.log_softmax(ad.mul(ad.embed_lookup(p["gamma_item"], uniq), p["kappa"]))
        log_phi = ad.log_softmax(p["psi"])
        return ad.add(ad.sum(ad.take(log_theta, inv, z)), ad.sum(ad.take(log_phi, z, words)))

    def loss(self, batch: Batch, training=True, rng=None) -> Tensor:
        base = super().loss(batch, training, rng)
        if batch.rows is None:
            return base
        lik = self.topic_loglik(batch.rows)
        if lik is None:
            return base
        return ad.sub(base, ad.mul(lik, self.cfg.mu / len(batch.rows)))

    def resample(self, rng: np.random.Generator | None = None, chunk: int = 65536) -> np.ndarray:
        """Draw each token's topic with probability proportional to theta[item, k] * phi[k, word]."""
        rng = self.resample_rng if rng is None else rng
        theta, phi = self.theta(), self.phi()
        words, items = self.corpus.words, self.corpus.items
        z = np.empty(len(words), dtype=np.int64)
        for s in range(0, len(words), chunk):
            w = theta[items[s : s + chunk]] * phi[:, words[s : s + chunk]].T
            cdf = np.cumsum(w, axis=1)
            u = rng.random(len(cdf)) * cdf[:, -1]
            z[s : s + chunk] = np.minimum((cdf < u[:, None]).sum(axis=1), cdf.shape[1] - 1)
        self.z = z
        return z

    def begin_epoch(self, epoch: int) -> None:
        if (epoch - 1) % self.cfg.resample_period == 0:
            self.resample()


def hft_objective(model: HFTModel, batch: Batch) -> Tensor:
    """Squared rating error (batch mean) plus L2, minus mu times the per-interaction topic log-likelihood."""
    return model.loss(batch, training=False)


def hft_resample(model: HFTModel, seed: int | None = None) -> np.ndarray:
    return model.resample(None if seed is None else np.random.default_rng(seed))
