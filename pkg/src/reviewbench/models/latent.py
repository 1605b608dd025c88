"""Rating-only predictors: bias baseline, matrix factorization and NeuMF."""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from .base import Batch, RatingModel, TrainConfig, glorot


class BiasModel(RatingModel):
    """alpha + beta_u + beta_i."""

    kind = "bias"
    has_bias = True
    uses_latent = False

    def __init__(self, n_users, n_items, cfg: TrainConfig, global_mean: float, rng: np.random.Generator):
        super().__init__(n_users, n_items, cfg, global_mean, rng)
        self.add_bias_params()

    def score(self, batch: Batch, training=False, rng=None) -> Tensor:
        return self.bias_terms(batch.users, batch.items)


class MFModel(RatingModel):
    """alpha + beta_u + beta_i + gamma_u . gamma_i."""

    kind = "mf"
    has_bias = True

    def __init__(self, n_users, n_items, cfg: TrainConfig, global_mean: float, rng: np.random.Generator):
        super().__init__(n_users, n_items, cfg, global_mean, rng)
        self.add_bias_params()
        dim = cfg.latent_dim
        self.add_param("gamma_user", glorot(rng, (n_users, dim), self.dtype))
        self.add_param("gamma_item", glorot(rng, (n_items, dim), self.dtype))

    def interaction(self, users, items) -> Tensor:
        gu = ad.embed_lookup(self.params["gamma_user"], users)
        gi = ad.embed_lookup(self.params["gamma_item"], items)
        return ad.dot(gu, gi)

    def score(self, batch: Batch, training=False, rng=None) -> Tensor:
        return ad.add(self.bias_terms(batch.users, batch.items), self.interaction(batch.users, batch.items))


class NeuMFModel(RatingModel):
    """alpha + beta_u + beta_i + interaction(gamma_u, gamma_i).

    The interaction joins a generalized-MF branch (gamma_u * gamma_i) with an MLP over
    [gamma_u; gamma_i] of widths 2*dim -> dim -> dim/2 (relu), and maps both to one
    output through a final linear layer. Setting that layer to ones on the
    GMF branch and zeros elsewhere reproduces the MF inner product.
    """

    kind = "neumf"
    has_bias = True
    uses_dropout = True

    def __init__(self, n_users, n_items, cfg: TrainConfig, global_mean: float, rng: np.random.Generator):
        super().__init__(n_users, n_items, cfg, global_mean, rng)
        self.add_bias_params()
        dim = cfg.latent_dim
        half = max(1, dim // 2)
        dt = self.dtype
        self.add_param("gamma_user", glorot(rng, (n_users, dim), dt))
        self.add_param("gamma_item", glorot(rng, (n_items, dim), dt))
        self.add_param("mlp_w1", glorot(rng, (2 * dim, dim), dt))
        self.add_param("mlp_b1", np.zeros(dim))
        self.add_param("mlp_w2", glorot(rng, (dim, half), dt))
        self.add_param("mlp_b2", np.zeros(half))
        self.add_param("out_w", glorot(rng, (dim + half, 1), dt))
        self.add_param("out_b", np.zeros(1))

    def score(self, batch: Batch, training=False, rng=None) -> Tensor:
        p = self.params
        gu = ad.embed_lookup(p["gamma_user"], batch.users)
        gi = ad.embed_lookup(p["gamma_item"], batch.items)
        gmf = ad.mul(gu, gi)
        h = ad.relu(ad.add(ad.matmul(ad.concat([gu, gi]), p["mlp_w1"]), p["mlp_b1"]))
        h = ad.dropout(h, self.cfg.dropout, rng, training)
        h = ad.relu(ad.add(ad.matmul(h, p["mlp_w2"]), p["mlp_b2"]))
        h = ad.dropout(h, self.cfg.dropout, rng, training)
        f = ad.add(ad.matmul(ad.concat([gmf, h]), p["out_w"]), p["out_b"])
        return ad.add(self.bias_terms(batch.users, batch.items), ad.reshape(f, (-1,)))
