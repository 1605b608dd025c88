"""Review-encoding predictors: DeepCoNN, DeepCoNN++ and NARRE."""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..text import PAD, ReviewDocs
from .base import Batch, RatingModel, TrainConfig, glorot


def trim_padding(docs: np.ndarray, width: int) -> np.ndarray:
    """Drop trailing padding columns that cannot change a relu + max-over-time encoding.

    Without conv bias, a window lying wholly in padding outputs 0, and relu
    outputs are never negative, so only windows touching a real token matter.
    Documents are right-padded.
    """
    longest = int((docs != PAD).sum(axis=-1).max(initial=0))
    keep = min(docs.shape[-1], max(1, longest + width // 2))
    return docs[..., :keep]


class _TextModel(RatingModel):
    def __init__(self, n_users, n_items, cfg: TrainConfig, global_mean, rng, docs: ReviewDocs, embeddings: np.ndarray):
        super().__init__(n_users, n_items, cfg, global_mean, rng)
        self.docs = docs
        if cfg.finetune_embeddings:
            self.embeddings = self.add_param("embeddings", np.array(embeddings, copy=True))
        else:
            self.embeddings = Tensor(np.asarray(embeddings, dtype=self.dtype), name="embeddings")
        self.emb_dim = self.embeddings.shape[1]

    def encode(self, tokens: np.ndarray, filters: Tensor) -> Tensor:
        """embed -> conv1d -> relu -> max over time, for (n, T) token ids -> (n, n_filters)."""
        tokens = trim_padding(tokens, self.cfg.filter_width)
        e = ad.embed_lookup(self.embeddings, tokens)
        return ad.conv_relu_max(e, filters)

    def conv_shape(self) -> tuple[int, int, int]:
        return (self.cfg.filter_width, self.emb_dim, self.cfg.n_filters)


class DeepCoNNModel(_TextModel):
    """Two TextCNN towers over concatenated review documents, joined by a dense regressor.

    Each tower: embed -> conv1d -> relu -> max over time -> linear to latent_dim. The
    towers' outputs are concatenated, dropped out and mapped to a rating by a
    dense layer with bias (initialized to the training mean unless bias terms
    are present). The ``++`` variant adds alpha + beta_u + beta_i.
    """

    kind = "deepconn"
    text = "concat"
    uses_dropout = True
    unregularized = frozenset({"alpha", "reg_b"})

    def __init__(self, n_users, n_items, cfg, global_mean, rng, docs, embeddings):
        super().__init__(n_users, n_items, cfg, global_mean, rng, docs, embeddings)
        if self.has_bias:
            self.add_bias_params()
        dim, n_filters = cfg.latent_dim, cfg.n_filters
        for side in ("user", "item"):
            self.add_param(f"conv_{side}", glorot(rng, self.conv_shape(), self.dtype))
            self.add_param(f"proj_{side}", glorot(rng, (n_filters, dim), self.dtype))
        self.add_param("reg_w", glorot(rng, (2 * dim, 1), self.dtype))
        # without bias terms the regressor offset plays alpha's role, so it starts at the training mean
        self.add_param("reg_b", np.full(1, 0.0 if self.has_bias else global_mean))

    def tower(self, side: str, ids: np.ndarray) -> Tensor:
        uniq, inv = np.unique(ids, return_inverse=True)
        docs = self.docs.users if side == "user" else self.docs.items
        h = ad.matmul(self.encode(docs[uniq], self.params[f"conv_{side}"]), self.params[f"proj_{side}"])
        return ad.embed_lookup(h, inv)

    def score(self, batch: Batch, training=False, rng=None) -> Tensor:
        p = self.params
        z = ad.concat([self.tower("user", batch.users), self.tower("item", batch.items)])
        z = ad.dropout(z, self.cfg.dropout, rng, training)
        r = ad.reshape(ad.add(ad.matmul(z, p["reg_w"]), p["reg_b"]), (-1,))
        if self.has_bias:
            r = ad.add(r, self.bias_terms(batch.users, batch.items))
        return r


class DeepCoNNPlusModel(DeepCoNNModel):
    kind = "deepconn++"
    has_bias = True


class NARREModel(_TextModel):
    """Attention over individually encoded reviews, combined with id embeddings.

    Each review is encoded by conv1d + relu + max. Its attention score is
    v . relu(W_r enc + W_id key + b) where key is the id embedding of the
    other party of that review; scores are softmaxed over the entity's
    non-empty reviews. The pooled encoding goes through a linear map to latent_dim,
    is added to the entity's id embedding, and the user and item sides are
    multiplied elementwise and regressed to a rating, plus the bias sum.
    """

    kind = "narre"
    text = "per_review"
    has_bias = True
    uses_dropout = True

    def __init__(self, n_users, n_items, cfg, global_mean, rng, docs, embeddings):
        super().__init__(n_users, n_items, cfg, global_mean, rng, docs, embeddings)
        self.add_bias_params()
        dim, n_filters = cfg.latent_dim, cfg.n_filters
        att_dim = dim
        dt = self.dtype
        counts = {"user": n_users, "item": n_items}
        for side, other in (("user", "item"), ("item", "user")):
            self.add_param(f"conv_{side}", glorot(rng, self.conv_shape(), dt))
            self.add_param(f"att_rev_{side}", glorot(rng, (n_filters, att_dim), dt))
            self.add_param(f"att_key_{side}", glorot(rng, (dim, att_dim), dt))
            self.add_param(f"att_b_{side}", np.zeros(att_dim))
            self.add_param(f"att_v_{side}", glorot(rng, (att_dim, 1), dt))
            self.add_param(f"proj_{side}", glorot(rng, (n_filters, dim), dt))
            self.add_param(f"id_{side}", glorot(rng, (counts[side], dim), dt))
            self.add_param(f"key_{side}", glorot(rng, (counts[other], dim), dt))
        self.add_param("reg_w", glorot(rng, (dim, 1), dt))

    def _side(self, side: str, ids: np.ndarray) -> tuple[Tensor, Tensor]:
        """Pooled review latent (n, latent_dim) and attention weights (n, n_rev) for the given entities."""
        p = self.params
        docs = self.docs.users if side == "user" else self.docs.items
        partners = self.docs.user_partners if side == "user" else self.docs.item_partners
        reviews = docs[ids]  # (n, n_rev, rev_len)
        n, n_rev, rev_len = reviews.shape
        present = (reviews != PAD).any(axis=-1)  # (n, n_rev)
        flat = reviews.reshape(n * n_rev, rev_len)
        sel = np.flatnonzero(present.ravel())
        n_filters = self.cfg.n_filters
        zero = Tensor(np.zeros((1, n_filters), dtype=self.dtype))
        if len(sel):
            enc = ad.concat([zero, self.encode(flat[sel], p[f"conv_{side}"])], axis=0)
        else:
            enc = zero
        slot = np.zeros(n * n_rev, dtype=np.int64)
        slot[sel] = np.arange(1, len(sel) + 1)
        enc = ad.reshape(ad.embed_lookup(enc, slot), (n, n_rev, n_filters))
        keys = ad.embed_lookup(p[f"key_{side}"], np.maximum(partners[ids], 0))  # (n, n_rev, latent_dim)
        pre = ad.add(ad.matmul(enc, p[f"att_rev_{side}"]), ad.matmul(keys, p[f"att_key_{side}"]))
        pre = ad.add(pre, p[f"att_b_{side}"])
        scores = ad.reshape(ad.matmul(ad.relu(pre), p[f"att_v_{side}"]), (n, n_rev))
        weights = ad.softmax(scores, axis=-1, mask=present)
        pooled = ad.weighted_sum(weights, enc)  # (n, n_filters)
        return ad.matmul(pooled, p[f"proj_{side}"]), weights

    def attention(self, side: str, ids: np.ndarray) -> np.ndarray:
        return self._side(side, np.asarray(ids, dtype=np.int64))[1].value

    def score(self, batch: Batch, training=False, rng=None) -> Tensor:
        p = self.params
        halves = []
        for side, ids in (("user", batch.users), ("item", batch.items)):
            uniq, inv = np.unique(ids, return_inverse=True)
            latent, _ = self._side(side, uniq)
            halves.append(ad.add(ad.embed_lookup(p[f"id_{side}"], ids), ad.embed_lookup(latent, inv)))
        h = ad.dropout(ad.mul(halves[0], halves[1]), self.cfg.dropout, rng, training)
        r = ad.reshape(ad.matmul(h, p["reg_w"]), (-1,))
        return ad.add(r, self.bias_terms(batch.users, batch.items))
