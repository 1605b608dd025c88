"""Synthetic review datasets with planted structure, for tests and experiment scripts."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Dataset

STOPWORDS = ("the", "and", "it", "is", "this", "a", "of", "to")


@dataclass(frozen=True, eq=False)
class Planted:
    """A generated dataset and its ground truth, indexed by the dataset's dense ids."""

    dataset: Dataset
    alpha: float
    beta_user: np.ndarray
    beta_item: np.ndarray
    gamma_user: np.ndarray
    gamma_item: np.ndarray


def _quantile_group(x: np.ndarray, groups: int) -> np.ndarray:
    ranks = np.argsort(np.argsort(x))
    return (ranks * groups // len(x)).astype(np.int64)


def planted(
    n_users: int = 2000,
    n_items: int = 300,
    n_interactions: int = 40_000,
    k: int = 4,
    noise: float = 0.25,
    with_text: bool = False,
    n_cold_items: int = 0,
    alpha: float = 3.6,
    bias_sd: float = 0.4,
    factor_sd: float = 0.6,
    topic_sharpness: float = 3.0,
    topic_words: int = 12,
    words_per_topic: int = 15,
    integer_ratings: bool = False,
    seed: int = 0,
) -> Planted:
    """rating = clip(alpha + beta_u + beta_i + gamma_u . gamma_i + N(0, noise^2), 1, 5).

    ``n_cold_items`` items receive only 1-3 interactions each; the rest are
    spread uniformly over the remaining items. Pairs are distinct.

    With ``with_text`` each review holds ``topic_words`` tokens whose topic is
    drawn from softmax(topic_sharpness * gamma_i) and whose word is uniform in
    that topic's block, plus two item-quality words (the quintile of beta_i),
    two user-style words (the quintile of beta_u) and two stopwords.

    ``integer_ratings`` rounds ratings to whole stars, as in review sites.
    """
    rng = np.random.default_rng(seed)
    bu = rng.normal(0, bias_sd, n_users)
    bi = rng.normal(0, bias_sd, n_items)
    gu = rng.normal(0, factor_sd, (n_users, k))
    gi = rng.normal(0, factor_sd, (n_items, k))

    pairs: set[tuple[int, int]] = set()
    order: list[tuple[int, int]] = []

    def draw(item: int) -> None:
        while True:
            u = int(rng.integers(n_users))
            if (u, item) not in pairs:
                pairs.add((u, item))
                order.append((u, item))
                return

    cold = np.arange(n_items - n_cold_items, n_items)
    for j in cold:
        for _ in range(int(rng.integers(1, 4))):
            draw(int(j))
    warm = n_items - n_cold_items
    # every user and warm item appears at least once
    for u in range(n_users):
        j = int(rng.integers(warm))
        if (u, j) not in pairs:
            pairs.add((u, j))
            order.append((u, j))
    while len(order) < n_interactions:
        draw(int(rng.integers(warm)))
    order_arr = np.array(order, dtype=np.int64)[rng.permutation(len(order))]
    users, items = order_arr[:, 0], order_arr[:, 1]
    raw = alpha + bu[users] + bi[items] + np.einsum("nk,nk->n", gu[users], gi[items]) + rng.normal(0, noise, len(users))
    ratings = np.clip(np.rint(raw) if integer_ratings else raw, 1.0, 5.0)

    reviews: list[tuple[str, ...]] = [()] * len(users)
    if with_text:
        theta = np.exp(topic_sharpness * gi)
        theta /= theta.sum(axis=1, keepdims=True)
        qi = _quantile_group(bi, 5)
        qu = _quantile_group(bu, 5)
        cdf = np.cumsum(theta, axis=1)
        for t in range(len(users)):
            u, i = users[t], items[t]
            topics = np.minimum((cdf[i][None, :] < rng.random(topic_words)[:, None]).sum(axis=1), k - 1)
            slots = rng.integers(words_per_topic, size=topic_words)
            toks = [f"t{z}w{s}" for z, s in zip(topics, slots)]
            toks += [f"quality{qi[i]}x{s}" for s in rng.integers(3, size=2)]
            toks += [f"style{qu[u]}x{s}" for s in rng.integers(3, size=2)]
            toks += [STOPWORDS[s] for s in rng.integers(len(STOPWORDS), size=2)]
            reviews[t] = tuple(toks[s] for s in rng.permutation(len(toks)))

    d = Dataset.from_records(
        ((f"u{u}", f"i{i}", float(r), rev) for u, i, r, rev in zip(users, items, ratings, reviews)),
        (1.0, 5.0),
    )
    u_order = np.array([int(e[1:]) for e in d.user_ids])
    i_order = np.array([int(e[1:]) for e in d.item_ids])
    return Planted(d, alpha, bu[u_order], bi[i_order], gu[u_order], gi[i_order])


def write_jsonl(d: Dataset, path: str | Path, field_map: dict[str, str] | None = None) -> None:
    """Write a dataset as review JSON lines (Amazon field names by default)."""
    from .corpus import DEFAULT_FIELDS

    f = {**DEFAULT_FIELDS, **(field_map or {})}
    inv_u = {v: k for k, v in d.user_ids.items()}
    inv_i = {v: k for k, v in d.item_ids.items()}
    with open(path, "w", encoding="utf-8") as fh:
        for x in d:
            rec = {
                f["user"]: inv_u[x.user],
                f["item"]: inv_i[x.item],
                f["rating"]: x.rating,
                f["review"]: " ".join(x.review),
            }
            fh.write(json.dumps(rec) + "\n")
