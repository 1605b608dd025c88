"""Review datasets: ingestion, k-core pruning, seeded splits and review masking."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .text import tokenize

log = logging.getLogger(__name__)

DEFAULT_FIELDS = {
    "user": "reviewerID",
    "item": "asin",
    "rating": "overall",
    "review": "reviewText",
    "time": "unixReviewTime",
}

CACHE_HEADER = "#reviewbench-dataset\tv1"


class DataError(ValueError):
    """Malformed or unusable input data."""


class Interaction(NamedTuple):
    user: int
    item: int
    rating: float
    review: tuple[str, ...]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Indexed interactions.

    Reviews are stored as token tuples; an empty tuple is a legal (masked or
    blank) review. ``times`` holds review timestamps, NaN where unknown.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    reviews: tuple[tuple[str, ...], ...]
    user_ids: dict[str, int]
    item_ids: dict[str, int]
    rating_scale: tuple[float, float] = (1.0, 5.0)
    times: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.ratings)
        if not (len(self.users) == len(self.items) == len(self.reviews) == n):
            raise DataError("interaction columns have different lengths")
        if self.times is None:
            object.__setattr__(self, "times", np.full(n, np.nan))
        for arr in (self.users, self.items, self.ratings, self.times):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.ratings)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def __iter__(self) -> Iterator[Interaction]:
        for t in range(len(self)):
            yield Interaction(int(self.users[t]), int(self.items[t]), float(self.ratings[t]), self.reviews[t])

    @classmethod
    def from_records(
        cls,
        records: Iterable[tuple],
        rating_scale: tuple[float, float] = (1.0, 5.0),
    ) -> "Dataset":
        """Build from ``(user, item, rating, tokens[, time])`` tuples, indexing ids in first-seen order."""
        user_ids: dict[str, int] = {}
        item_ids: dict[str, int] = {}
        users, items, ratings, reviews, times = [], [], [], [], []
        lo, hi = rating_scale
        for rec in records:
            u, i, r, toks = rec[:4]
            if not lo <= r <= hi:
                raise DataError(f"rating {r} outside scale {rating_scale}")
            users.append(user_ids.setdefault(str(u), len(user_ids)))
            items.append(item_ids.setdefault(str(i), len(item_ids)))
            ratings.append(float(r))
            reviews.append(tuple(toks))
            times.append(float(rec[4]) if len(rec) > 4 and rec[4] is not None else math.nan)
        return cls(
            users=np.asarray(users, dtype=np.int64),
            items=np.asarray(items, dtype=np.int64),
            ratings=np.asarray(ratings, dtype=np.float64),
            reviews=tuple(reviews),
            user_ids=user_ids,
            item_ids=item_ids,
            rating_scale=(float(lo), float(hi)),
            times=np.asarray(times, dtype=np.float64),
        )

    def subset(self, idx: Sequence[int] | np.ndarray) -> "Dataset":
        """Interactions at ``idx`` (kept in dataset order), with indices re-densified."""
        idx = np.sort(np.asarray(idx, dtype=np.int64))
        inv_u = {v: k for k, v in self.user_ids.items()}
        inv_i = {v: k for k, v in self.item_ids.items()}
        return Dataset.from_records(
            (
                (inv_u[self.users[t]], inv_i[self.items[t]], self.ratings[t], self.reviews[t], self.times[t])
                for t in idx
            ),
            self.rating_scale,
        )

    def with_reviews(self, reviews: Sequence[tuple[str, ...]]) -> "Dataset":
        return replace(self, reviews=tuple(reviews))

    def fingerprint(self) -> str:
        """sha256 of the canonical cache serialization."""
        h = hashlib.sha256()
        for line in _cache_lines(self):
            h.update(line.encode("utf-8"))
        return h.hexdigest()


@dataclass(frozen=True)
class LoadReport:
    skipped_missing: int = 0
    rejected_scale: int = 0
    malformed: int = 0


@dataclass(frozen=True, eq=False)
class SplitDataset:
    """Train/validation/test index lists into one shared Dataset."""

    dataset: Dataset
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    seed: int

    def part(self, name: str) -> np.ndarray:
        return {"train": self.train, "validation": self.validation, "val": self.validation, "test": self.test}[name]

    def arrays(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = self.part(name)
        d = self.dataset
        return d.users[idx], d.items[idx], d.ratings[idx]

    def train_reviews(self) -> list[tuple[str, ...]]:
        return [self.dataset.reviews[t] for t in self.train]


def load_interactions(
    path: str | Path,
    field_map: dict[str, str] | None = None,
    rating_scale: tuple[float, float] = (1.0, 5.0),
) -> tuple[Dataset, LoadReport]:
    """Read newline-delimited JSON reviews.

    Records missing a mapped user/item/rating/review field are skipped,
    records whose rating falls outside ``rating_scale`` are rejected; both are
    counted in the returned report. The time field is optional.
    """
    fields = {**DEFAULT_FIELDS, **(field_map or {})}
    lo, hi = rating_scale
    skipped = rejected = malformed = 0
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                log.warning("%s:%d: not valid JSON", path, lineno)
                malformed += 1
                continue
            required = ("user", "item", "rating", "review")
            if not isinstance(rec, dict) or any(rec.get(fields[f]) is None for f in required):
                skipped += 1
                continue
            try:
                rating = float(rec[fields["rating"]])
            except (TypeError, ValueError):
                malformed += 1
                continue
            if not lo <= rating <= hi:
                rejected += 1
                continue
            t = rec.get(fields["time"])
            try:
                t = float(t) if t is not None else None
            except (TypeError, ValueError):
                t = None
            records.append((rec[fields["user"]], rec[fields["item"]], rating, tokenize(str(rec[fields["review"]])), t))
    report = LoadReport(skipped, rejected, malformed)
    if skipped or rejected or malformed:
        log.info("loaded %d records from %s (%s)", len(records), path, report)
    return Dataset.from_records(records, rating_scale), report


def k_core(d: Dataset, k: int) -> Dataset:
    """Maximal sub-dataset where every user and item has at least ``k`` interactions.

    Cascading deletion driven by a queue of under-degree nodes; duplicate
    (user, item) pairs count as separate interactions.
    """
    if k < 0:
        raise ValueError(f"k must be nonnegative, got {k}")
    n = len(d)
    if k == 0:
        return d.subset(np.arange(n))
    # nodes below n_users are users, the rest items
    n_users = d.n_users
    ends = np.stack([d.users, d.items + n_users], axis=1)
    deg = np.bincount(ends.ravel(), minlength=n_users + d.n_items)
    incident: list[list[int]] = [[] for _ in range(len(deg))]
    for t, (a, b) in enumerate(ends.tolist()):
        incident[a].append(t)
        incident[b].append(t)
    alive = np.ones(n, dtype=bool)
    removed = deg < k
    queue = deque(np.flatnonzero(removed).tolist())
    while queue:
        node = queue.popleft()
        for t in incident[node]:
            if not alive[t]:
                continue
            alive[t] = False
            for other in ends[t]:
                deg[other] -= 1
                if not removed[other] and deg[other] < k:
                    removed[other] = True
                    queue.append(int(other))
    return d.subset(np.flatnonzero(alive))


def split(d: Dataset, seed: int) -> SplitDataset:
    """Seeded shuffle, then contiguous 80/10/10 train/validation/test partition."""
    n = len(d)
    if n < 10:
        raise DataError(f"need at least 10 interactions to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = round(0.8 * n)
    n_val = round(0.1 * n)
    return SplitDataset(
        dataset=d,
        train=np.sort(perm[:n_train]),
        validation=np.sort(perm[n_train : n_train + n_val]),
        test=np.sort(perm[n_train + n_val :]),
        seed=seed,
    )


def mask_count(pct: float, n: int) -> int:
    return int(math.floor(pct * n / 100.0 + 0.5))


def mask_reviews(s: SplitDataset, pct: float, seed: int) -> SplitDataset:
    """Blank out ``pct`` percent of the training reviews (half-up rounding).

    Ratings, split membership and held-out reviews are untouched.
    """
    if not 0 <= pct <= 100:
        raise ValueError(f"mask percentage must be in [0, 100], got {pct}")
    n_mask = mask_count(pct, len(s.train))
    if n_mask == 0:
        return s
    chosen = np.random.default_rng(seed).choice(s.train, size=n_mask, replace=False)
    reviews = list(s.dataset.reviews)
    for t in chosen:
        reviews[t] = ()
    return replace(s, dataset=s.dataset.with_reviews(reviews))


class Stats(NamedTuple):
    reviews: int
    users: int
    items: int


def stats(d: Dataset) -> Stats:
    return Stats(len(d), d.n_users, d.n_items)


def _cache_lines(d: Dataset) -> Iterator[str]:
    inv_u = {v: k for k, v in d.user_ids.items()}
    inv_i = {v: k for k, v in d.item_ids.items()}
    lo, hi = d.rating_scale
    yield f"{CACHE_HEADER}\n"
    yield f"#scale\t{lo!r}\t{hi!r}\n"
    for t in range(len(d)):
        u, i = inv_u[int(d.users[t])], inv_i[int(d.items[t])]
        time = "" if math.isnan(d.times[t]) else repr(float(d.times[t]))
        yield f"{u}\t{i}\t{float(d.ratings[t])!r}\t{time}\t{' '.join(d.reviews[t])}\n"


def save_dataset(d: Dataset, path: str | Path) -> None:
    """Write the TSV cache: header, scale line, then user, item, rating, time, tokens per row."""
    for key in list(d.user_ids) + list(d.item_ids):
        if any(c in key for c in "\t\n\r"):
            raise DataError(f"external id {key!r} contains a tab or newline")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(_cache_lines(d))


def read_dataset(path: str | Path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != CACHE_HEADER:
            raise DataError(f"{path}: unrecognised cache header {header!r}")
        _, lo, hi = fh.readline().rstrip("\n").split("\t")
        records = []
        for line in fh:
            u, i, r, t, toks = line.rstrip("\n").split("\t")
            records.append((u, i, float(r), tuple(toks.split()), float(t) if t else None))
    return Dataset.from_records(records, (float(lo), float(hi)))


def save_split(s: SplitDataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"#reviewbench-split\tv1\tseed={s.seed}\n")
        for name in ("train", "validation", "test"):
            fh.write(name + "\t" + " ".join(map(str, s.part(name).tolist())) + "\n")


def read_split(d: Dataset, path: str | Path) -> SplitDataset:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header[:2] != ["#reviewbench-split", "v1"]:
            raise DataError(f"{path}: unrecognised split header")
        seed = int(header[2].split("=")[1])
        parts = {}
        for line in fh:
            name, _, rest = line.rstrip("\n").partition("\t")
            parts[name] = np.array([int(x) for x in rest.split()], dtype=np.int64)
    return SplitDataset(d, parts["train"], parts["validation"], parts["test"], seed)
