"""Tokenization, vocabulary, word embeddings and per-entity review documents."""

from __future__ import annotations

import hashlib
import math
import struct
import unicodedata
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, NamedTuple, Sequence

import numba
import numpy as np

if TYPE_CHECKING:
    from .corpus import SplitDataset

PAD, OOV = 0, 1
VOCAB_SIZE = 50_000
CONCAT_CAP = 1000
NOISE_TABLE = 1 << 20
EMB_MAGIC = b"RBEMB001"


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch)[0] in "PS"


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip punctuation/symbols from token ends.

    Stopwords are kept; tokens that are pure punctuation vanish.
    """
    out = []
    for raw in text.lower().split():
        a, b = 0, len(raw)
        while a < b and _is_punct(raw[a]):
            a += 1
        while b > a and _is_punct(raw[b - 1]):
            b -= 1
        if a < b:
            out.append(raw[a:b])
    return out


@dataclass(frozen=True, eq=False)
class Vocab:
    """Token ids: 0 is padding, 1 is out-of-vocabulary, retained words from 2."""

    tokens: tuple[str, ...]
    counts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self._index.get(token, OOV)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        index = self._index
        return np.fromiter((index.get(t, OOV) for t in tokens), dtype=np.int64, count=len(tokens))

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()


def build_vocab(reviews: Iterable[Sequence[str]], max_size: int = VOCAB_SIZE) -> Vocab:
    """Keep the ``max_size`` most frequent tokens; equal counts go to the lexicographically smaller token."""
    counts = Counter()
    for toks in reviews:
        counts.update(toks)
    kept = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:max_size]
    n_oov = sum(counts.values()) - sum(c for _, c in kept)
    return Vocab(
        tokens=("<pad>", "<oov>") + tuple(t for t, _ in kept),
        counts=(0, n_oov) + tuple(c for _, c in kept),
    )


def nearest_rank(values: Sequence[int], pct: float) -> int:
    """Nearest-rank percentile of a nonempty list."""
    ordered = sorted(values)
    rank = max(1, math.ceil(pct / 100.0 * len(ordered)))
    return int(ordered[rank - 1])


class Caps(NamedTuple):
    review_len: int
    n_reviews: int


def length_caps(s: "SplitDataset", pct: float = 98.0) -> Caps:
    """Per-review token cap and per-entity review cap from the training partition.

    The token cap ranks non-empty reviews only (blank reviews would otherwise
    drag it to zero under heavy masking); the review cap pools user and item
    review counts. Both are at least 1.
    """
    if len(s.train) == 0:
        raise ValueError("training partition is empty")
    lengths = [len(r) for r in s.train_reviews() if r]
    users, items, _ = s.arrays("train")
    per_entity = np.concatenate([np.bincount(users)[np.unique(users)], np.bincount(items)[np.unique(items)]])
    review_len = nearest_rank(lengths, pct) if lengths else 1
    return Caps(max(1, review_len), max(1, nearest_rank(per_entity.tolist(), pct)))


def train_embeddings(
    sentences: Sequence[np.ndarray],
    vocab_size: int,
    dim: int = 64,
    seed: int = 0,
    window: int = 5,
    negatives: int = 5,
    epochs: int = 5,
    lr: float = 0.025,
    min_lr: float = 1e-4,
    chunk: int = 8192,
) -> np.ndarray:
    """Skip-gram with negative sampling over id sequences; returns the input vectors.

    Pairs are visited in a fresh random order each epoch with plain per-pair
    SGD. Negatives are drawn from the unigram distribution raised to 0.75.
    The learning rate decays linearly. Row 0 (padding) is zero and never trained.
    """
    sentences = [np.asarray(s, dtype=np.int64) for s in sentences]
    sentences = [s[s != PAD] for s in sentences]
    if not any(len(s) for s in sentences):
        raise ValueError("cannot train embeddings on an empty corpus")
    flat = np.concatenate(sentences)
    sid = np.repeat(np.arange(len(sentences)), [len(x) for x in sentences])
    centers, contexts = [], []
    for off in range(1, window + 1):
        ok = np.flatnonzero(sid[off:] == sid[:-off])
        centers += [flat[ok], flat[ok + off]]
        contexts += [flat[ok + off], flat[ok]]
    centers, contexts = np.concatenate(centers), np.concatenate(contexts)
    n_pairs = len(centers)

    rng = np.random.default_rng(seed)
    w_in = (rng.random((vocab_size, dim)) - 0.5) / dim
    w_in[PAD] = 0.0
    w_out = np.zeros((vocab_size, dim))
    freq = np.bincount(np.concatenate(sentences), minlength=vocab_size).astype(np.float64) ** 0.75
    freq[PAD] = 0.0
    # quantized sampling table: each word fills slots in proportion to freq^0.75
    noise_cdf = np.cumsum(freq / freq.sum())
    table = np.minimum(np.searchsorted(noise_cdf, (np.arange(NOISE_TABLE) + 0.5) / NOISE_TABLE), vocab_size - 1)

    total = max(1, epochs * n_pairs)
    done = 0
    for _ in range(epochs):
        order = rng.permutation(n_pairs)
        for start in range(0, n_pairs, chunk):
            sel = order[start : start + chunk]
            neg = table[rng.integers(NOISE_TABLE, size=(len(sel), negatives))]
            rates = np.maximum(min_lr, lr * (1.0 - (done + np.arange(len(sel))) / total))
            done += len(sel)
            _sgns_steps(w_in, w_out, centers[sel], contexts[sel], neg, rates)
    w_in[PAD] = 0.0
    return w_in


@numba.njit(cache=True)
def _sgns_steps(w_in, w_out, centers, contexts, neg, rates):
    dim = w_in.shape[1]
    grad = np.empty(dim)
    for n in range(centers.shape[0]):
        c = centers[n]
        grad[:] = 0.0
        for k in range(neg.shape[1] + 1):
            t = contexts[n] if k == 0 else neg[n, k - 1]
            label = 1.0 if k == 0 else 0.0
            dot = 0.0
            for j in range(dim):
                dot += w_in[c, j] * w_out[t, j]
            g = (label - 1.0 / (1.0 + np.exp(-dot))) * rates[n]
            for j in range(dim):
                grad[j] += g * w_out[t, j]
                w_out[t, j] += g * w_in[c, j]
        for j in range(dim):
            w_in[c, j] += grad[j]


def save_embeddings(table: np.ndarray, vocab: Vocab, path: str | Path) -> None:
    """Flat binary: magic, |V| and d as little-endian uint64, then row-major float64.

    The token list goes to ``<path>.tokens``, one token per line in id order.
    """
    path = Path(path)
    rows, dim = table.shape
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<QQ", rows, dim))
        fh.write(np.ascontiguousarray(table, dtype="<f8").tobytes())
    Path(str(path) + ".tokens").write_text("\n".join(vocab.tokens) + "\n", encoding="utf-8")


def load_embeddings(path: str | Path) -> tuple[np.ndarray, list[str]]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != EMB_MAGIC:
        raise ValueError(f"{path}: not an embedding table")
    rows, dim = struct.unpack("<QQ", raw[8:24])
    table = np.frombuffer(raw[24:], dtype="<f8").reshape(rows, dim).astype(np.float64)
    tokens = Path(str(path) + ".tokens").read_text(encoding="utf-8").split("\n")[:rows]
    return table, tokens


class Layout(str, Enum):
    CONCAT = "concat"
    PER_REVIEW = "per_review"


@dataclass(frozen=True, eq=False)
class ReviewDocs:
    """Per-entity token stores built from training reviews only.

    CONCAT: ``users`` is (n_users, cap), ``items`` is (n_items, cap).
    PER_REVIEW: ``users`` is (n_users, n_rev, rev_len); ``user_partners`` (n_users, n_rev) holds the
    item each review was written about (-1 for empty slots), and likewise
    ``items``/``item_partners`` hold the reviewing users.
    """

    layout: Layout
    users: np.ndarray
    items: np.ndarray
    user_partners: np.ndarray | None = None
    item_partners: np.ndarray | None = None

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        for name in ("users", "items", "user_partners", "item_partners"):
            arr = getattr(self, name)
            if arr is not None:
                np.save(directory / f"docs_{self.layout.value}_{name}.npy", arr)

    @classmethod
    def load(cls, directory: str | Path, layout: Layout) -> "ReviewDocs":
        directory = Path(directory)
        arrays = {}
        for name in ("users", "items", "user_partners", "item_partners"):
            p = directory / f"docs_{layout.value}_{name}.npy"
            arrays[name] = np.load(p) if p.exists() else None
        return cls(layout, **arrays)


def _recency_order(s: "SplitDataset") -> np.ndarray:
    # training rows sorted by (time, dataset position); NaN times sort as input order
    times = s.dataset.times[s.train]
    key = np.where(np.isnan(times), -np.inf, times)
    return s.train[np.lexsort((s.train, key))]


def build_documents(
    s: "SplitDataset",
    vocab: Vocab,
    caps: Caps | None = None,
    layout: Layout = Layout.CONCAT,
    concat_cap: int = CONCAT_CAP,
) -> ReviewDocs:
    """Assemble review documents from the training partition.

    Held-out reviews never enter a document. Entities without training reviews
    get all-padding documents. PER_REVIEW keeps each entity's ``caps.n_reviews``
    most recent reviews (input order when timestamps are missing).
    """
    d = s.dataset
    rows = _recency_order(s)
    encoded = {int(t): vocab.encode(d.reviews[t]) for t in rows}
    by_user: list[list[int]] = [[] for _ in range(d.n_users)]
    by_item: list[list[int]] = [[] for _ in range(d.n_items)]
    for t in rows.tolist():
        by_user[d.users[t]].append(t)
        by_item[d.items[t]].append(t)

    if layout == Layout.CONCAT:
        def concat(groups):
            out = np.zeros((len(groups), concat_cap), dtype=np.int64)
            for e, ts in enumerate(groups):
                if ts:
                    seq = np.concatenate([encoded[t] for t in ts])[:concat_cap]
                    out[e, : len(seq)] = seq
            return out

        return ReviewDocs(Layout.CONCAT, concat(by_user), concat(by_item))

    if caps is None:
        raise ValueError("PER_REVIEW layout needs length caps")
    rev_len, n_rev = caps

    def per_review(groups, partner):
        out = np.zeros((len(groups), n_rev, rev_len), dtype=np.int64)
        partners = np.full((len(groups), n_rev), -1, dtype=np.int64)
        for e, ts in enumerate(groups):
            for slot, t in enumerate(ts[-n_rev:]):
                seq = encoded[t][:rev_len]
                out[e, slot, : len(seq)] = seq
                partners[e, slot] = partner[t]
        return out, partners

    users, user_partners = per_review(by_user, d.items)
    items, item_partners = per_review(by_item, d.users)
    return ReviewDocs(Layout.PER_REVIEW, users, items, user_partners, item_partners)


@dataclass(frozen=True, eq=False)
class TokenCorpus:
    """Flattened vocabulary ids of every training review, in training-row order.

    Tokens of training row ``r`` are ``words[offsets[r]:offsets[r + 1]]``.
    """

    words: np.ndarray
    offsets: np.ndarray
    items: np.ndarray  # item of each token

    def token_index(self, rows: np.ndarray) -> np.ndarray:
        """Flat token positions belonging to the given training rows."""
        starts = self.offsets[rows]
        lengths = self.offsets[rows + 1] - starts
        total = int(lengths.sum())
        if total == 0:
            return np.zeros(0, dtype=np.int64)
        shift = np.repeat(starts - np.concatenate([[0], np.cumsum(lengths)[:-1]]), lengths)
        return shift + np.arange(total)


def build_token_corpus(s: "SplitDataset", vocab: Vocab) -> TokenCorpus:
    d = s.dataset
    encoded = [vocab.encode(d.reviews[t]) for t in s.train]
    lengths = np.array([len(e) for e in encoded], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    words = np.concatenate(encoded) if encoded else np.zeros(0, dtype=np.int64)
    items = np.repeat(d.items[s.train], lengths)
    return TokenCorpus(words.astype(np.int64), offsets, items)


@dataclass(frozen=True, eq=False)
class TextFeatures:
    """Everything the review-based models read, derived from one split's training reviews."""

    vocab: Vocab
    caps: Caps
    embeddings: np.ndarray | None = None
    concat: ReviewDocs | None = None
    per_review: ReviewDocs | None = None
    corpus: TokenCorpus | None = None


def prepare_features(
    s: "SplitDataset",
    need_embeddings: bool = True,
    layouts: Iterable[Layout] = (Layout.CONCAT, Layout.PER_REVIEW),
    need_corpus: bool = True,
    emb_dim: int = 64,
    seed: int = 0,
    vocab_size: int = VOCAB_SIZE,
) -> TextFeatures:
    """Vocab, caps, embeddings and documents for a split.

    A training set without a single token (fully masked) gets an all-zero
    embedding table instead of an error, since every document is padding then.
    """
    train_reviews = s.train_reviews()
    vocab = build_vocab(train_reviews, vocab_size)
    caps = length_caps(s)
    emb = None
    if need_embeddings:
        sentences = [vocab.encode(r) for r in train_reviews if r]
        if sentences:
            emb = train_embeddings(sentences, len(vocab), dim=emb_dim, seed=seed)
        else:
            emb = np.zeros((len(vocab), emb_dim))
    layouts = set(layouts)
    return TextFeatures(
        vocab=vocab,
        caps=caps,
        embeddings=emb,
        concat=build_documents(s, vocab, caps, Layout.CONCAT) if Layout.CONCAT in layouts else None,
        per_review=build_documents(s, vocab, caps, Layout.PER_REVIEW) if Layout.PER_REVIEW in layouts else None,
        corpus=build_token_corpus(s, vocab) if need_corpus else None,
    )
