from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from reviewbench import synthetic  # noqa: E402
from reviewbench.corpus import Dataset, split  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


def make_dataset(rows, scale=(1.0, 5.0)) -> Dataset:
    """rows: (user, item, rating[, tokens[, time]]) with tokens given as a space-separated string."""
    recs = []
    for r in rows:
        toks = tuple(r[3].split()) if len(r) > 3 else ()
        recs.append((r[0], r[1], r[2], toks, r[4] if len(r) > 4 else None))
    return Dataset.from_records(recs, scale)


@pytest.fixture(scope="session")
def fixture_path() -> Path:
    return FIXTURES / "reviews_1k.jsonl"


@pytest.fixture(scope="session")
def small_text():
    """A 3k-interaction planted dataset with review text, and its split."""
    p = synthetic.planted(n_users=200, n_items=80, n_interactions=3000, with_text=True, n_cold_items=10, seed=3)
    return p, split(p.dataset, 0)
