import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reviewbench.corpus import SplitDataset, k_core
from reviewbench.eval import (
    bucket_improvement,
    density_sweep,
    evaluate,
    frequency_buckets,
    hit_rate_at_1,
    mask_sweep,
    mse,
)
from reviewbench.models import TrainConfig, train
from reviewbench.search import Grid

from conftest import make_dataset
from oracles import hr1_loop

ONE_POINT = Grid((2,), (1e-6,), (0.2,))
FAST = TrainConfig(lr=1e-2, max_epochs=3)


# ---------------------------------------------------------------- mse


def test_mse_examples():
    assert mse([1, 2, 3], [1, 2, 3]) == 0.0
    assert mse([1, 2], [2, 4]) == 2.5


def test_mse_matches_two_pass_reference():
    rng = np.random.default_rng(0)
    p, t = rng.normal(3, 1, 10_000), rng.normal(3, 1, 10_000)
    total = 0.0
    for a, b in zip(p.tolist(), t.tolist()):
        total += (a - b) ** 2
    assert mse(p, t) == pytest.approx(total / len(p), abs=1e-12)


def test_mse_rejects_bad_input():
    with pytest.raises(ValueError, match="mismatch"):
        mse([1, 2], [1])
    with pytest.raises(ValueError, match="empty"):
        mse([], [])


# ---------------------------------------------------------------- HR@1


def _ranking_split(n_users: int, n_neg: int = 5, extra: int = 0, unique_max: bool = True) -> SplitDataset:
    """Every user has one 5-star test item and ``n_neg`` lower-rated ones; all rows are test rows."""
    rows = []
    for u in range(n_users):
        rows.append((f"u{u}", "top", 5.0))
        for j in range(n_neg + extra):
            r = 1.0 + (j % 4) if unique_max else 4.0
            rows.append((f"u{u}", f"n{j}", r))
    d = make_dataset(rows)
    return SplitDataset(d, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.arange(len(d)), 0)


def test_hr1_uniform_random_scorer_is_one_sixth():
    s = _ranking_split(20_000)
    rng = np.random.default_rng(1)
    hr = hit_rate_at_1(lambda u, i: rng.random(len(u)), s, seed=0)
    assert hr.eligible >= 20_000
    assert 0.156 <= hr.value <= 0.177


def test_hr1_oracle_scorer_scores_one():
    s = _ranking_split(300, extra=3)
    truth = {(u, i): r for u, i, r in zip(*s.arrays("test"))}
    hr = hit_rate_at_1(lambda us, is_: np.array([truth[(u, i)] for u, i in zip(us, is_)]), s, seed=4)
    assert hr.value == 1.0
    assert hr.eligible == 300


def test_hr1_constant_scorer_scores_zero():
    s = _ranking_split(300)
    assert hit_rate_at_1(lambda u, i: np.full(len(u), 3.0), s).value == 0.0


def test_hr1_without_eligible_users_is_not_applicable():
    s = _ranking_split(50, n_neg=4)
    hr = hit_rate_at_1(lambda u, i: np.zeros(len(u)), s)
    assert not hr.applicable
    assert hr.value is None and hr.eligible == 0 and hr.skipped == 50


def test_hr1_matches_loop_oracle():
    s = _ranking_split(500, extra=4)
    rng = np.random.default_rng(3)
    table = {}

    def scorer(us, is_):
        out = []
        for u, i in zip(us.tolist(), is_.tolist()):
            # coarse scores so ties happen
            table.setdefault((u, i), float(rng.integers(0, 4)))
            out.append(table[(u, i)])
        return np.array(out)

    captured = {}

    def recording(us, is_):
        sc = scorer(us, is_)
        captured["scores"] = sc.reshape(-1, 6)
        return sc

    hr = hit_rate_at_1(recording, s, seed=2)
    sc = captured["scores"]
    assert hr.value == pytest.approx(hr1_loop(sc[:, 0], sc[:, 1:]), abs=0)


def test_hr1_is_seeded():
    s = _ranking_split(400, extra=5)
    rng = np.random.default_rng(0)
    fixed = {}

    def scorer(us, is_):
        return np.array([fixed.setdefault((u, i), rng.random()) for u, i in zip(us.tolist(), is_.tolist())])

    assert hit_rate_at_1(scorer, s, seed=9) == hit_rate_at_1(scorer, s, seed=9)


# ---------------------------------------------------------------- buckets


def test_frequency_buckets_partition_the_axis():
    for top in (0, 1, 2, 3, 4, 5, 9, 16, 17, 100, 1000):
        b = frequency_buckets(top)
        assert b[0] == (0, 0)
        assert b[-1][0] <= top <= b[-1][1] or top == 0
        for (lo1, hi1), (lo2, _) in zip(b, b[1:]):
            assert lo2 == hi1 + 1
    assert frequency_buckets(20)[:6] == [(0, 0), (1, 1), (2, 2), (3, 4), (5, 8), (9, 16)]


def test_self_comparison_gives_zero_improvement(small_text):
    _, s = small_text
    res = train("bias", s, None, FAST)
    rep = evaluate(res.model, s, hr_seed=None)
    buckets = bucket_improvement(rep, rep, s)
    assert all(b.improvement == 0.0 for b in buckets if b.n_test)
    _, items, _ = s.arrays("test")
    assert sum(b.n_items for b in buckets) == len(np.unique(items))
    assert sum(b.n_test for b in buckets) == len(items)


def test_improvement_confined_to_bucket_where_model_is_exact(small_text):
    _, s = small_text
    d = s.dataset
    _, items, truth = s.arrays("test")
    freq = np.bincount(d.items[s.train], minlength=d.n_items)[items]
    assert (freq == 0).any()
    base = np.full(len(truth), 3.0)
    exact_on_cold = np.where(freq == 0, truth, base)
    buckets = bucket_improvement(exact_on_cold, base, s)
    for b in buckets:
        if b.lo == 0:
            assert b.improvement > 0
        elif b.n_test:
            assert b.improvement == 0.0
        else:
            assert math.isnan(b.improvement)


def test_bucket_improvement_needs_matching_reports(small_text):
    _, s = small_text
    with pytest.raises(ValueError, match="same test"):
        bucket_improvement(np.zeros(3), np.zeros(3), s)


# ---------------------------------------------------------------- sweeps


def _ring_with_pendants():
    """Bipartite 16-cycle (2-core) plus pendant items, so the 3-core is empty."""
    rows = []
    for u in range(8):
        rows.append((f"u{u}", f"i{u}", 1 + u % 5))
        rows.append((f"u{u}", f"i{(u + 1) % 8}", 1 + (u + 2) % 5))
    for u in range(4):
        rows.append((f"u{u}", f"p{u}", 3.0))
    return make_dataset(rows)


def test_density_sweep_stops_at_empty_core():
    d = _ring_with_pendants()
    assert len(k_core(d, 3)) == 0 and len(k_core(d, 2)) > 0
    res = density_sweep(d, ["bias"], ONE_POINT, base=FAST)
    assert res.values == [0, 1, 2]
    for a, b in zip(res.points, res.points[1:]):
        assert all(y <= x for x, y in zip(a.stats, b.stats))
    assert all("bias" in p.reports for p in res.points)


def test_density_sweep_without_retune_reuses_first_choice(small_text):
    p, _ = small_text
    grid = Grid((2, 4), (1e-6,), (0.2,))
    res = density_sweep(p.dataset, ["mf"], grid, base=FAST, retune=False, k_max=2)
    chosen = {pt.reports["mf"].cfg.latent_dim for pt in res.points}
    assert len(chosen) == 1


def test_mask_sweep_leaves_bias_model_unchanged(small_text):
    _, s = small_text
    res = mask_sweep(s, ["bias"], (0, 20, 40, 60, 80, 100), grid=ONE_POINT, base=FAST)
    values = [pt.reports["bias"].test_mse for pt in res.points]
    assert max(values) - min(values) < 1e-9
    assert [pt.stats.reviews for pt in res.points] == [len(s.dataset)] * 6


@pytest.mark.parametrize("xs", [(0, 0), (20, 10), (-1, 50), (50, 101)])
def test_mask_sweep_rejects_bad_axis(small_text, xs):
    _, s = small_text
    with pytest.raises(ValueError, match="strictly increasing"):
        mask_sweep(s, ["bias"], xs, grid=ONE_POINT, base=FAST)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(1, 5), min_size=1, max_size=50), st.floats(-3, 3))
def test_mse_shift_identity(values, shift):
    t = np.array(values)
    assert mse(t + shift, t) == pytest.approx(shift**2, rel=1e-9, abs=1e-12)
