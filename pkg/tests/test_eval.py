import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from goalrank.eval import (
    METRICS, MetricReport, auc, evaluate_lists, evaluate_policy, f1_at_l, hit_ratio_at_l, map_at_l, ndcg_at_l,
)


def brute_ap(rec, gt, L):
    """Average precision by explicit prefix counting, truncated at L."""
    gt = set(gt)
    total = 0.0
    for t in range(1, L + 1):
        if rec[t - 1] in gt:
            total += len([v for v in rec[:t] if v in gt]) / t
    return total / min(L, len(gt))


def pair_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    acc = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return acc / (len(pos) * len(neg))


# metric examples ----------------------------------------------------------------


def test_hit_ratio_examples():
    assert hit_ratio_at_l([3, 1, 2], (1, 2, 3)) == 1.0
    assert hit_ratio_at_l([4, 5], (1, 2)) == 0.0
    assert hit_ratio_at_l([1, 9, 3, 8, 5, 7], (1, 2, 3, 4, 5, 6)) == 0.5


def test_ndcg_examples():
    assert ndcg_at_l([1, 2, 3], (1, 2, 3), 3) == pytest.approx(1.0)
    assert ndcg_at_l([9, 1], (1,), 2) == pytest.approx(1 / math.log2(3))
    assert ndcg_at_l([9, 1], (1,), 2) == pytest.approx(0.6309, abs=1e-4)
    assert ndcg_at_l([7, 8], (1, 2), 2) == 0.0


def test_map_examples():
    assert map_at_l([1, 2, 3], (1, 2, 3), 3) == pytest.approx(1.0)
    assert map_at_l([7, 8, 1], (1,), 3) == pytest.approx(1 / 3)


@settings(max_examples=100, deadline=None)
@given(st.permutations(list(range(12))), st.sets(st.integers(0, 11), min_size=1, max_size=8), st.integers(1, 8))
def test_map_matches_brute_force(perm, gt, L):
    rec = list(perm)[:L]
    assert abs(map_at_l(rec, tuple(gt), L) - brute_ap(rec, gt, L)) < 1e-12


def test_f1_examples():
    assert f1_at_l([1, 2, 3], (3, 2, 1), 3) == 1.0
    assert f1_at_l([1, 2], (3, 4), 2) == 0.0
    assert f1_at_l([1, 2, 3, 7, 8, 9], (1, 2, 3, 4, 5, 6), 6) == pytest.approx(0.5)


def test_auc_examples():
    assert auc([3.0, 2.0, 1.0], [True, True, False]) == 1.0
    assert auc([1.0, 2.0, 3.0], [True, True, False]) == 0.0
    assert auc([1.0, 1.0], [True, False]) == 0.5


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_auc_matches_pair_counting(seed):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.normal(size=50), 1)  # rounding forces ties
    labels = rng.random(50) < 0.3
    if labels.all() or not labels.any():
        labels[0] = not labels[0]
    assert abs(auc(scores, labels) - pair_auc(scores, labels)) < 1e-12


def test_auc_needs_both_classes():
    with pytest.raises(ValueError):
        auc([1.0, 2.0], [True, True])


# invariants ----------------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.permutations(list(range(10))), st.sets(st.integers(0, 9), min_size=1, max_size=6), st.integers(0, 10**4))
def test_metrics_invariant_under_relabelling_and_bounded(perm, gt, seed):
    rec = list(perm)[:6]
    relabel = np.random.default_rng(seed).permutation(100)[:10]
    r2 = [int(relabel[v]) for v in rec]
    g2 = tuple(int(relabel[v]) for v in gt)
    gt = tuple(gt)
    for fn in (ndcg_at_l, map_at_l, f1_at_l):
        a = fn(rec, gt, 6)
        assert a == pytest.approx(fn(r2, g2, 6), abs=1e-15) and 0 <= a <= 1 + 1e-12
    assert hit_ratio_at_l(rec, gt) == hit_ratio_at_l(r2, g2)


@settings(max_examples=50, deadline=None)
@given(st.permutations(list(range(8))), st.sets(st.integers(0, 7), min_size=1, max_size=5))
def test_moving_relevant_later_never_helps(perm, gt):
    rec = list(perm)[:6]
    gt = tuple(gt)
    for i in range(5):
        if rec[i] in gt and rec[i + 1] not in gt:
            later = rec.copy()
            later[i], later[i + 1] = later[i + 1], later[i]
            assert ndcg_at_l(later, gt, 6) <= ndcg_at_l(rec, gt, 6) + 1e-15
            assert map_at_l(later, gt, 6) <= map_at_l(rec, gt, 6) + 1e-15
            assert hit_ratio_at_l(later, gt) == hit_ratio_at_l(rec, gt)
            assert f1_at_l(later, gt, 6) == f1_at_l(rec, gt, 6)


# policy evaluation ------------------------------------------------------------------


def test_ground_truth_oracle_scores_one():
    truth = {0: (4, 2, 9), 1: (1, 5, 3)}
    cands = np.array([[4, 2, 9, 7, 8], [1, 5, 3, 0, 6]])
    rep = evaluate_policy(lambda u, c, L: c[:, :L], [0, 1], cands, truth, 3,
                          score=lambda u, c: np.tile([3.0, 2.0, 1.0, 0.0, 0.0], (len(u), 1)))
    for m in METRICS:
        assert rep.value(m) == pytest.approx(1.0)


def test_random_policy_auc_is_half():
    rng = np.random.default_rng(0)
    U, N = 4000, 20
    cands = np.tile(np.arange(N), (U, 1))
    truth = {u: tuple(int(v) for v in rng.choice(N, 3, replace=False)) for u in range(U)}
    rep = evaluate_policy(lambda u, c, L: c[:, :L], np.arange(U), cands, truth, 3,
                          score=lambda u, c: rng.random(c.shape))
    vals = np.array(list(rep.per_user["auc"].values()))
    assert abs(vals.mean() - 0.5) < 3 * vals.std() / math.sqrt(len(vals))


def test_evaluation_deterministic_and_excludes_single_class():
    truth = {0: (1, 2), 1: (0, 1, 2, 3)}
    cands = np.array([[0, 1, 2, 3], [0, 1, 2, 3]])
    run = lambda: evaluate_policy(lambda u, c, L: c[:, :L], [0, 1, 5], cands[[0, 1, 0]], truth, 2,  # noqa: E731
                                  score=lambda u, c: -np.asarray(c, float))
    a, b = run(), run()
    assert a.to_json(True) == b.to_json(True)
    assert a.n_users("hit") == 2 and a.n_users("auc") == 1 and a.auc_excluded == 1
    assert a.value("hit") == pytest.approx(np.mean(list(a.per_user["hit"].values())), abs=1e-12)


def test_report_serialisation(tmp_path):
    rep = evaluate_lists([0], np.array([[1, 2]]), np.array([[1, 2, 3]]), np.array([[1.0, 0.5, 0.0]]),
                         {0: (2, 3)}, 2, {"model": "x"})
    rep.write(tmp_path / "m.csv", tmp_path / "m.json", per_user=True)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "metric,value,n_users"
    back = MetricReport.from_json((tmp_path / "m.json").read_text())
    assert back.per_user == rep.per_user and back.config == {"model": "x"}


def test_summary_only_json_round_trip():
    rep = evaluate_lists([0, 1], np.array([[1, 2], [3, 4]]), np.array([[1, 2, 3], [3, 4, 5]]),
                         np.array([[1.0, 0.5, 0.0], [0.2, 0.1, 0.9]]), {0: (2, 3), 1: (5,)}, 2)
    back = MetricReport.from_json(rep.to_json())
    assert back.summary() == rep.summary()
    assert [back.n_users(m) for m in METRICS] == [rep.n_users(m) for m in METRICS]
    assert back.to_json() == rep.to_json()
