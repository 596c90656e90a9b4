import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from goalrank.data import (
    InteractionTable, ParseError, SchemaError, apply_k_core, extract_ground_truth, ingest_interactions,
    last_distinct, positive_only, read_split, temporal_split, write_split,
)

HEADER = "user_id,item_id,timestamp,feedback\n"


def table_from_rows(rows):
    return ingest_interactions(HEADER + "".join(f"{u},{i},{t},{f}\n" for u, i, t, f in rows))


def test_header_only_gives_empty_table():
    t = ingest_interactions(HEADER)
    assert len(t) == 0 and t.n_users == 0 and t.n_items == 0


def test_three_distinct_users_are_reindexed_in_order():
    t = ingest_interactions(HEADER + "u9,a,1,1.0\nu1,b,2,0.5\nu5,a,3,0.2\n")
    assert len(t) == 3
    assert t.user_ids == ["u1", "u5", "u9"]
    assert t.users.tolist() == [2, 0, 1]
    assert sorted(set(t.users.tolist())) == [0, 1, 2]


def test_numeric_ids_sort_numerically():
    t = ingest_interactions(HEADER + "10,1,1,1\n9,2,1,1\n")
    assert t.user_ids == ["9", "10"]


def test_non_numeric_timestamp_names_line():
    with pytest.raises(ParseError) as err:
        ingest_interactions(HEADER + "1,1,5,0.1\n1,2,yesterday,0.3\n")
    assert err.value.line == 3
    assert "3" in str(err.value)


def test_wrong_field_count_is_positioned():
    with pytest.raises(ParseError) as err:
        ingest_interactions(HEADER + "1,1,5\n")
    assert err.value.line == 2


def test_missing_column_is_schema_error():
    with pytest.raises(SchemaError):
        ingest_interactions("user_id,item_id,feedback\n1,2,0.5\n")


def test_schema_maps_column_names():
    t = ingest_interactions("uid,iid,ts,r\n1,2,3,0.5\n", {"user_id": "uid", "item_id": "iid", "timestamp": "ts",
                                                          "feedback": "r"})
    assert len(t) == 1 and t.timestamps.tolist() == [3]


def test_ingest_accepts_bytes_and_file_objects():
    text = HEADER + "1,2,3,0.5\n"
    a = ingest_interactions(text.encode())
    b = ingest_interactions(io.BytesIO(text.encode()))
    assert a.equals(b)


def test_non_finite_feedback_rejected():
    with pytest.raises(ParseError):
        ingest_interactions(HEADER + "1,2,3,nan\n")


def test_positive_only_is_strict():
    t = table_from_rows([(0, 0, 1, 0.85), (0, 1, 2, 0.9)])
    assert positive_only(t, 0.85).items.tolist() == [1]


# k-core -------------------------------------------------------------------


def brute_k_core(pairs, k):
    """Remove any record whose user or item is under-supported, until nothing changes."""
    cur = list(pairs)
    while True:
        us = {}
        its = {}
        for u, i in cur:
            us[u] = us.get(u, 0) + 1
            its[i] = its.get(i, 0) + 1
        nxt = [(u, i) for u, i in cur if us[u] >= k and its[i] >= k]
        if len(nxt) == len(cur):
            return sorted(nxt)
        cur = nxt


def test_k_core_one_keeps_everything():
    t = table_from_rows([(0, 0, 1, 1), (1, 1, 1, 1)])
    assert len(apply_k_core(t, 1)) == 2


def test_k_core_prunes_to_fixed_point():
    # user 2 has one record; removing it leaves item 1 with one record, which cascades
    rows = [(0, 0, 1, 1), (0, 1, 2, 1), (1, 0, 3, 1), (1, 2, 4, 1), (2, 1, 5, 1), (0, 2, 6, 1)]
    t = apply_k_core(table_from_rows(rows), 2)
    got = sorted(zip(t.users.tolist(), t.items.tolist()))
    assert got == brute_k_core([(r[0], r[1]) for r in rows], 2)


def test_k_core_rejects_zero():
    with pytest.raises(ValueError):
        apply_k_core(table_from_rows([(0, 0, 1, 1)]), 0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=0, max_size=60), st.integers(1, 4))
def test_k_core_matches_brute_force(pairs, k):
    rows = [(u, i, n, 1.0) for n, (u, i) in enumerate(pairs)]
    t = apply_k_core(table_from_rows(rows), k) if rows else None
    got = sorted((int(t.user_ids[u]), int(t.item_ids[i])) for u, i in zip(t.users, t.items)) if rows else []
    assert got == [tuple(p) for p in brute_k_core(pairs, k)]
    if got:
        us, its = np.unique([g[0] for g in got], return_counts=True), np.unique([g[1] for g in got],
                                                                                return_counts=True)
        assert us[1].min() >= k and its[1].min() >= k


# temporal split -----------------------------------------------------------


def test_split_ten_records_eight_two():
    rows = [(0, i, 100 + i, 1.0) for i in range(10)]
    sp = temporal_split(table_from_rows(rows), 0.8)
    assert len(sp.train) == 8 and len(sp.test) == 2
    assert sp.train.timestamps.max() <= sp.test.timestamps.min()


def test_split_excludes_user_without_test_side():
    rows = [(0, 0, 1, 1.0)] + [(1, i, i, 1.0) for i in range(5)]
    sp = temporal_split(table_from_rows(rows), 0.8)
    assert sp.excluded_users == [0]
    assert 0 not in set(sp.test.users.tolist())


def test_split_tie_break_on_item_id():
    rows = [(0, 3, 5, 1.0), (0, 1, 5, 1.0), (0, 2, 5, 1.0), (0, 0, 9, 1.0)]
    sp = temporal_split(table_from_rows(rows), 0.5)
    assert sorted(sp.train.items.tolist()) == [1, 2]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 9), st.integers(0, 50)), min_size=1, max_size=50),
       st.floats(0.05, 0.95))
def test_split_train_precedes_test_per_user(rows, ratio):
    t = table_from_rows([(u, i, ts, 1.0) for u, i, ts in rows])
    sp = temporal_split(t, ratio)
    assert len(sp.train) + len(sp.test) == len(t)
    for u in set(sp.test.users.tolist()):
        tr = sp.train.timestamps[sp.train.users == u]
        te = sp.test.timestamps[sp.test.users == u]
        if len(tr):
            assert tr.max() <= te.min()


# ground truth -------------------------------------------------------------


def test_last_distinct_skips_repeats():
    assert last_distinct([1, 2, 3, 2, 4, 4], 3) == (3, 2, 4)
    assert last_distinct([1, 1], 2) is None


def test_ground_truth_is_final_items_of_sequence():
    rows = [(0, i, i, 1.0) for i in range(10)]
    sp = temporal_split(table_from_rows(rows), 0.8)
    gt = extract_ground_truth(sp, 2)
    assert gt == {0: (8, 9)}
    assert sp.train_targets == {0: (6, 7)}


def test_ground_truth_excludes_short_users():
    rows = [(0, 1, 1, 1.0), (0, 1, 2, 1.0), (0, 1, 3, 1.0), (0, 1, 4, 1.0)]
    sp = temporal_split(table_from_rows(rows), 0.5)
    assert extract_ground_truth(sp, 2) == {}
    assert sp.gt_excluded == [0]


def test_split_round_trip(tmp_path):
    rows = [(u, (u + i) % 7, i, 0.9) for u in range(4) for i in range(6)]
    sp = temporal_split(table_from_rows(rows), 0.8)
    extract_ground_truth(sp, 1)
    write_split(sp, tmp_path, 1)
    back, L = read_split(tmp_path)
    assert L == 1
    assert back.train.equals(sp.train) and back.test.equals(sp.test)
    assert back.ground_truth == sp.ground_truth and back.train_targets == sp.train_targets


def test_table_rejects_negative_timestamp():
    with pytest.raises(ValueError):
        InteractionTable([0], [0], [-1], [0.0], ["a"], ["b"])
