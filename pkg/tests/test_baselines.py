import numpy as np
import pytest

from goalrank.baselines import (
    BaselineArtifact, ContractViolation, PointwiseConfig, jittered_widths, pointwise_labels, select_best_list,
    train_baseline, train_pointwise,
)
from goalrank.nn import ScorerSpec
from goalrank.oracle import ConfigError
from goalrank.policy import FeatureStore

N_ITEMS = 12


def value_fn(u, lists):
    """A deterministic stand-in evaluator: sum of item ids weighted by position."""
    lists = np.asarray(lists, float)
    return lists @ np.array([1.0, 0.5, 0.25])[: lists.shape[1]]


def setup(U=6, N=6, seed=0):
    rng = np.random.default_rng(seed)
    spec = ScorerSpec(4, (8,), "tanh", context_dim=3, item_feature_dim=2, n_items=N_ITEMS, list_length=3)
    store = FeatureStore(rng.normal(size=(U, 3)), rng.normal(size=(N_ITEMS, 2)))
    cands = np.stack([rng.choice(N_ITEMS, N, replace=False) for _ in range(U)])
    targets = {u: tuple(int(v) for v in cands[u, :2]) for u in range(U)}
    return spec, store, np.arange(U), cands, targets


# selection -------------------------------------------------------------------------


def test_single_proposal_returned():
    assert select_best_list(value_fn, 0, [[4, 1, 2]]) == (4, 1, 2)


def test_duplicate_best_first_wins():
    props = [[1, 2, 3], [9, 0, 1], [9, 0, 1]]
    assert select_best_list(value_fn, 0, props) == (9, 0, 1)
    tie = lambda u, l: np.zeros(len(l))  # noqa: E731
    assert select_best_list(tie, 0, props) == (1, 2, 3)


@pytest.mark.parametrize("seed", range(5))
def test_selection_matches_linear_scan(seed):
    rng = np.random.default_rng(seed)
    props = np.stack([rng.choice(20, 3, replace=False) for _ in range(10)])
    best, best_v = None, -np.inf
    for p in props:
        v = value_fn(None, p[None])[0]
        if v > best_v:
            best, best_v = tuple(int(x) for x in p), v
    assert select_best_list(value_fn, 0, props) == best


def test_empty_proposals_contract():
    with pytest.raises(ContractViolation):
        select_best_list(value_fn, 0, np.zeros((0, 3)))


# training ---------------------------------------------------------------------------


def test_labels_mark_targets():
    lab = pointwise_labels([0], np.array([[5, 3, 8]]), {0: (8, 5)})
    assert lab.tolist() == [[1.0, 0.0, 1.0]]


def test_pointwise_training_ranks_targets_first():
    spec, store, users, cands, targets = setup()
    pol = train_pointwise(spec, store, users, cands, pointwise_labels(users, cands, targets),
                          PointwiseConfig(epochs=300, batch_size=6, step_size=0.03))
    top = pol.decode(users, cands, 2)
    hits = sum(set(top[u].tolist()) == set(targets[u]) for u in users)
    assert hits >= 5


def test_width_jitter():
    assert jittered_widths((16,), 1) == [(16,)]
    assert jittered_widths((16,), 3) == [(16,), (12,), (20,)]


def test_g_e_single_proposal_is_generator_sample():
    spec, store, users, cands, targets = setup()
    art = train_baseline("g_e", spec, store, users, cands, targets, PointwiseConfig(epochs=3), evaluator=value_fn,
                         proposals=1)
    props = art.propose(users, cands, 3)
    assert props.shape == (6, 1, 3)
    assert np.array_equal(art.decode(users, cands, 3), props[:, 0])


def test_g_e_picks_evaluator_best_of_proposals():
    spec, store, users, cands, targets = setup()
    art = train_baseline("g_e", spec, store, users, cands, targets, PointwiseConfig(epochs=3), evaluator=value_fn,
                         proposals=5)
    props = art.propose(users, cands, 3)
    out = art.decode(users, cands, 3)
    for u in users:
        vals = value_fn(None, props[u])
        assert tuple(out[u]) == tuple(props[u][int(np.argmax(vals))])


def test_mg_e_with_one_generator_is_g_e():
    spec, store, users, cands, targets = setup()
    pc = PointwiseConfig(epochs=3, seed=4)
    a = train_baseline("g_e", spec, store, users, cands, targets, pc, evaluator=value_fn, proposals=4)
    b = train_baseline("mg_e", spec, store, users, cands, targets, pc, evaluator=value_fn, proposals=4, k=1)
    assert np.array_equal(a.decode(users, cands, 3), b.decode(users, cands, 3))


def test_mg_e_unions_generators():
    spec, store, users, cands, targets = setup()
    art = train_baseline("mg_e", spec, store, users, cands, targets, PointwiseConfig(epochs=2), evaluator=value_fn,
                         proposals=3, k=3)
    assert len(art.generators) == 3 and art.propose(users, cands, 3).shape == (6, 9, 3)
    assert [g.spec.hidden_widths for g in art.generators] == [(8,), (6,), (10,)]


def test_g_only_is_greedy_top_l():
    spec, store, users, cands, targets = setup()
    art = train_baseline("g_only", spec, store, users, cands, targets, PointwiseConfig(epochs=2))
    s = art.item_scores(users, cands)
    out = art.decode(users, cands, 3)
    for u in users:
        order = sorted(range(cands.shape[1]), key=lambda j: (-s[u, j], cands[u, j]))[:3]
        assert out[u].tolist() == cands[u, order].tolist()


@pytest.mark.parametrize("kwargs", [{"kind": "beam"}, {"kind": "mg_e", "k": 0}, {"kind": "g_e"},
                                    {"kind": "g_e", "evaluator": value_fn, "proposals": 0}])
def test_baseline_config_errors(kwargs):
    spec, store, users, cands, targets = setup()
    kind = kwargs.pop("kind")
    with pytest.raises(ConfigError):
        train_baseline(kind, spec, store, users, cands, targets, PointwiseConfig(epochs=1), **kwargs)


def test_artifact_sampling_is_keyed():
    spec, store, users, cands, targets = setup()
    art = train_baseline("g_e", spec, store, users, cands, targets, PointwiseConfig(epochs=1), evaluator=value_fn)
    assert isinstance(art, BaselineArtifact)
    a = art.propose(users, cands, 3)
    b = art.propose(users[::-1], cands[::-1], 3)[::-1]
    assert np.array_equal(a, b)
