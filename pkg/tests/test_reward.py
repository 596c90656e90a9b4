import math

import numpy as np
import pytest

from goalrank.nn import ScorerSpec
from goalrank.oracle import ConfigError, random_reward_spec
from goalrank.policy import FeatureStore
from goalrank.reward import (
    BiasSpec, FeedbackRecords, RewardModel, TrainingDiverged, VocabularyError, inject_bias, keyed_noise,
    predict_reward, simulate_feedback, train_reward_model,
)

N_ITEMS, L = 9, 3


def setup(seed=0, n_users=4):
    rng = np.random.default_rng(seed)
    store = FeatureStore(rng.normal(size=(n_users, 3)), rng.normal(size=(N_ITEMS, 2)))
    spec = ScorerSpec(4, (8,), "tanh", context_dim=3, item_feature_dim=2, n_items=N_ITEMS, list_length=L,
                      head="list_value")
    return spec, store


def random_records(seed, M, n_users=4, target=None):
    rng = np.random.default_rng(seed)
    users = rng.integers(0, n_users, M)
    lists = np.stack([rng.choice(N_ITEMS, L, replace=False) for _ in range(M)])
    y = rng.normal(size=M) if target is None else target(users, lists)
    return FeedbackRecords(users, lists, y)


# feedback simulation --------------------------------------------------------


def test_relevance_feedback_formula():
    truth = {0: (3, 5, 7)}
    full = simulate_feedback("relevance", [0], [[3, 5, 7]], truth=truth)
    assert full[0] == pytest.approx(sum(1 / math.log2(t + 1) for t in range(1, 4)))
    assert simulate_feedback("relevance", [0], [[0, 1, 2]], truth=truth)[0] == 0.0
    assert simulate_feedback("relevance", [0], [[0, 1, 7]], truth=truth)[0] == pytest.approx(0.5)


def test_oracle_feedback_noise_free_is_exact():
    world = random_reward_spec(3, N_ITEMS, L, seed=1)
    lists = np.array([[0, 1, 2], [8, 4, 6]])
    got = simulate_feedback("oracle", [0, 2], lists, world=world)
    assert np.array_equal(got, world.rewards([0, 2], lists))
    noisy = simulate_feedback("oracle", [0, 2], lists, world=world, noise_scale=0.5, rng=np.random.default_rng(0))
    assert not np.array_equal(noisy, got)


def test_feedback_mode_errors():
    with pytest.raises(ConfigError):
        simulate_feedback("oracle", [0], [[0, 1, 2]])
    with pytest.raises(ConfigError):
        simulate_feedback("relevance", [0], [[0, 1, 2]])
    with pytest.raises(ConfigError):
        simulate_feedback("watch_time", [0], [[0, 1, 2]])


def test_records_reject_non_finite():
    with pytest.raises(ValueError):
        FeedbackRecords([0], [[0, 1, 2]], [np.nan])


# training -------------------------------------------------------------------


def test_constant_feedback_is_fit():
    spec, store = setup()
    rec = random_records(0, 40, target=lambda u, l: np.full(len(u), 2.75))
    model, curve = train_reward_model(rec, spec, store, epochs=100, seed=1, heldout_fraction=0.0)
    pred = model(rec.users, rec.lists)
    assert np.mean((pred - 2.75) ** 2) < 1e-4
    assert curve.rows[-1][1] < 1e-4


def test_single_record_is_memorised():
    spec, store = setup()
    rec = FeedbackRecords([1], [[4, 0, 7]], [-3.2])
    model, curve = train_reward_model(rec, spec, store, epochs=50, seed=0)
    assert curve.rows[-1][1] < 1e-8
    assert math.isnan(curve.rows[-1][2])


def test_small_set_is_memorised():
    spec, store = setup()
    rec = random_records(3, 5)
    model, curve = train_reward_model(rec, spec, store, epochs=1500, step_size=0.03, seed=0, heldout_fraction=0.0)
    assert curve.rows[-1][1] < 1e-3 * curve.rows[0][1]


def test_zero_epochs_curve_has_one_point():
    spec, store = setup()
    rec = random_records(1, 10)
    model, curve = train_reward_model(rec, spec, store, epochs=0, seed=2)
    assert len(curve.rows) == 1
    assert curve.to_csv().splitlines()[0] == "epoch,train_mse,heldout_mse"


def test_training_mse_non_increasing_and_reproducible():
    spec, store = setup()
    world = random_reward_spec(4, N_ITEMS, L, seed=0)
    rec = random_records(2, 200, target=world.rewards)
    _, c1 = train_reward_model(rec, spec, store, epochs=60, seed=4)
    _, c2 = train_reward_model(rec, spec, store, epochs=60, seed=4)
    tr = np.array([r[1] for r in c1.rows])
    assert np.all(np.diff(tr) <= 0)
    assert c1.rows == c2.rows
    assert tr[-1] < 0.5 * tr[0]


def test_training_argument_errors():
    spec, store = setup()
    with pytest.raises(ValueError):
        train_reward_model(FeedbackRecords([], np.zeros((0, L)), []), spec, store)
    per_item = ScorerSpec(4, (8,), context_dim=3, item_feature_dim=2, n_items=N_ITEMS, list_length=L)
    with pytest.raises(ConfigError):
        train_reward_model(random_records(0, 3), per_item, store)


def test_divergence_aborts_without_monotone_guard():
    spec, store = setup()
    rec = random_records(5, 30)
    with pytest.raises(TrainingDiverged):
        train_reward_model(rec, spec, store, epochs=50, step_size=1e4, seed=0, monotone=False)


# prediction -----------------------------------------------------------------


def _model(seed=0):
    spec, store = setup(seed)
    model, _ = train_reward_model(random_records(seed, 30), spec, store, epochs=5, seed=seed)
    return model


def test_prediction_deterministic_and_batched():
    m = _model()
    rec = random_records(9, 12)
    batch = predict_reward(m, rec.users, rec.lists)
    assert np.array_equal(batch, predict_reward(m, rec.users, rec.lists))
    single = [predict_reward(m, rec.users[i:i + 1], rec.lists[i:i + 1])[0] for i in range(12)]
    np.testing.assert_allclose(batch, single, rtol=1e-13, atol=1e-13)


def test_order_matters():
    m = _model(1)
    a = predict_reward(m, [0], [[1, 2, 3]])[0]
    b = predict_reward(m, [0], [[3, 2, 1]])[0]
    assert a != b


def test_unknown_item_is_vocabulary_error():
    with pytest.raises(VocabularyError):
        predict_reward(_model(), [0], [[0, 1, N_ITEMS]])


def test_save_load(tmp_path):
    m = _model(2)
    m.save(tmp_path / "r.npz")
    back = RewardModel.load(tmp_path / "r.npz", m.store)
    lists = np.array([[0, 1, 2]])
    assert np.array_equal(back([1], lists), m([1], lists))


# bias injection ---------------------------------------------------------------


def test_lambda_zero_is_identity():
    m = _model()
    f = inject_bias(m, BiasSpec(0.0, seed=3))
    rec = random_records(4, 20)
    assert np.array_equal(f(rec.users, rec.lists), m(rec.users, rec.lists))


def test_lambda_one_is_base_free_noise():
    rec = random_records(7, 10_000)
    f1 = inject_bias(lambda u, l: np.full(len(u), 50.0), BiasSpec(1.0, seed=5))
    f2 = inject_bias(lambda u, l: np.full(len(u), -9.0), BiasSpec(1.0, seed=5))
    a = f1(rec.users, rec.lists)
    assert np.array_equal(a, f2(rec.users, rec.lists))
    # duplicate (user, list) keys make some draws repeat; the standard error below counts only distinct keys
    keys = {(int(u), tuple(r)) for u, r in zip(rec.users, rec.lists.tolist())}
    assert abs(a.mean()) < 3 * a.std() / math.sqrt(len(keys))


def test_biased_value_is_stable_and_mixed():
    base = lambda u, l: np.asarray(l, float).sum(axis=1)  # noqa: E731
    f = inject_bias(base, BiasSpec(0.3, seed=1))
    lists = np.array([[0, 1, 2], [2, 1, 0]])
    a, b = f([0, 0], lists), f([0, 0], lists)
    assert np.array_equal(a, b)
    eps = keyed_noise(1, [0, 0], lists)
    np.testing.assert_allclose(a, 0.7 * base(None, lists) + 0.3 * eps, atol=1e-12)
    assert eps[0] != eps[1]


@pytest.mark.parametrize("lam", [-0.1, 1.5, float("nan")])
def test_bias_level_range(lam):
    with pytest.raises(ConfigError):
        BiasSpec(lam)
