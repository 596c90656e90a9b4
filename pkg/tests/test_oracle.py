import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from goalrank.oracle import (
    ApproximationReport, ConfigError, SyntheticRewardSpec, boltzmann_policy, boltzmann_probs, entropy_objective,
    kl_divergence, kl_rows, optimize_mixture_weights, random_reward_spec, synth_reward,
)
from goalrank.policy import DensePolicy, enumerate_list_space, mix


def dense(space, seed, alpha=1.0):
    p = np.random.default_rng(seed).dirichlet(np.full(len(space), alpha))
    return DensePolicy(space, p)


def naive_reward(spec, user, items):
    x = spec.contexts[user]
    total = 0.0
    for t, v in enumerate(items):
        total += spec.position_weights[t] * (spec.base_utility[v] + spec.context_scale * float(x @ spec.item_features[v]))
    for s in range(len(items)):
        for t in range(s + 1, len(items)):
            total += spec.interaction[items[s], items[t]]
    return total


# synthetic reward -----------------------------------------------------------


def test_zero_interaction_uniform_weights_is_order_free():
    spec = random_reward_spec(2, 6, 3, seed=1, position_weights=[1, 1, 1])
    spec = SyntheticRewardSpec(1, spec.base_utility, spec.item_features, spec.contexts, spec.position_weights,
                               np.zeros((6, 6)))
    a = synth_reward(spec, 0, [0, 3, 5])
    assert a == pytest.approx(synth_reward(spec, 0, [5, 0, 3]), abs=1e-12)
    assert a == pytest.approx(spec.utility[0, [0, 3, 5]].sum(), abs=1e-12)


def test_swap_changes_only_through_weights_and_interactions():
    spec = random_reward_spec(1, 6, 2, seed=2)
    u = spec.utility[0]
    w = spec.position_weights
    d = synth_reward(spec, 0, [1, 4]) - synth_reward(spec, 0, [4, 1])
    assert d == pytest.approx((w[0] - w[1]) * (u[1] - u[4]), abs=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_reward_matches_naive_double_loop(seed):
    spec = random_reward_spec(3, 6, 3, seed=seed, interaction_density=0.5)
    sp = enumerate_list_space(6, 3)
    users = np.repeat(np.arange(3), len(sp))
    lists = np.tile(sp.lists, (3, 1))
    got = spec.rewards(users, lists)
    ref = [naive_reward(spec, u, l) for u, l in zip(users, lists.tolist())]
    np.testing.assert_allclose(got, ref, atol=1e-12, rtol=0)


def test_reward_spec_validation():
    spec = random_reward_spec(1, 4, 2, seed=0)
    bad = spec.interaction.copy()
    bad[0, 1] += 1
    with pytest.raises(ValueError):
        SyntheticRewardSpec(0, spec.base_utility, spec.item_features, spec.contexts, spec.position_weights, bad)
    with pytest.raises(ValueError):
        synth_reward(spec, 0, [0, 1, 2])


def test_reward_spec_round_trip():
    spec = random_reward_spec(2, 5, 2, seed=3)
    back = SyntheticRewardSpec.from_dict(spec.to_dict())
    lists = np.array([[0, 1], [4, 2]])
    assert np.array_equal(back.rewards([0, 1], lists), spec.rewards([0, 1], lists))


# Boltzmann ------------------------------------------------------------------


def test_boltzmann_ln2_example():
    sp = enumerate_list_space(2, 1)
    pol = boltzmann_policy(sp, [0.0, math.log(2)], 1.0)
    np.testing.assert_allclose(pol.dense.probs, [1 / 3, 2 / 3], atol=1e-15)
    assert pol.log_Z == pytest.approx(math.log(3), abs=1e-12)


def test_constant_rewards_uniform_and_huge_tau():
    p, _ = boltzmann_probs(np.full(7, 2.5), 0.3)
    np.testing.assert_allclose(p, 1 / 7, atol=1e-15)
    r = np.random.default_rng(0).random(50)
    p, _ = boltzmann_probs(r, 1e6)
    assert np.max(np.abs(p - 1 / 50)) < 1e-6
    assert abs(p.sum() - 1) < 1e-12


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_non_positive_tau_is_config_error(tau):
    with pytest.raises(ConfigError):
        boltzmann_probs(np.zeros(3), tau)


def test_large_rewards_stay_finite():
    p, lz = boltzmann_probs(np.array([1000.0, 999.0]), 1.0)
    assert np.all(np.isfinite(p)) and np.isfinite(lz)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.05, 5.0))
def test_boltzmann_order_matches_reward_order(seed, tau):
    r = np.random.default_rng(seed).normal(size=12)
    p, _ = boltzmann_probs(r, tau)
    i, j = np.argsort(r)[-1], np.argsort(r)[0]
    assert p[i] > p[j]
    assert np.array_equal(np.argsort(r, kind="stable"), np.argsort(p, kind="stable"))


# entropy-regularised objective ----------------------------------------------


def _instance(seed=0):
    spec = random_reward_spec(1, 5, 2, seed=seed)
    sp = enumerate_list_space(5, 2)
    r = spec.rewards(np.zeros(len(sp), dtype=np.int64), sp.lists)
    return sp, r


def test_deterministic_policy_value_is_reward():
    sp, r = _instance()
    probs = np.zeros(len(sp))
    probs[4] = 1
    assert entropy_objective(DensePolicy(sp, probs), r, 0.7) == r[4]


@pytest.mark.parametrize("tau", [0.2, 1.0, 3.0])
def test_optimum_value_is_tau_log_z(tau):
    sp, r = _instance(1)
    pol = boltzmann_policy(sp, r, tau)
    top = entropy_objective(pol.dense, r, tau)
    assert top == pytest.approx(tau * pol.log_Z, abs=1e-9)
    for s in range(20):
        q = dense(sp, s, alpha=0.5)
        assert entropy_objective(q, r, tau) < tau * pol.log_Z
        # the gap is exactly tau * KL(q || pi*)
        assert tau * pol.log_Z - entropy_objective(q, r, tau) == pytest.approx(tau * kl_divergence(q, pol.dense),
                                                                               abs=1e-9)


# KL ---------------------------------------------------------------------------


def test_kl_examples():
    sp = enumerate_list_space(2, 1)
    p = DensePolicy(sp, [0.5, 0.5])
    q = DensePolicy(sp, [0.75, 0.25])
    assert kl_divergence(p, p) == 0.0
    expected = 0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25)
    assert kl_divergence(p, q) == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(0.1438, abs=1e-4)


def test_kl_infinite_sentinel_and_opt_in_smoothing():
    sp = enumerate_list_space(2, 1)
    p = DensePolicy(sp, [0.5, 0.5])
    q = DensePolicy(sp, [1.0, 0.0])
    assert kl_divergence(p, q) == math.inf
    assert np.isfinite(kl_divergence(p, q, eps=1e-6))
    assert kl_divergence(q, p) == pytest.approx(math.log(2))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_kl_is_convex_in_mixture_weight(seed):
    sp = enumerate_list_space(5, 2)
    rng = np.random.default_rng(seed)
    target, a, b = dense(sp, seed), dense(sp, seed + 1), dense(sp, seed + 2)

    def f(w):
        return kl_divergence(target, mix([a, b], [w, 1.0 - w]))

    x, y = sorted(rng.random(2))
    lam = rng.random()
    assert f(lam * x + (1 - lam) * y) <= lam * f(x) + (1 - lam) * f(y) + 1e-12


# mixture weights --------------------------------------------------------------


def test_single_component_weight_one():
    sp = enumerate_list_space(5, 2)
    t, c = dense(sp, 0), dense(sp, 1)
    fit = optimize_mixture_weights([c], t)
    assert fit.weights.tolist() == [1.0]
    assert fit.kl == pytest.approx(kl_divergence(t, c), abs=1e-14)


def test_component_equal_to_target_wins():
    sp = enumerate_list_space(5, 2)
    t = dense(sp, 0)
    fit = optimize_mixture_weights([dense(sp, 1), t, dense(sp, 2)], t)
    assert fit.kl < 1e-8 and fit.weights[1] > 0.99


@pytest.mark.parametrize("seed", range(3))
def test_two_components_match_grid_search(seed):
    sp = enumerate_list_space(5, 2)
    assert len(sp) == 20
    t, a, b = dense(sp, 10 * seed), dense(sp, 10 * seed + 1), dense(sp, 10 * seed + 2)
    grid = np.linspace(0, 1, 10_001)
    best = min(kl_rows(t.probs, w * a.probs + (1 - w) * b.probs) for w in grid)
    fit = optimize_mixture_weights([a, b], t)
    assert abs(fit.kl - best) < 1e-4
    assert fit.kl <= best + 1e-12
    assert fit.converged


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 5))
def test_mixture_never_worse_than_any_vertex(seed, k):
    sp = enumerate_list_space(4, 2)
    t = dense(sp, seed)
    comps = [dense(sp, seed + 1 + i) for i in range(k)]
    fit = optimize_mixture_weights(comps, t)
    assert abs(fit.weights.sum() - 1) < 1e-12 and np.all(fit.weights >= 0)
    assert fit.kl <= min(kl_divergence(t, c) for c in comps) + 1e-12


def test_uncovered_target_reports_infinity():
    sp = enumerate_list_space(2, 1)
    fit = optimize_mixture_weights([DensePolicy(sp, [1.0, 0.0])], DensePolicy(sp, [0.5, 0.5]))
    assert fit.infinite and fit.kl == math.inf


def test_non_convergence_is_flagged(caplog):
    sp = enumerate_list_space(5, 2)
    fit = optimize_mixture_weights([dense(sp, 1), dense(sp, 2), dense(sp, 3)], dense(sp, 0), max_iters=1, tol=0)
    assert not fit.converged and fit.iterations == 1
    assert "not converged" in caplog.text


def test_multi_user_weights_shared():
    sp = enumerate_list_space(4, 1)
    t = np.stack([dense(sp, 0).probs, dense(sp, 1).probs])
    comps = np.stack([t, t[::-1]])  # component 0 is exact for both users
    fit = optimize_mixture_weights(comps, t)
    assert fit.weights[0] > 0.99 and fit.kl < 1e-8


# reports ----------------------------------------------------------------------


def test_report_rejects_negative_and_writes(tmp_path):
    rep = ApproximationReport()
    with pytest.raises(ValueError):
        rep.add("single", 1, 16, 1, 0, -0.1)
    for s, v in enumerate([0.3, 0.1, 0.2]):
        rep.add("single", 1, 16, 1, s, v)
    rep.write(tmp_path / "r.csv", tmp_path / "r.json")
    assert rep.summary()["groups"][0]["median"] == pytest.approx(0.2)
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "family,k,W,D,seed,n,kl"
