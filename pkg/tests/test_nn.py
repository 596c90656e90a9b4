import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from goalrank.nn import (
    ContractError, ScorerSpec, ShapeError, Tensor, backward, build_layout, capacity, forward_scores, grad,
    init_scorer, list_value, load_checkpoint, make_optimizer, save_checkpoint, step, step_logits,
)
from goalrank.nn import autodiff as ad
from goalrank.nn.gradcheck import central_differences, relative_error


def small_spec(widths=(5,), act="relu", head="per_item_score", L=3):
    return ScorerSpec(4, tuple(widths), act, context_dim=3, item_feature_dim=2, n_items=10, list_length=L, head=head)


# init / capacity ----------------------------------------------------------


def test_init_is_deterministic_and_seed_sensitive():
    spec = small_spec()
    a, b, c = init_scorer(spec, 1), init_scorer(spec, 1), init_scorer(spec, 2)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_biases_start_at_zero_and_weights_scale_with_fan_in():
    spec = ScorerSpec(8, (400,), context_dim=50, n_items=300, list_length=2)
    pv = init_scorer(spec, 0)
    for e in pv.layout.entries:
        vals = pv.named(e.name)
        if e.is_bias:
            assert np.all(vals == 0.0)
        elif vals.size > 2000:
            assert np.std(vals) == pytest.approx(1 / np.sqrt(e.fan_in), rel=0.1)


def test_layout_covers_vector_once():
    layout = build_layout(small_spec((4, 3)))
    starts = sorted((e.start, e.size) for e in layout.entries)
    pos = 0
    for s, n in starts:
        assert s == pos
        pos += n
    assert pos == layout.size


@pytest.mark.parametrize("widths,expected", [((64, 64), (64, 2)), ((16,), (16, 1)), ((8, 128, 8), (128, 3))])
def test_capacity(widths, expected):
    assert capacity(ScorerSpec(4, widths, n_items=3)) == expected


def test_invalid_spec_rejected():
    with pytest.raises(ValueError):
        ScorerSpec(4, (), n_items=3)
    with pytest.raises(ValueError):
        ScorerSpec(4, (0,), n_items=3)
    with pytest.raises(ValueError):
        ScorerSpec(4, (3,), activation="gelu", n_items=3)


# forward ------------------------------------------------------------------


def test_zero_weights_give_zero_scores():
    spec = small_spec()
    pv = init_scorer(spec, 0)
    pv.values[:] = 0
    s = forward_scores(pv, spec, np.ones(3), np.arange(4), np.ones((4, 2)), np.zeros(4, dtype=bool))
    assert np.all(s == 0.0)


def test_identical_candidates_score_identically():
    spec = ScorerSpec(4, (6,), context_dim=3, item_feature_dim=2, n_items=0, list_length=2)
    pv = init_scorer(spec, 3)
    feats = np.array([[0.5, -1.0], [0.5, -1.0], [2.0, 0.1]])
    s = forward_scores(pv, spec, np.ones(3), np.arange(3), feats, np.zeros(3, dtype=bool))
    assert s[0] == s[1] and s[0] != s[2]


def test_masked_candidate_has_zero_probability():
    spec = small_spec()
    pv = init_scorer(spec, 0)
    chosen = np.array([False, True, False])
    s = forward_scores(pv, spec, np.ones(3), np.arange(3), np.ones((3, 2)), chosen)
    assert s[1] == -np.inf
    p = np.exp(ad.masked_log_softmax(s[None], chosen[None]).value[0])
    assert p[1] == 0.0 and p.sum() == pytest.approx(1.0, abs=1e-15)


def test_feature_mismatch_is_shape_error():
    spec = small_spec()
    pv = init_scorer(spec, 0)
    with pytest.raises(ShapeError):
        forward_scores(pv, spec, np.ones(4), np.arange(3), np.ones((3, 2)), np.zeros(3, dtype=bool))
    with pytest.raises(ShapeError):
        forward_scores(pv, spec, np.ones(3), np.arange(3), np.ones((3, 5)), np.zeros(3, dtype=bool))


def test_forward_is_deterministic():
    spec = small_spec((4, 4))
    pv = init_scorer(spec, 0)
    args = (np.ones(3), np.arange(5), np.arange(10).reshape(5, 2) / 10, np.zeros(5, dtype=bool))
    assert np.array_equal(forward_scores(pv, spec, *args), forward_scores(pv, spec, *args))


# backward -----------------------------------------------------------------


def test_constant_loss_has_zero_gradient():
    theta = Tensor(np.arange(4.0), requires_grad=True)
    assert np.all(grad(Tensor(3.0), theta) == 0)


def test_single_coordinate_loss_is_unit_vector():
    theta = Tensor(np.arange(5.0), requires_grad=True)
    g = backward(theta, ad.index(theta, 2))
    assert np.array_equal(g, np.eye(5)[2])


def test_non_scalar_loss_is_contract_error():
    theta = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        grad(ad.mul(theta, 2.0), theta)


def _random_inputs(rng, spec, U=2, P=4, N=5):
    ctx = rng.normal(size=(U, spec.context_dim))
    ids = np.stack([rng.choice(spec.n_items, N, replace=False) for _ in range(U)])
    feats = rng.normal(size=(U, N, spec.item_feature_dim))
    chosen = rng.random((U, P, N)) < 0.3
    chosen[..., 0] = False  # at least one open candidate per state
    stepi = rng.integers(0, spec.list_length, size=(U, P))
    return ctx, ids, feats, chosen, stepi


@pytest.mark.parametrize("seed", range(20))
def test_cross_entropy_gradient_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    widths = [(5,), (4, 3)][seed % 2]
    act = ["relu", "tanh"][(seed // 2) % 2]
    spec = small_spec(widths, act)
    pv = init_scorer(spec, seed)
    # zero biases can leave a dead first layer feeding a ReLU exactly at its kink, where
    # central differences see half the slope; jitter moves every unit off the kink
    pv.values += 0.05 * rng.normal(size=pv.values.size)
    ctx, ids, feats, chosen, stepi = _random_inputs(rng, spec)
    target = rng.random(chosen.shape) * ~chosen

    def loss_of(th):
        T = Tensor(th, requires_grad=True)
        lsm = ad.masked_log_softmax(step_logits(T, spec, pv.layout, ctx, ids, feats, chosen, stepi), chosen)
        safe = ad.index(lsm, ~chosen)
        return ad.mul(ad.tsum(ad.mul(safe, target[~chosen])), -1.0), T

    loss, T = loss_of(pv.values)
    ga = grad(loss, T)
    gn = central_differences(lambda th: float(loss_of(th)[0].value), pv.values, h=1e-5)
    assert relative_error(ga, gn) < 1e-6


@pytest.mark.parametrize("seed", range(4))
def test_list_value_mse_gradient(seed):
    rng = np.random.default_rng(100 + seed)
    spec = small_spec((4,) * (1 + seed % 2), ["relu", "tanh"][seed % 2], head="list_value")
    pv = init_scorer(spec, seed)
    ctx = rng.normal(size=(6, 3))
    ids = np.stack([rng.choice(10, 3, replace=False) for _ in range(6)])
    feats = rng.normal(size=(6, 3, 2))
    y = rng.normal(size=6)

    def loss_of(th):
        T = Tensor(th, requires_grad=True)
        pred = list_value(T, spec, pv.layout, ctx, ids, feats)
        return ad.mean(ad.square(ad.sub(pred, y))), T

    loss, T = loss_of(pv.values)
    gn = central_differences(lambda th: float(loss_of(th)[0].value), pv.values)
    assert relative_error(grad(loss, T), gn) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(2, 7))
def test_logsumexp_and_bce_gradients(seed, rows, cols):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(rows, cols)) * 3
    mask = rng.random((rows, cols)) < 0.3
    mask[:, 0] = False
    y = (rng.random((rows, cols)) < 0.5).astype(float)

    def f(th):
        T = Tensor(th.reshape(rows, cols), requires_grad=True)
        out = ad.add(ad.tsum(ad.logsumexp(T, axis=-1, mask=mask)), ad.tsum(ad.bce_with_logits(T, y)))
        return out, T

    out, T = f(x0.ravel())
    ga = grad(out, T).ravel()
    gn = central_differences(lambda th: float(f(th)[0].value), x0.ravel())
    assert relative_error(ga, gn) < 1e-6


def test_unused_parameters_get_exact_zero():
    theta = Tensor(np.ones(6), requires_grad=True)
    loss = ad.tsum(ad.flat_slice(theta, 1, (2,)))
    assert grad(loss, theta).tolist() == [0, 1, 1, 0, 0, 0]


# optimizers / checkpoints -------------------------------------------------


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_step_size_leaves_theta(kind):
    opt = make_optimizer(kind, 0.0, 4)
    th = np.arange(4.0)
    assert np.array_equal(step(opt, th, np.ones(4)), th)


def test_adam_minimises_quadratic():
    opt = make_optimizer("adam", 0.1, 2)
    th = np.array([3.0, -2.0])
    for _ in range(500):
        th = step(opt, th, 2 * th)
    assert np.abs(th).max() < 1e-2


def test_checkpoint_round_trip(tmp_path):
    spec = small_spec((6, 2))
    pv = init_scorer(spec, 7)
    save_checkpoint(tmp_path / "p.npz", pv, spec, {"note": "x"})
    back, spec2, extra = load_checkpoint(tmp_path / "p.npz")
    assert spec2 == spec and np.array_equal(back.values, pv.values) and extra["note"] == "x"
    assert back.seed == 7
    import json

    manifest = json.loads((tmp_path / "p.json").read_text())
    assert manifest["capacity"] == {"W": 6, "D": 2}
