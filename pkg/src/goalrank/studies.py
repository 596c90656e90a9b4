"""Capacity studies on enumerable instances and GoalRank ablations on the fixture pipeline.

The capacity studies distil the Boltzmann policy of a synthetic reward
directly into scorers of a given width, using the full enumerated list space,
and report ``KL(target || policy)`` averaged over users:

* ``oracle_study``: ``k`` small generators of width ``alpha`` combined with
  convex mixture weights (shared across users) against a single generator of
  width ``k * alpha + n`` for each ``n`` in a ladder, optionally also a depth
  ladder at fixed width.
* ``scaling_study``: single generators along a width ladder.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .config import ExperimentConfig
from .eval import METRICS
from .nn import autodiff as ad
from .nn.optim import make_optimizer, step as optimizer_step
from .nn.scorer import ScorerSpec, init_scorer
from .oracle import ApproximationReport, ConfigError, boltzmann_probs, kl_rows, optimize_mixture_weights, \
    random_reward_spec
from .policy import FeatureStore, ListSpace, ScorerPolicy, enumerate_list_space
from .reporting import ResultTable

log = logging.getLogger(__name__)


@dataclass
class OracleInstance:
    """Users with fixed random candidate rows, every list's reward and the Boltzmann target."""

    users: np.ndarray
    cands: np.ndarray
    space: ListSpace
    rewards: np.ndarray  # (U, S)
    target: np.ndarray  # (U, S)
    store: FeatureStore
    n_items: int
    tau: float = 1.0


def oracle_instance(n_users: int, n_items: int, N: int, L: int, seed: int, tau: float = 1.0) -> OracleInstance:
    world = random_reward_spec(n_users, n_items, L, seed=seed)
    space = enumerate_list_space(N, L)
    rng = np.random.default_rng([seed, 0xC4])
    cands = np.stack([rng.choice(n_items, N, replace=False) for _ in range(n_users)])
    users = np.arange(n_users)
    R = np.stack([world.rewards(np.full(len(space), u), cands[u][space.lists]) for u in users])
    target, _ = boltzmann_probs(R, tau)
    return OracleInstance(users, cands, space, R, target, FeatureStore(world.contexts, world.item_features),
                          n_items, tau)


def instance_from_config(cfg: ExperimentConfig) -> OracleInstance:
    return oracle_instance(cfg.study_users, cfg.study_items, cfg.study_N, cfg.study_L, cfg.seed)


@dataclass(frozen=True)
class DistillConfig:
    epochs: int = 300
    step_size: float = 0.01
    batch_size: int = 50
    embedding_dim: int = 16
    activation: str = "relu"


def distill_config(cfg: ExperimentConfig) -> DistillConfig:
    return DistillConfig(cfg.study_epochs, cfg.study_step_size, cfg.study_batch_size, cfg.study_embedding_dim,
                         cfg.activation)


def instance_spec(inst: OracleInstance, widths, dc: DistillConfig) -> ScorerSpec:
    return ScorerSpec(dc.embedding_dim, tuple(int(w) for w in widths), dc.activation,
                      context_dim=inst.store.user_features.shape[1], item_feature_dim=inst.store.item_features.shape[1],
                      n_items=inst.n_items, list_length=inst.space.L)


def distill(inst: OracleInstance, widths, seed: int, dc: DistillConfig) -> np.ndarray:
    """Train one scorer on the full-space cross-entropy to the target; return its (U, S) probabilities."""
    spec = instance_spec(inst, widths, dc)
    params = init_scorer(spec, seed)
    policy = ScorerPolicy(spec, params, inst.store)
    opt = make_optimizer("adam", dc.step_size, params.values.size)
    rng = np.random.default_rng([seed, 0xD1])
    U = len(inst.users)
    for _ in range(dc.epochs):
        perm = rng.permutation(U)
        for b0 in range(0, U, dc.batch_size):
            b = perm[b0 : b0 + dc.batch_size]
            theta = params.tensor(requires_grad=True)
            lp = policy.dense_log_probs(inst.users[b], inst.cands[b], inst.space, theta)
            loss = ad.mul(ad.tsum(ad.mul(lp, inst.target[b])), -1.0 / len(b))
            params.values = optimizer_step(opt, params.values, ad.grad(loss, theta))
    return np.exp(policy.dense_log_probs(inst.users, inst.cands, inst.space).value)


def mean_kl(inst: OracleInstance, probs: np.ndarray) -> float:
    return float(np.mean(kl_rows(inst.target, probs)))


def _component_seed(seed: int, i: int) -> int:
    return 1000 * int(seed) + int(i)


def oracle_study(cfg: ExperimentConfig, inst: OracleInstance | None = None, depth: bool = True) -> ApproximationReport:
    """Mixture of ``k`` width-``alpha`` generators against single generators of width ``k*alpha + n``."""
    if not cfg.study_n_ladder:
        raise ConfigError("study_n_ladder must not be empty")
    inst = inst if inst is not None else instance_from_config(cfg)
    dc = distill_config(cfg)
    k, alpha = cfg.study_k, cfg.study_alpha
    if k < 1 or alpha < 1:
        raise ConfigError("study_k and study_alpha must be positive")
    report = ApproximationReport(notes={"N": inst.space.N, "L": inst.space.L, "n_lists": len(inst.space),
                                        "users": len(inst.users), "k": k, "alpha": alpha, "tau": inst.tau})
    for seed in cfg.study_seeds:
        comps = np.stack([distill(inst, (alpha,), _component_seed(seed, i), dc) for i in range(k)])
        for i in range(k):
            report.add("component", 1, alpha, 1, seed, mean_kl(inst, comps[i]))
        fit = optimize_mixture_weights(comps, inst.target)
        report.add("mixture", k, alpha, 1, seed, fit.kl)
        for n in cfg.study_n_ladder:
            W = k * alpha + int(n)
            report.add("single", 1, W, 1, seed, mean_kl(inst, distill(inst, (W,), int(seed), dc)), n=int(n))
        if depth:
            for D in cfg.study_depth_ladder:
                probs = distill(inst, (cfg.study_depth_width,) * int(D), int(seed), dc)
                report.add("depth", 1, cfg.study_depth_width, int(D), seed, mean_kl(inst, probs))
        log.info("oracle study seed %s done", seed)
    return report


def scaling_study(cfg: ExperimentConfig, inst: OracleInstance | None = None) -> ApproximationReport:
    if not cfg.study_width_ladder:
        raise ConfigError("study_width_ladder must not be empty")
    inst = inst if inst is not None else instance_from_config(cfg)
    dc = distill_config(cfg)
    report = ApproximationReport(notes={"N": inst.space.N, "L": inst.space.L, "users": len(inst.users)})
    for seed in cfg.study_seeds:
        for W in cfg.study_width_ladder:
            report.add("single", 1, int(W), 1, seed, mean_kl(inst, distill(inst, (int(W),), int(seed), dc)))
    return report


def median_by(report: ApproximationReport, family: str, key: str) -> dict[int, float]:
    """Median KL per value of ``key`` (``W``, ``D`` or ``n``) within one family."""
    vals: dict[int, list[float]] = {}
    for r in report.rows:
        if r["family"] == family:
            vals.setdefault(r[key], []).append(r["kl"])
    return {k: float(np.median(v)) for k, v in sorted(vals.items())}


# ---------------------------------------------------------------------------
# ablations over the fixture pipeline
# ---------------------------------------------------------------------------

ABLATIONS = ("group_size", "bias")
ABLATION_COLUMNS = ("ablation", "value", "seed") + METRICS


def ablation_cells(cfg: ExperimentConfig, which: str) -> list[tuple[float, ExperimentConfig]]:
    if which == "group_size":
        ladder = cfg.ablation_group_sizes
        key = "group_size"
    elif which == "bias":
        ladder = cfg.ablation_lambdas
        key = "bias_lambda"
    else:
        raise ConfigError(f"unknown ablation {which!r}; expected one of {ABLATIONS}")
    if not ladder:
        raise ConfigError(f"the {which} ladder is empty")
    if not cfg.ablation_seeds:
        raise ConfigError("ablation_seeds must not be empty")
    return [(v, replace(cfg, **{key: v, "seed": int(s)})) for v in ladder for s in cfg.ablation_seeds]


def ablation(cfg: ExperimentConfig, which: str) -> ResultTable:
    """Full GoalRank train + evaluate per ladder value and seed, on prerequisites already under ``cfg.out``.

    Data, retriever and reward model are shared by every cell; only the
    GoalRank run's group size or bias level and seed change.
    """
    from . import pipeline

    cells = ablation_cells(cfg, which)
    mf = pipeline.load_retriever(cfg)
    split = pipeline.load_split(cfg)
    table = ResultTable(ABLATION_COLUMNS)
    for value, c in cells:
        policy, _ = pipeline.fit_goalrank(c, mf)
        report = pipeline.evaluate_model(c, policy.decode, policy.item_scores, split)
        table.append(ablation=which, value=float(value) if which == "bias" else int(value), seed=c.seed,
                     **{m: report.value(m) for m in METRICS})
        log.info("ablation %s=%s seed %d: hit %.4f", which, value, c.seed, report.value("hit"))
    return table


def approximation_table(report: ApproximationReport) -> ResultTable:
    from .oracle import REPORT_COLUMNS

    return ResultTable(REPORT_COLUMNS, [dict(r) for r in report.rows])
