"""Group-relative distillation: reference distributions, the list cross-entropy, the training loop.

For each user the trainer builds a group of lists, standardises their rewards
within the group, turns them into a softmax reference and pulls the policy's
sequential list probabilities towards it.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .groups import DegenerateGroupError, GroupBuilderConfig, ListGroup, build_groups, check_reward_gap, subsample_group
from .nn import autodiff as ad
from .nn.optim import OptimizerState, make_optimizer, step as optimizer_step
from .nn.scorer import ParameterVector, ScorerSpec, init_scorer
from .oracle import ConfigError
from .policy import FeatureStore, ListSpace, ScorerPolicy
from .reward import BiasSpec, RewardFn, inject_bias

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8


class TrainingAborted(RuntimeError):
    pass


@dataclass
class ReferenceDistribution:
    group: ListGroup
    probs: np.ndarray


def standardized(rewards: np.ndarray, std_floor: float = STD_FLOOR) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    mu = r.mean()
    sd = r.std()
    if sd < std_floor:
        return np.zeros_like(r)
    return (r - mu) / sd


def reference_probs(rewards, std_floor: float = STD_FLOOR) -> np.ndarray:
    """softmax of group-standardised rewards; uniform when the spread is below ``std_floor``."""
    r = np.asarray(rewards, dtype=np.float64)
    if len(r) < 2:
        raise DegenerateGroupError("a reference distribution needs at least two lists")
    z = standardized(r, std_floor)
    e = np.exp(z - z.max())
    return e / e.sum()


def reference_policy(group: ListGroup, std_floor: float = STD_FLOOR) -> ReferenceDistribution:
    return ReferenceDistribution(group, reference_probs(group.rewards, std_floor))


def _pad_groups(groups: list[ListGroup], refs: list[np.ndarray]):
    M = max(len(g) for g in groups)
    L = groups[0].positions.shape[1]
    pos = np.zeros((len(groups), M, L), dtype=np.int64)
    w = np.zeros((len(groups), M))
    pad = np.ones((len(groups), M), dtype=bool)
    for k, (g, r) in enumerate(zip(groups, refs)):
        n = len(g)
        pos[k, :n] = g.positions
        pos[k, n:] = g.positions[0]
        w[k, :n] = r
        pad[k, :n] = False
    return pos, w, pad


def batch_loss(policy: ScorerPolicy, theta: ad.Tensor, groups: list[ListGroup], refs: list[np.ndarray],
               cands: np.ndarray, renormalize: bool = False, space: ListSpace | None = None,
               space_index: dict | None = None) -> ad.Tensor:
    """Mean over groups of ``-sum_l ref(l) log pi(l)``.

    ``log pi`` is the full-space sequential log-probability unless
    ``renormalize`` restricts it to the group. With ``space`` given, the
    log-probabilities of all lists are computed in one pass over the prefix
    tree and the group's lists are looked up in it.
    """
    uids = np.array([g.user for g in groups], dtype=np.int64)
    if space is not None:
        lp_all = policy.dense_log_probs(uids, cands, space, theta)  # (G, S)
        M = max(len(g) for g in groups)
        idx = np.zeros((len(groups), M), dtype=np.int64)
        w = np.zeros((len(groups), M))
        pad = np.ones((len(groups), M), dtype=bool)
        for k, (g, r) in enumerate(zip(groups, refs)):
            idx[k, : len(g)] = [space_index[tuple(p)] for p in g.positions.tolist()]
            w[k, : len(g)] = r
            pad[k, : len(g)] = False
        lp = ad.gather_last(lp_all, idx)
    else:
        pos, w, pad = _pad_groups(groups, refs)
        lp = policy.log_prob_positions(uids, cands, pos, theta)  # (G, M)
    if renormalize:
        lp = ad.sub(lp, ad.expand_dims(ad.logsumexp(lp, axis=-1, mask=pad), -1))
    return ad.mul(ad.tsum(ad.mul(lp, w)), -1.0 / len(groups))


def goalrank_loss(policy: ScorerPolicy, group: ListGroup, reference: ReferenceDistribution, cand_row,
                  theta: ad.Tensor | None = None, renormalize: bool = False) -> ad.Tensor:
    """Single-group loss; domain errors come from the group's candidate positions."""
    if reference.group is not group and len(reference.probs) != len(group):
        raise ValueError("reference does not match the group")
    if group.positions is None:
        from .policy import items_to_positions
        group = replace(group, positions=np.stack([items_to_positions(cand_row, l) for l in group.lists]))
    theta = policy.params.tensor(requires_grad=True) if theta is None else theta
    return batch_loss(policy, theta, [group], [reference.probs], np.asarray(cand_row)[None], renormalize)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainerConfig:
    epochs: int = 100
    batch_size: int = 50
    step_size: float = 0.01
    optimizer: str = "adam"
    groups: GroupBuilderConfig = field(default_factory=GroupBuilderConfig)
    bias: BiasSpec | None = None
    seed: int = 0
    eval_every: int = 0
    renormalize: bool = False
    std_floor: float = STD_FLOOR
    max_skip_rate: float = 0.5

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.step_size < 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and step_size >= 0 are required")


@dataclass
class TrainerState:
    params: ParameterVector
    optimizer: OptimizerState
    step: int = 0
    history: list[tuple[int, float, float]] = field(default_factory=list)
    skipped: int = 0
    seen: int = 0
    gap_threshold: float = 0.0
    snapshots: list = field(default_factory=list)

    @property
    def skip_rate(self) -> float:
        return self.skipped / self.seen if self.seen else 0.0

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("step", "loss", "skip_rate"))
        for s, loss, rate in self.history:
            w.writerow((s, repr(loss), repr(rate)))
        return buf.getvalue()

    def write_history(self, path) -> None:
        Path(path).write_text(self.history_csv(), encoding="utf-8")


def calibrate_gap_threshold(groups: list[ListGroup]) -> float:
    """Half the standard deviation of every reward seen in a calibration pass."""
    pooled = np.concatenate([g.rewards for g in groups])
    return 0.5 * float(pooled.std())


def _space_index(space: ListSpace) -> dict:
    return {tuple(p): s for s, p in enumerate(space.lists.tolist())}


def train_goalrank(spec: ScorerSpec, store: FeatureStore, users, cands, reward_fn: RewardFn, L: int,
                   config: TrainerConfig, auxiliary=(), space: ListSpace | None = None,
                   snapshot: Callable[[ScorerPolicy, int], object] | None = None) -> TrainerState:
    """Distil the group-relative reference into a fresh scorer policy.

    ``users`` / ``cands`` are the training users and their (U, N) candidate
    rows. ``snapshot(policy, epoch)`` is called every ``eval_every`` epochs and
    its results collected in ``state.snapshots``.
    """
    users = np.asarray(users, dtype=np.int64)
    cands = np.asarray(cands, dtype=np.int64)
    gcfg = config.groups
    if gcfg.full_space and space is None:
        from .policy import enumerate_list_space
        space = enumerate_list_space(cands.shape[1], L)
    sindex = _space_index(space) if space is not None else None
    if config.bias is not None:
        reward_fn = inject_bias(reward_fn, config.bias)

    params = init_scorer(spec, config.seed)
    policy = ScorerPolicy(spec, params, store, name="goalrank")
    opt = make_optimizer(config.optimizer, config.step_size, params.values.size)
    state = TrainerState(params, opt)
    if config.epochs == 0:
        return state

    threshold = gcfg.gap_threshold
    if threshold is None:
        calib = build_groups(policy, auxiliary, reward_fn, users, cands, L, gcfg,
                             np.random.default_rng([config.seed, 0xCA1]), space)
        threshold = calibrate_gap_threshold(calib)
    state.gap_threshold = threshold
    augment_cfg = replace(gcfg, quotas={"random": gcfg.size, "diversity": gcfg.size}, subset_size=None)

    order_rng = np.random.default_rng([config.seed, 0x0D])
    row_of = {int(u): k for k, u in enumerate(users)}
    for epoch in range(config.epochs):
        perm = order_rng.permutation(len(users))
        for b0 in range(0, len(users), config.batch_size):
            rows = perm[b0 : b0 + config.batch_size]
            rng = np.random.default_rng([config.seed, epoch, b0])
            groups = build_groups(policy, auxiliary, reward_fn, users[rows], cands[rows], L, gcfg, rng, space)
            kept, refs = [], []
            for r, g in zip(rows, groups):
                state.seen += 1
                ok = check_reward_gap(g, threshold)
                if not ok and gcfg.on_gap_failure == "augment":
                    extra = build_groups(policy, auxiliary, reward_fn, users[[r]], cands[[r]], L, augment_cfg,
                                         rng, space)[0]
                    g = _merge(g, extra)
                    ok = check_reward_gap(g, threshold)
                if not ok and gcfg.on_gap_failure != "accept":
                    state.skipped += 1
                    continue
                if gcfg.subset_size is not None and gcfg.subset_size < len(g):
                    g = subsample_group(g, gcfg.subset_size, rng)
                kept.append(g)
                refs.append(reference_probs(g.rewards, config.std_floor))
            if not kept:
                log.warning("step %d: every group in the batch failed the gap check; step skipped", state.step)
            else:
                theta = params.tensor(requires_grad=True)
                gc = cands[[row_of[g.user] for g in kept]]
                loss = batch_loss(policy, theta, kept, refs, gc, config.renormalize, space if gcfg.full_space else None,
                                  sindex)
                grad = ad.grad(loss, theta)
                params.values = optimizer_step(opt, params.values, grad)
                state.step += 1
                state.history.append((state.step, float(loss.value), state.skip_rate))
            if state.skip_rate > config.max_skip_rate:
                raise TrainingAborted(
                    f"{state.skip_rate:.0%} of groups failed the reward-gap check (threshold {threshold:.4g}); "
                    "lower the gap threshold or enlarge the groups")
        if snapshot is not None and config.eval_every and (epoch + 1) % config.eval_every == 0:
            state.snapshots.append(snapshot(policy, epoch + 1))
    return state


def _merge(g: ListGroup, extra: ListGroup) -> ListGroup:
    seen = {tuple(r) for r in g.lists.tolist()}
    add = [k for k, r in enumerate(extra.lists.tolist()) if tuple(r) not in seen]
    return ListGroup(g.user, np.concatenate([g.lists, extra.lists[add]]),
                     np.concatenate([g.rewards, extra.rewards[add]]),
                     np.concatenate([g.positions, extra.positions[add]]))


def trained_policy(spec: ScorerSpec, state: TrainerState, store: FeatureStore) -> ScorerPolicy:
    return ScorerPolicy(spec, state.params, store, name="goalrank")
