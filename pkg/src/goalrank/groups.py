"""Per-user list groups built from the current policy, auxiliary policies and seven strategies.

Strategies work on a batch of users at once and return candidate
*positions*: an array (U, count, L). Whole groups are assembled per user,
deduplicated (first occurrence kept), scored once, and carry the statistics
the reference distribution needs.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .oracle import ConfigError
from .policy import ListSpace, SequentialPolicy


class DegenerateGroupError(ValueError):
    pass


class StrategyKind(str, Enum):
    AUTOREGRESSIVE = "autoregressive"
    TREE = "tree"
    SOFTMAX_SAMPLING = "softmax_sampling"
    MARKOV = "markov"
    RANDOM = "random"
    SUBSTITUTION = "substitution"
    DIVERSITY = "diversity"


# quota order is also generation order inside a group
STRATEGY_ORDER = tuple(StrategyKind)

ON_GAP_FAILURE = ("skip", "augment", "accept")


@dataclass
class GroupBuilderConfig:
    size: int = 12
    quotas: dict = field(default_factory=lambda: {
        "tree": 2, "softmax_sampling": 4, "markov": 2, "substitution": 2, "diversity": 2})
    gap_threshold: float | None = None  # None: calibrate to half the pooled reward std
    on_gap_failure: str = "skip"
    subset_size: int | None = None
    tree_branch: int = 2
    tree_depth: int = 1
    substitutions: int = 2
    sampling_temperature: float = 1.0
    random_top_up: bool = True
    full_space: bool = False
    diversity_pool: int = 64

    def __post_init__(self):
        if self.size < 2:
            raise ConfigError(f"group size must be >= 2, got {self.size}")
        if self.gap_threshold is not None and self.gap_threshold < 0:
            raise ConfigError("gap threshold must be >= 0")
        if self.on_gap_failure not in ON_GAP_FAILURE:
            raise ConfigError(f"on_gap_failure must be one of {ON_GAP_FAILURE}")
        if not 1 <= self.substitutions <= 2:
            raise ConfigError("substitution count must be 1 or 2")
        for k, v in self.quotas.items():
            StrategyKind(k)
            if v < 0:
                raise ConfigError(f"negative quota for {k}")
        if self.subset_size is not None and not 2 <= self.subset_size <= self.size:
            raise ConfigError("subset size must lie in [2, size]")


@dataclass
class ListGroup:
    """Distinct lists (item ids) for one user with their rewards and statistics."""

    user: int
    lists: np.ndarray
    rewards: np.ndarray
    positions: np.ndarray | None = None

    def __post_init__(self):
        self.lists = np.asarray(self.lists, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if len(self.lists) < 1 or len(self.lists) != len(self.rewards):
            raise ValueError("a group needs one reward per list and at least one list")
        if len({tuple(r) for r in self.lists.tolist()}) != len(self.lists):
            raise ValueError("group lists must be distinct")

    def __len__(self) -> int:
        return len(self.lists)

    @property
    def mean(self) -> float:
        return float(self.rewards.mean())

    @property
    def std(self) -> float:
        return float(self.rewards.std())

    @property
    def gap(self) -> float:
        return float(self.rewards.max() - self.rewards.min())


@dataclass
class StrategyOutput:
    positions: list[np.ndarray]  # per user, (count_u, L)
    exhausted: bool = False


# ---------------------------------------------------------------------------
# strategies
# ---------------------------------------------------------------------------


def _as_users(uids, cands):
    return np.asarray(uids, dtype=np.int64), np.asarray(cands, dtype=np.int64)


def _rep(x, k):
    return np.repeat(x, k, axis=0)


def list_distance(a, b) -> float:
    """1 - (shared items + positional agreements) / (2L)."""
    a, b = list(a), list(b)
    L = len(a)
    overlap = len(set(a) & set(b))
    agree = sum(x == y for x, y in zip(a, b))
    return 1.0 - (overlap + agree) / (2 * L)


def _log_softmax(x):
    m = np.max(x, axis=-1, keepdims=True)
    return x - m - np.log(np.sum(np.exp(x - m), axis=-1, keepdims=True))


def _random_lists(rng, N, L, count):
    return np.array([rng.permutation(N)[:L] for _ in range(count)], dtype=np.int64).reshape(count, L)


def generate_by_strategy(kind, policies, uids, cands, L: int, count: int, rng: np.random.Generator,
                         config: GroupBuilderConfig | None = None, seeds: list | None = None) -> StrategyOutput:
    """Lists from one strategy for every user in the batch.

    ``policies`` is a single policy or a sequence (autoregressive uses every
    policy's greedy list; other strategies use the first). ``seeds`` holds
    per-user existing lists (positions) for substitution and diversity.
    """
    kind = StrategyKind(kind)
    cfg = config or GroupBuilderConfig()
    uids, cands = _as_users(uids, cands)
    U, N = cands.shape
    if N < L:
        raise ValueError(f"need at least L={L} candidates, got {N}")
    pols = list(policies) if isinstance(policies, (list, tuple)) else [policies]
    empty = np.zeros((0, L), dtype=np.int64)
    if count <= 0:
        return StrategyOutput([empty] * U)

    if kind is StrategyKind.AUTOREGRESSIVE:
        outs = [p.greedy_positions(uids, cands, L) for p in pols[:count]]
        stacked = np.stack(outs, axis=1) if outs else np.zeros((U, 0, L), dtype=np.int64)
        return StrategyOutput(list(stacked), exhausted=len(pols) < count)

    policy: SequentialPolicy = pols[0]

    if kind is StrategyKind.SOFTMAX_SAMPLING:
        pos = policy.sample_positions(_rep(uids, count), _rep(cands, count), L, rng, cfg.sampling_temperature)
        return StrategyOutput(list(pos.reshape(U, count, L)))

    if kind is StrategyKind.RANDOM:
        return StrategyOutput([_random_lists(rng, N, L, count) for _ in range(U)])

    if kind is StrategyKind.TREE:
        K = min(cfg.tree_depth, L)
        prefixes = np.zeros((U, 1, 0), dtype=np.int64)
        for t in range(K):
            P = prefixes.shape[1]
            flat_pref = prefixes.reshape(U * P, t)
            chosen = np.zeros((U * P, N), dtype=bool)
            np.put_along_axis(chosen, flat_pref, True, axis=1)
            sc = policy.step_scores(_rep(uids, P), _rep(cands, P), chosen, t)
            sc = np.where(chosen, -np.inf, sc)
            # top-b per prefix, ties to the lowest item id
            ids = _rep(cands, P)
            nb = min(cfg.tree_branch, N - t)
            order = np.lexsort((ids, -sc), axis=1)
            ext = np.concatenate([np.repeat(flat_pref, nb, axis=0), order[:, :nb].reshape(-1, 1)], axis=1)
            prefixes = ext.reshape(U, P * nb, t + 1)
        P = prefixes.shape[1]
        full = policy.complete_greedy(_rep(uids, P), _rep(cands, P), prefixes.reshape(U * P, K), L)
        full = full.reshape(U, P, L)[:, :count]
        return StrategyOutput(list(full), exhausted=P < count)

    if kind is StrategyKind.MARKOV:
        keep = math.ceil(math.sqrt(count))
        # pair score = log-probability of (first, second) under the policy
        first = _log_softmax(policy.first_step_scores(uids, cands))  # (U, N)
        onehot = np.eye(N, dtype=bool)
        second = policy.step_scores(_rep(uids, N), _rep(cands, N), np.tile(onehot, (U, 1)), 1).reshape(U, N, N)
        pair = first[:, :, None] + _log_softmax(np.where(onehot[None], -np.inf, second))
        flat = pair.reshape(U, N * N)
        pid = (cands[:, :, None] * (cands.max() + 1) + cands[:, None, :]).reshape(U, N * N)
        order = np.lexsort((pid, -flat), axis=1)[:, : min(keep, N * (N - 1))]
        outs = []
        exhausted = False
        for u in range(U):
            lists = []
            pairs = [(int(o) // N, int(o) % N) for o in order[u]]
            per_pair = math.ceil(count / len(pairs))
            for a, bpos in pairs:
                branches = _markov_extend(policy, uids[u], cands[u], [a, bpos], L, per_pair)
                lists.extend(branches)
            if len(lists) < count:
                exhausted = True
            outs.append(np.array(lists[:count], dtype=np.int64).reshape(-1, L))
        return StrategyOutput(outs, exhausted)

    if kind is StrategyKind.SUBSTITUTION:
        if seeds is None or any(len(s) == 0 for s in seeds):
            raise ValueError("substitution needs a non-empty seed pool for every user")
        first = policy.first_step_scores(uids, cands)
        outs = []
        for u in range(U):
            rank = np.lexsort((cands[u], -first[u]))  # best candidate positions first
            pool = np.asarray(seeds[u], dtype=np.int64)
            lists = []
            for j in range(count):
                base = pool[j % len(pool)].copy()
                n_sub = int(rng.integers(1, cfg.substitutions + 1)) if L > 1 else 1
                slots = np.sort(rng.choice(L, size=min(n_sub, L), replace=False))
                unused = [p for p in rank if p not in set(base.tolist())]
                for s, p in zip(slots, unused):
                    base[s] = p
                lists.append(base)
            outs.append(np.array(lists, dtype=np.int64).reshape(-1, L))
        return StrategyOutput(outs)

    if kind is StrategyKind.DIVERSITY:
        outs = []
        for u in range(U):
            pool = _random_lists(rng, N, L, cfg.diversity_pool)
            selected = [tuple(s) for s in (seeds[u] if seeds is not None else [])]
            picked = []
            for _ in range(count):
                best, best_d = None, -1.0
                for cand in pool:
                    c = tuple(cand.tolist())
                    if c in selected:
                        continue
                    d = min((list_distance(c, s) for s in selected), default=1.0)
                    if d > best_d:
                        best, best_d = c, d
                if best is None:
                    break
                selected.append(best)
                picked.append(best)
            outs.append(np.array(picked, dtype=np.int64).reshape(-1, L))
        return StrategyOutput(outs, exhausted=any(len(o) < count for o in outs))

    raise ConfigError(f"unhandled strategy {kind}")


def _markov_extend(policy, uid, cand_row, prefix, L, branches):
    """Continue ``prefix`` conditioning each step only on the previous item.

    The third step takes the top ``branches`` choices; later steps are greedy.
    """
    N = len(cand_row)
    results = [list(prefix)]
    for t in range(len(prefix), L):
        nxt = []
        for lst in results:
            state = np.zeros((1, N), dtype=bool)
            state[0, lst[-1]] = True
            sc = policy.step_scores(np.array([uid]), cand_row[None], state, t)[0]
            sc[lst] = -np.inf
            order = np.lexsort((cand_row, -sc))
            order = [int(p) for p in order if np.isfinite(sc[p])]
            width = branches if t == len(prefix) else 1
            nxt.extend(lst + [p] for p in order[:width])
        results = nxt
    return results[:branches] if len(prefix) < L else results


# ---------------------------------------------------------------------------
# group assembly
# ---------------------------------------------------------------------------


def check_reward_gap(group: ListGroup, threshold: float) -> bool:
    """True iff the largest pairwise reward difference exceeds ``threshold``."""
    if threshold < 0:
        raise ConfigError("gap threshold must be >= 0")
    return group.gap > threshold


def subsample_group(group: ListGroup, m: int, rng: np.random.Generator) -> ListGroup:
    """Reward-stratified uniform subsample of ``m`` lists (one per equal-width rank stratum)."""
    n = len(group)
    if not 2 <= m <= n:
        raise ValueError(f"subset size {m} outside [2, {n}]")
    order = np.lexsort((np.arange(n), -group.rewards))
    edges = np.floor(np.linspace(0, n, m + 1)).astype(int)
    pick = [order[int(rng.integers(edges[k], edges[k + 1]))] for k in range(m)]
    pos = None if group.positions is None else group.positions[pick]
    return ListGroup(group.user, group.lists[pick], group.rewards[pick], pos)


def _dedup_append(store: list, seen: set, rows) -> None:
    for r in rows:
        key = tuple(int(v) for v in r)
        if key not in seen:
            seen.add(key)
            store.append(key)


def build_groups(current: SequentialPolicy, auxiliary, reward_fn, uids, cands, L: int,
                 config: GroupBuilderConfig, rng: np.random.Generator,
                 space: ListSpace | None = None) -> list[ListGroup]:
    """One group per user. The current policy's greedy list always comes first.

    Raises :class:`DegenerateGroupError` if some user ends with fewer than two lists.
    """
    uids, cands = _as_users(uids, cands)
    U, N = cands.shape
    greedy = current.greedy_positions(uids, cands, L)
    rows: list[list] = [[] for _ in range(U)]
    seen: list[set] = [set() for _ in range(U)]
    for u in range(U):
        _dedup_append(rows[u], seen[u], greedy[u][None])

    if config.full_space:
        if space is None or space.N != N or space.L != L:
            raise ValueError("full-space groups need the matching ListSpace")
        for u in range(U):
            _dedup_append(rows[u], seen[u], space.lists)
    else:
        aux = list(auxiliary or [])
        if aux:
            out = generate_by_strategy(StrategyKind.AUTOREGRESSIVE, aux, uids, cands, L, len(aux), rng, config)
            for u in range(U):
                _dedup_append(rows[u], seen[u], out.positions[u])
        for kind in STRATEGY_ORDER:
            q = int(config.quotas.get(kind.value, 0))
            if kind is StrategyKind.AUTOREGRESSIVE or q == 0:
                continue
            seeds = [np.array(r, dtype=np.int64).reshape(-1, L) for r in rows]
            out = generate_by_strategy(kind, current, uids, cands, L, q, rng, config, seeds=seeds)
            for u in range(U):
                _dedup_append(rows[u], seen[u], out.positions[u])
        if config.random_top_up:
            total = math.perm(N, L)
            for u in range(U):
                target = min(config.size, total)
                while len(rows[u]) < target:
                    _dedup_append(rows[u], seen[u], _random_lists(rng, N, L, target - len(rows[u])))
        for u in range(U):
            del rows[u][config.size:]

    groups = []
    sizes = [len(r) for r in rows]
    if min(sizes) < 2:
        bad = int(uids[int(np.argmin(sizes))])
        raise DegenerateGroupError(f"user {bad}: fewer than two distinct lists")
    flat_pos = np.array([p for r in rows for p in r], dtype=np.int64).reshape(-1, L)
    owner = np.repeat(np.arange(U), sizes)
    items = np.take_along_axis(cands[owner], flat_pos, axis=1)
    rewards = np.asarray(reward_fn(uids[owner], items), dtype=np.float64)
    cut = np.cumsum(sizes)[:-1]
    for u, (it, rw, ps) in enumerate(zip(np.split(items, cut), np.split(rewards, cut), np.split(flat_pos, cut))):
        groups.append(ListGroup(int(uids[u]), it, rw, ps))
    return groups


def build_group(current, auxiliary, reward_fn, user: int, cand_row, L: int, config: GroupBuilderConfig,
                rng: np.random.Generator, space: ListSpace | None = None) -> ListGroup:
    return build_groups(current, auxiliary, reward_fn, [user], np.asarray(cand_row)[None], L, config, rng,
                        space)[0]


def groups_to_csv(groups: list[ListGroup]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("user_id", "group_id", "rank", "item_ids", "reward"))
    for gid, g in enumerate(groups):
        for rank, (lst, r) in enumerate(zip(g.lists, g.rewards)):
            w.writerow((g.user, gid, rank, " ".join(str(int(v)) for v in lst), repr(float(r))))
    return buf.getvalue()


__all__ = [
    "DegenerateGroupError", "GroupBuilderConfig", "ListGroup", "StrategyKind", "StrategyOutput",
    "build_group", "build_groups", "check_reward_gap", "generate_by_strategy",
    "groups_to_csv", "list_distance", "subsample_group",
]
