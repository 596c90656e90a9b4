"""List policies over ordered, duplicate-free lists of L out of N candidates.

A scorer policy realises softmax∘g as a sequential without-replacement
factorisation: at step t the next item is drawn from a softmax over the
remaining candidates, conditioned on the step state. Lists are handled
internally as candidate *positions* (indices into the candidate row) and
converted to item ids at the API boundary.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import autodiff as ad
from .nn.autodiff import Tensor
from .nn.scorer import ParameterVector, ScorerSpec, step_logits

DEFAULT_ENUMERATION_CAP = 10**6


class SpaceTooLarge(ValueError):
    def __init__(self, N: int, L: int, size: int, cap: int):
        super().__init__(f"P({N},{L}) = {size} lists exceeds the enumeration cap {cap}")
        self.size = size


class DomainError(ValueError):
    """A list refers to items outside its candidate set or repeats an item."""


class SimplexError(ValueError):
    pass


def n_lists(N: int, L: int) -> int:
    return math.perm(N, L)


# ---------------------------------------------------------------------------
# enumerated list spaces
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ListSpace:
    """All P(N, L) lists in lexicographic order of candidate positions.

    ``prefix_chosen`` / ``prefix_step`` describe every proper prefix (the
    nodes of the prefix tree) and ``node_of[s, t]`` is the prefix node that
    list ``s`` sits at before choosing its t-th item.
    """

    N: int
    L: int
    lists: np.ndarray
    prefix_chosen: np.ndarray
    prefix_step: np.ndarray
    node_of: np.ndarray

    def __len__(self) -> int:
        return len(self.lists)

    def items(self, cand_ids: np.ndarray) -> np.ndarray:
        """Item-id view of the enumeration for one candidate row."""
        return np.asarray(cand_ids)[self.lists]


def enumerate_list_space(N: int, L: int, cap: int = DEFAULT_ENUMERATION_CAP) -> ListSpace:
    if not 1 <= L < N:
        raise ValueError(f"need 1 <= L < N, got N={N}, L={L}")
    size = n_lists(N, L)
    if size > cap:
        raise SpaceTooLarge(N, L, size, cap)
    lists = np.array(list(itertools.permutations(range(N), L)), dtype=np.int64).reshape(size, L)
    node_index: dict[tuple, int] = {}
    chosen_rows = []
    steps = []
    for t in range(L):
        for prefix in itertools.permutations(range(N), t):
            node_index[prefix] = len(chosen_rows)
            row = np.zeros(N, dtype=bool)
            row[list(prefix)] = True
            chosen_rows.append(row)
            steps.append(t)
    node_of = np.empty((size, L), dtype=np.int64)
    for s, lst in enumerate(lists):
        for t in range(L):
            node_of[s, t] = node_index[tuple(lst[:t])]
    return ListSpace(N, L, lists, np.array(chosen_rows), np.array(steps, dtype=np.int64), node_of)


# ---------------------------------------------------------------------------
# dense policies and mixtures
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class DensePolicy:
    space: ListSpace
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.shape != (len(self.space),):
            raise ValueError("probability vector does not match the list space")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValueError("dense policy must be non-negative and sum to 1")

    def save(self, csv_path, json_path) -> None:
        """Write ``list_index,prob`` rows plus a JSON descriptor of the space."""
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["list_index", "prob"])
            for i, p in enumerate(self.probs):
                w.writerow([i, repr(float(p))])
        Path(json_path).write_text(json.dumps({"N": self.space.N, "L": self.space.L, "size": len(self.space),
                                               "order": "lexicographic positions"}, sort_keys=True) + "\n")

    @classmethod
    def load(cls, csv_path, json_path, space: ListSpace | None = None) -> "DensePolicy":
        desc = json.loads(Path(json_path).read_text())
        space = space or enumerate_list_space(desc["N"], desc["L"])
        if (space.N, space.L) != (desc["N"], desc["L"]):
            raise ValueError("space does not match the stored descriptor")
        with open(csv_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        probs = np.zeros(len(space))
        for r in rows:
            probs[int(r["list_index"])] = float(r["prob"])
        return cls(space, probs)


@dataclass(eq=False)
class MixturePolicy:
    components: list
    weights: np.ndarray

    def __post_init__(self):
        self.weights = check_simplex(self.weights)
        if len(self.components) != len(self.weights):
            raise ValueError("one weight per component")


def check_simplex(weights, tol: float = 1e-12) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size < 1:
        raise SimplexError("weights must be a non-empty vector")
    if np.any(w < 0):
        raise SimplexError(f"negative mixture weight: {w}")
    if abs(w.sum() - 1.0) > tol:
        raise SimplexError(f"weights sum to {w.sum()!r}, not 1")
    return w


def mix(components: list[DensePolicy], weights) -> DensePolicy:
    """Convex combination of dense policies over one shared list space."""
    w = check_simplex(weights)
    if len(components) != len(w):
        raise ValueError("one weight per component")
    space = components[0].space
    if any(c.space is not space for c in components):
        raise ValueError("components must share a ListSpace")
    probs = np.zeros(len(space))
    for wi, c in zip(w, components):
        probs = probs + wi * c.probs
    return DensePolicy(space, probs)


# ---------------------------------------------------------------------------
# scorer-backed sequential policies
# ---------------------------------------------------------------------------


@dataclass
class FeatureStore:
    """Fixed features the scorers read: one row per user and per item (dense ids)."""

    user_features: np.ndarray | None
    item_features: np.ndarray | None

    def context(self, uids) -> np.ndarray | None:
        return None if self.user_features is None else self.user_features[np.asarray(uids)]

    def items(self, item_ids) -> np.ndarray | None:
        return None if self.item_features is None else self.item_features[np.asarray(item_ids)]


class SequentialPolicy:
    """Decoding shared by every policy that scores candidates step by step.

    Subclasses provide :meth:`step_scores`: raw (U, N) scores given a boolean
    step state and the step index. Decoding masks already-chosen candidates.
    """

    name: str = "policy"

    def step_scores(self, uids, cands, state: np.ndarray, t: int) -> np.ndarray:
        raise NotImplementedError

    def first_step_scores(self, uids, cands) -> np.ndarray:
        """(U, N) marginal item scores at the empty state."""
        cands = np.asarray(cands, dtype=np.int64)
        return self.step_scores(uids, cands, np.zeros(cands.shape, dtype=bool), 0)

    def _run(self, uids, cands, L, pick, chosen=None, start: int = 0, out=None):
        cands = np.asarray(cands, dtype=np.int64)
        U, N = cands.shape
        if L > N:
            raise ValueError(f"cannot pick {L} of {N} candidates")
        chosen = np.zeros((U, N), dtype=bool) if chosen is None else chosen.copy()
        out = np.empty((U, L), dtype=np.int64) if out is None else out.copy()
        for t in range(start, L):
            lg = np.where(chosen, -np.inf, self.step_scores(uids, cands, chosen, t))
            pos = pick(lg, cands)
            out[:, t] = pos
            chosen[np.arange(U), pos] = True
        return out

    def greedy_positions(self, uids, cands, L) -> np.ndarray:
        return self._run(uids, cands, L, argmax_lowest_id)

    def complete_greedy(self, uids, cands, prefixes: np.ndarray, L: int) -> np.ndarray:
        """Extend (U, K) position prefixes greedily to length L."""
        prefixes = np.asarray(prefixes, dtype=np.int64)
        U, K = prefixes.shape
        chosen = np.zeros(np.shape(cands), dtype=bool)
        np.put_along_axis(chosen, prefixes, True, axis=1)
        out = np.zeros((U, L), dtype=np.int64)
        out[:, :K] = prefixes
        return self._run(uids, cands, L, argmax_lowest_id, chosen=chosen, start=K, out=out)

    def sample_positions(self, uids, cands, L, rng: np.random.Generator, temperature: float = 1.0):
        """Gumbel-max sampling per step; ``temperature <= 0`` falls back to greedy."""
        if temperature <= 0:
            return self.greedy_positions(uids, cands, L)

        def pick(lg, cands):
            g = rng.gumbel(size=lg.shape)
            return np.argmax(np.where(np.isfinite(lg), lg / temperature + g, -np.inf), axis=1)

        return self._run(uids, cands, L, pick)

    # item-id conveniences used by evaluation
    def decode(self, uids, cands, L) -> np.ndarray:
        cands = np.asarray(cands, dtype=np.int64)
        return np.take_along_axis(cands, self.greedy_positions(uids, cands, L), axis=1)

    def item_scores(self, uids, cands) -> np.ndarray:
        return self.first_step_scores(uids, cands)


@dataclass
class StaticScorePolicy(SequentialPolicy):
    """Ranks candidates by a fixed (n_users, n_items) score table, ignoring the step state."""

    table: np.ndarray
    name: str = "static"

    def step_scores(self, uids, cands, state, t):
        return np.asarray(self.table)[np.asarray(uids)[:, None], np.asarray(cands)]


@dataclass
class ScorerPolicy(SequentialPolicy):
    """Sequential softmax policy driven by a ``per_item_score`` scorer.

    With ``step_independent=True`` the scorer is always queried at the empty
    step state, so each step's logits are the first-step logits with the
    chosen items masked (a pointwise generator).
    """

    spec: ScorerSpec
    params: ParameterVector
    store: FeatureStore
    step_independent: bool = False
    name: str = field(default="policy")

    def logits(self, uids, cands, chosen, step, theta: Tensor | None = None) -> Tensor:
        """Raw logits (U, P, N) for P step states per user."""
        theta = self.params.tensor() if theta is None else theta
        cands = np.asarray(cands, dtype=np.int64)
        if self.step_independent:
            U, N = cands.shape
            base = step_logits(theta, self.spec, self.params.layout, self.store.context(uids), cands,
                               self.store.items(cands), np.zeros((U, 1, N), dtype=bool),
                               np.zeros((U, 1), dtype=np.int64))
            P = np.shape(chosen)[1]
            return ad.add(base, np.zeros((U, P, N)))
        return step_logits(theta, self.spec, self.params.layout, self.store.context(uids), cands,
                           self.store.items(cands), chosen, step)

    def step_scores(self, uids, cands, state, t):
        U = np.shape(cands)[0]
        if self.step_independent:
            state, t = np.zeros_like(state), 0
        return self.logits(uids, cands, state[:, None, :], np.full((U, 1), t)).value[:, 0, :]

    def log_prob_positions(self, uids, cands, positions, theta: Tensor | None = None) -> Tensor:
        """Sequential log-probability of lists given as candidate positions, (U, M, L) -> (U, M)."""
        positions = np.asarray(positions, dtype=np.int64)
        U, M, L = positions.shape
        N = np.shape(cands)[1]
        onehot = np.zeros((U, M, L, N), dtype=bool)
        np.put_along_axis(onehot, positions[..., None], True, axis=-1)
        chosen = np.cumsum(onehot, axis=2) - onehot  # items chosen strictly before step t
        chosen = chosen.astype(bool).reshape(U, M * L, N)
        step = np.broadcast_to(np.arange(L), (U, M, L)).reshape(U, M * L)
        lg = self.logits(uids, cands, chosen, step, theta)
        lsm = ad.masked_log_softmax(lg, chosen)
        picked = ad.gather_last(lsm, positions.reshape(U, M * L, 1))
        return ad.tsum(ad.reshape(picked, (U, M, L)), axis=2)

    def dense_log_probs(self, uids, cands, space: ListSpace, theta: Tensor | None = None) -> Tensor:
        """Log-probabilities of every list in ``space``, shape (U, S)."""
        U = np.shape(cands)[0]
        Pn = len(space.prefix_step)
        chosen = np.broadcast_to(space.prefix_chosen, (U, Pn, space.N))
        step = np.broadcast_to(space.prefix_step, (U, Pn))
        lg = self.logits(uids, cands, chosen, step, theta)
        lsm = ad.masked_log_softmax(lg, chosen)
        picked = ad.index(lsm, (slice(None), space.node_of, space.lists))  # (U, S, L)
        return ad.tsum(picked, axis=2)


def argmax_lowest_id(scores: np.ndarray, cand_ids: np.ndarray) -> np.ndarray:
    """Row-wise argmax position; exact ties go to the lowest item id."""
    m = scores.max(axis=1, keepdims=True)
    big = np.iinfo(np.int64).max
    ids = np.where(scores == m, cand_ids, big)
    return np.argmin(ids, axis=1)


def items_to_positions(cand_ids: np.ndarray, items) -> np.ndarray:
    """Map a list of item ids to positions in one candidate row; validates membership."""
    cand_ids = np.asarray(cand_ids)
    where = {int(v): i for i, v in enumerate(cand_ids)}
    items = [int(v) for v in items]
    if len(set(items)) != len(items):
        raise DomainError(f"list repeats an item: {items}")
    try:
        return np.array([where[v] for v in items], dtype=np.int64)
    except KeyError as exc:
        raise DomainError(f"item {exc.args[0]} is not a candidate") from None


# ---------------------------------------------------------------------------
# single-user operations
# ---------------------------------------------------------------------------


def list_log_prob(policy: ScorerPolicy, user: int, cands, items) -> float:
    pos = items_to_positions(cands, items)
    return float(policy.log_prob_positions([user], np.asarray(cands)[None], pos[None, None]).value[0, 0])


def greedy_decode(policy: ScorerPolicy, user: int, cands, L: int) -> tuple[int, ...]:
    cands = np.asarray(cands, dtype=np.int64)
    pos = policy.greedy_positions([user], cands[None], L)[0]
    return tuple(int(v) for v in cands[pos])


def sample_list(policy: ScorerPolicy, user: int, cands, L: int, rng: np.random.Generator,
                temperature: float = 1.0) -> tuple[int, ...]:
    cands = np.asarray(cands, dtype=np.int64)
    pos = policy.sample_positions([user], cands[None], L, rng, temperature)[0]
    return tuple(int(v) for v in cands[pos])


def densify(policy: ScorerPolicy, user: int, cands, L: int, cap: int = DEFAULT_ENUMERATION_CAP,
            space: ListSpace | None = None) -> DensePolicy:
    cands = np.asarray(cands, dtype=np.int64)
    space = space or enumerate_list_space(len(cands), L, cap)
    lp = policy.dense_log_probs([user], cands[None], space).value[0]
    return DensePolicy(space, np.exp(lp))


def global_argmax(dense: DensePolicy, cands) -> tuple[int, ...]:
    """Exact argmax over the enumeration (first list in canonical order on ties)."""
    s = int(np.argmax(dense.probs))
    return tuple(int(v) for v in np.asarray(cands)[dense.space.lists[s]])
