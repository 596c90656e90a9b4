"""Biased matrix-factorization retriever trained by alternating least squares.

Prediction is ``mu + b_u + b_i + <p_u, q_i>``. The training set is every
observed (user, item) pair with target 1 plus, per user, a seeded uniform
sample of unobserved items with target 0. The objective is the squared error
plus ``reg`` times the squared norm of all vectors and per-user/per-item
biases; ``mu`` is fixed at the target mean. Each half-step solves its block
exactly, so the objective never increases.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .data import InteractionTable
from .oracle import ConfigError


class ColdStartError(KeyError):
    def __init__(self, user: int):
        super().__init__(f"user {user} is unknown to the retriever")
        self.user = user


@dataclass
class MFParams:
    user_vectors: np.ndarray
    item_vectors: np.ndarray
    user_bias: np.ndarray
    item_bias: np.ndarray
    global_bias: float
    loss_history: tuple[float, ...] = ()

    def __post_init__(self):
        self.user_vectors = np.asarray(self.user_vectors, dtype=np.float64)
        self.item_vectors = np.asarray(self.item_vectors, dtype=np.float64)
        self.user_bias = np.asarray(self.user_bias, dtype=np.float64)
        self.item_bias = np.asarray(self.item_bias, dtype=np.float64)
        if self.user_vectors.shape[1] != self.item_vectors.shape[1]:
            raise ValueError("user and item vectors differ in dimension")
        if len(self.user_bias) != len(self.user_vectors) or len(self.item_bias) != len(self.item_vectors):
            raise ValueError("bias lengths do not match vector counts")
        for arr in (self.user_vectors, self.item_vectors, self.user_bias, self.item_bias):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite MF parameter")

    @property
    def n_users(self) -> int:
        return len(self.user_vectors)

    @property
    def n_items(self) -> int:
        return len(self.item_vectors)

    def scores(self, user: int) -> np.ndarray:
        if not 0 <= user < self.n_users:
            raise ColdStartError(user)
        return self.global_bias + self.user_bias[user] + self.item_bias + self.item_vectors @ self.user_vectors[user]

    def user_features(self) -> np.ndarray:
        return self.user_vectors.copy()

    def item_features(self) -> np.ndarray:
        return np.column_stack([self.item_vectors, self.item_bias])

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, user_vectors=self.user_vectors, item_vectors=self.item_vectors,
                     user_bias=self.user_bias, item_bias=self.item_bias,
                     global_bias=np.array(self.global_bias), loss_history=np.array(self.loss_history))

    @classmethod
    def load(cls, path) -> "MFParams":
        with np.load(path) as z:
            return cls(z["user_vectors"], z["item_vectors"], z["user_bias"], z["item_bias"],
                       float(z["global_bias"]), tuple(float(v) for v in z["loss_history"]))


def training_pairs(train: InteractionTable, negatives_per_positive: int, seed: int):
    """Deduplicated positives plus seeded negatives: arrays (users, items, targets)."""
    pos = np.unique(np.stack([train.users, train.items], axis=1), axis=0)
    rng = np.random.default_rng(seed)
    users, items, targets = [pos[:, 0]], [pos[:, 1]], [np.ones(len(pos))]
    if negatives_per_positive > 0:
        cut = np.flatnonzero(np.diff(pos[:, 0])) + 1
        for block in np.split(pos, cut):
            if not len(block):
                continue
            u = block[0, 0]
            free = np.setdiff1d(np.arange(train.n_items), block[:, 1])
            n = min(len(free), negatives_per_positive * len(block))
            if n == 0:
                continue
            neg = np.sort(rng.choice(free, size=n, replace=False))
            users.append(np.full(n, u))
            items.append(neg)
            targets.append(np.zeros(n))
    return np.concatenate(users), np.concatenate(items), np.concatenate(targets)


def _csr(rows, cols, vals, n_rows):
    order = np.lexsort((cols, rows))
    indptr = np.concatenate(([0], np.cumsum(np.bincount(rows, minlength=n_rows))))
    return indptr, cols[order], vals[order], order


def mf_objective(params: MFParams, users, items, targets, reg: float) -> float:
    pred = (params.global_bias + params.user_bias[users] + params.item_bias[items]
            + np.einsum("md,md->m", params.user_vectors[users], params.item_vectors[items]))
    penalty = (np.sum(params.user_vectors**2) + np.sum(params.item_vectors**2)
               + np.sum(params.user_bias**2) + np.sum(params.item_bias**2))
    return float(np.sum((targets - pred) ** 2) + reg * penalty)


def train_mf(train: InteractionTable, d: int, epochs: int, reg: float = 0.1,
             negatives_per_positive: int = 4, seed: int = 0, init_scale: float = 0.1) -> MFParams:
    """Fit biased MF by ALS; ``loss_history`` holds the objective before and after every epoch."""
    if d <= 0:
        raise ConfigError(f"MF dimension must be positive, got {d}")
    if epochs < 0:
        raise ConfigError(f"epochs must be >= 0, got {epochs}")
    if reg <= 0:
        raise ConfigError(f"reg must be positive, got {reg}")
    if len(train) == 0:
        raise ValueError("cannot train a retriever on an empty table")
    users, items, targets = training_pairs(train, negatives_per_positive, seed)
    rng = np.random.default_rng(seed + 1)
    P = init_scale * rng.normal(size=(train.n_users, d))
    Q = init_scale * rng.normal(size=(train.n_items, d))
    bu = np.zeros(train.n_users)
    bi = np.zeros(train.n_items)
    mu = float(targets.mean())
    params = MFParams(P, Q, bu, bi, mu)
    history = [mf_objective(params, users, items, targets, reg)]

    u_ptr, u_cols, _, u_order = _csr(users, items, targets, train.n_users)
    i_ptr, i_cols, _, i_order = _csr(items, users, targets, train.n_items)
    for _ in range(epochs):
        # users: regress (t - mu - b_i) on [q_i, 1]
        resid = (targets - mu - bi[items])[u_order]
        sol = kernels.als_solve_rows(u_ptr, u_cols, resid, np.column_stack([Q, np.ones(len(Q))]), reg)
        P, bu = sol[:, :d].copy(), sol[:, d].copy()
        # items: regress (t - mu - b_u) on [p_u, 1]
        resid = (targets - mu - bu[users])[i_order]
        sol = kernels.als_solve_rows(i_ptr, i_cols, resid, np.column_stack([P, np.ones(len(P))]), reg)
        Q, bi = sol[:, :d].copy(), sol[:, d].copy()
        params = MFParams(P, Q, bu, bi, mu)
        history.append(mf_objective(params, users, items, targets, reg))
    params.loss_history = tuple(history)
    return params


@dataclass
class CandidateSet:
    user_id: int
    items: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        if len(np.unique(self.items)) != len(self.items):
            raise ValueError("candidate set repeats an item")
        if np.any(np.diff(self.scores) > 0):
            raise ValueError("candidate scores must be non-increasing")


def _rank(scores: np.ndarray, ids: np.ndarray) -> np.ndarray:
    # descending score, ties by lowest id
    return np.lexsort((ids, -scores))


def retrieve_topn(params: MFParams, user_id: int, N: int, exclusions=()) -> CandidateSet:
    scores = params.scores(int(user_id))
    ids = np.arange(params.n_items)
    if len(exclusions):
        keep = np.ones(params.n_items, dtype=bool)
        keep[np.asarray(list(exclusions), dtype=np.int64)] = False
        ids = ids[keep]
    if len(ids) < N:
        raise ValueError(f"only {len(ids)} items remain for user {user_id}, need {N}")
    top = ids[_rank(scores[ids], ids)[:N]]
    return CandidateSet(int(user_id), top, scores[top])


def inject_ground_truth(cs: CandidateSet, params: MFParams, truth) -> CandidateSet:
    """Swap the lowest-scoring non-truth candidates for missing truth items, then re-rank."""
    truth = [int(v) for v in truth]
    members = set(cs.items.tolist())
    missing = [v for v in truth if v not in members]
    if not missing:
        return cs
    tset = set(truth)
    items = list(cs.items.tolist())
    removable = [k for k in range(len(items) - 1, -1, -1) if items[k] not in tset]
    if len(missing) > len(removable):
        raise ValueError("candidate set too small to hold the ground truth")
    for k, v in zip(removable, missing):
        items[k] = v
    items = np.array(items, dtype=np.int64)
    scores = params.scores(cs.user_id)[items]
    order = _rank(scores, items)
    return CandidateSet(cs.user_id, items[order], scores[order])


def candidate_matrix(params: MFParams, users, N: int, train: InteractionTable | None = None,
                     truth: dict | None = None, ensure_ground_truth_in_candidates: bool = False) -> np.ndarray:
    """(U, N) candidate item ids, excluding each user's train items when ``train`` is given."""
    seen: dict[int, np.ndarray] = {}
    if train is not None:
        for u, seq in train.sequences().items():
            seen[u] = np.unique(seq)
    out = np.empty((len(users), N), dtype=np.int64)
    for r, u in enumerate(users):
        u = int(u)
        cs = retrieve_topn(params, u, N, seen.get(u, ()))
        if ensure_ground_truth_in_candidates:
            if truth is None or u not in truth:
                raise ValueError(f"no ground truth available for user {u}")
            cs = inject_ground_truth(cs, params, truth[u])
        out[r] = cs.items
    return out


def write_candidates(path, params: MFParams, users, cands: np.ndarray) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("user_id", "rank", "item_id", "score"))
    for u, row in zip(users, cands):
        s = params.scores(int(u))
        for rank, v in enumerate(row):
            w.writerow((int(u), rank, int(v), repr(float(s[v]))))
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_candidates(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    users = sorted({int(r["user_id"]) for r in rows})
    N = max(int(r["rank"]) for r in rows) + 1 if rows else 0
    pos = {u: k for k, u in enumerate(users)}
    out = np.full((len(users), N), -1, dtype=np.int64)
    for r in rows:
        out[pos[int(r["user_id"])], int(r["rank"])] = int(r["item_id"])
    return np.array(users, dtype=np.int64), out
