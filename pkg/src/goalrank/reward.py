"""List reward: simulated feedback, a learned list-value model, and keyed bias injection.

A reward function here is any callable ``f(users, lists) -> values`` taking
(M,) user ids and (M, L) item ids and returning (M,) floats.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import kernels
from .nn import autodiff as ad
from .nn.optim import make_optimizer, step as optimizer_step
from .nn.scorer import ParameterVector, ScorerSpec, init_scorer, list_value, load_checkpoint, save_checkpoint
from .oracle import ConfigError, SyntheticRewardSpec
from .policy import FeatureStore

log = logging.getLogger(__name__)

RewardFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


class VocabularyError(KeyError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def dcg_gain(lists: np.ndarray, relevant: list[set[int]]) -> np.ndarray:
    lists = np.asarray(lists, dtype=np.int64)
    disc = 1.0 / np.log2(np.arange(lists.shape[1]) + 2.0)
    hits = np.array([[int(v) in rel for v in row] for row, rel in zip(lists, relevant)], dtype=np.float64)
    return hits.reshape(lists.shape) @ disc


def simulate_feedback(mode: str, users, lists, *, world: SyntheticRewardSpec | None = None,
                      truth: dict[int, tuple[int, ...]] | None = None, noise_scale: float = 0.0,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """Feedback for exposure ``lists`` (M, L) shown to ``users`` (M,).

    ``oracle``: r*(l) from ``world`` plus gaussian noise of ``noise_scale``.
    ``relevance``: log2-discounted count of items in the user's ``truth``.
    """
    users = np.asarray(users, dtype=np.int64)
    lists = np.asarray(lists, dtype=np.int64)
    if mode == "oracle":
        if world is None:
            raise ConfigError("oracle feedback needs a synthetic reward spec")
        r = world.rewards(users, lists)
        if noise_scale > 0:
            if rng is None:
                raise ConfigError("noisy oracle feedback needs an rng")
            r = r + noise_scale * rng.normal(size=r.shape)
        return r
    if mode == "relevance":
        if truth is None:
            raise ConfigError("relevance feedback needs ground truth")
        return dcg_gain(lists, [set(truth[int(u)]) for u in users])
    raise ConfigError(f"unknown feedback mode {mode!r}")


@dataclass
class FeedbackRecords:
    users: np.ndarray
    lists: np.ndarray
    feedback: np.ndarray

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.lists = np.asarray(self.lists, dtype=np.int64)
        self.feedback = np.asarray(self.feedback, dtype=np.float64)
        if not (len(self.users) == len(self.lists) == len(self.feedback)):
            raise ValueError("feedback record columns differ in length")
        if not np.all(np.isfinite(self.feedback)):
            raise ValueError("non-finite feedback")

    def __len__(self) -> int:
        return len(self.users)

    def take(self, idx) -> "FeedbackRecords":
        return FeedbackRecords(self.users[idx], self.lists[idx], self.feedback[idx])


@dataclass
class RewardModel:
    """A ``list_value`` scorer over fixed user/item features."""

    spec: ScorerSpec
    params: ParameterVector
    store: FeatureStore

    def predict(self, users, lists, theta: ad.Tensor | None = None) -> ad.Tensor:
        users = np.asarray(users, dtype=np.int64)
        lists = np.asarray(lists, dtype=np.int64)
        if lists.size and (lists.min() < 0 or lists.max() >= self.spec.n_items):
            bad = lists[(lists < 0) | (lists >= self.spec.n_items)][0]
            raise VocabularyError(f"item {int(bad)} is outside the reward model vocabulary")
        theta = self.params.tensor() if theta is None else theta
        return list_value(theta, self.spec, self.params.layout, self.store.context(users), lists,
                          self.store.items(lists))

    def __call__(self, users, lists) -> np.ndarray:
        return self.predict(users, lists).value

    def save(self, path) -> None:
        save_checkpoint(path, self.params, self.spec)

    @classmethod
    def load(cls, path, store: FeatureStore) -> "RewardModel":
        params, spec, _ = load_checkpoint(path)
        return cls(spec, params, store)


def predict_reward(model: RewardModel, users, lists) -> np.ndarray:
    return model(users, lists)


@dataclass
class RewardCurve:
    rows: list[tuple[int, float, float]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("epoch", "train_mse", "heldout_mse"))
        for e, tr, ho in self.rows:
            w.writerow((e, repr(tr), repr(ho)))
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def _mse(model, theta, rec: FeedbackRecords):
    pred = model.predict(rec.users, rec.lists, theta)
    return ad.mean(ad.square(pred - rec.feedback))


def train_reward_model(records: FeedbackRecords, spec: ScorerSpec, store: FeatureStore, *, epochs: int = 200,
                       step_size: float = 0.01, seed: int = 0, heldout_fraction: float = 0.2,
                       monotone: bool = True) -> tuple[RewardModel, RewardCurve]:
    """Full-batch Adam on mean squared error.

    With ``monotone`` a step that raises the training loss is rejected
    (parameters and moments restored) and the step size halved, so the
    recorded training MSE never increases. If halving alone stalls, the
    moments are restarted. Accepted steps regrow the step size toward
    ``step_size``. A loss above 1000x the initial
    value aborts with :class:`TrainingDiverged`.
    """
    if len(records) < 1:
        raise ValueError("reward model needs at least one record")
    if spec.head != "list_value":
        raise ConfigError("reward model needs a list_value head")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    n_ho = int(np.floor(heldout_fraction * len(records))) if len(records) > 1 else 0
    held, train = records.take(np.sort(order[:n_ho])), records.take(np.sort(order[n_ho:]))
    params = init_scorer(spec, seed)
    # start the output bias at the mean target so the first epochs fit structure, not the offset
    e = params.layout["output.bias"]
    params.values[e.start] = float(np.mean(train.feedback)) if len(train) else 0.0
    model = RewardModel(spec, params, store)

    def heldout_mse():
        return float(_mse(model, None, held).value) if len(held) else float("nan")

    loss = float(_mse(model, None, train).value)
    initial = loss
    curve = RewardCurve([(0, loss, heldout_mse())])
    opt = make_optimizer("adam", step_size, params.values.size)
    for epoch in range(1, epochs + 1):
        theta = params.tensor(requires_grad=True)
        g = ad.grad(_mse(model, theta, train), theta)
        before = params.values
        saved = (opt.m.copy(), opt.v.copy(), opt.t)
        while True:
            params.values = optimizer_step(opt, before, g)
            new = float(_mse(model, None, train).value)
            if not np.isfinite(new) or new > 1e3 * max(initial, 1e-300):
                if not monotone:
                    raise TrainingDiverged(f"epoch {epoch}: loss {new:.4g} exceeds 1000x initial {initial:.4g}")
            if not monotone or new <= loss:
                break
            params.values = before
            opt.step_size *= 0.5
            if opt.step_size < 1e-3 * step_size:
                # stale momentum need not point downhill: restart the moments so the retry is a
                # sign-of-gradient step, which descends once the step is small enough
                saved = (np.zeros_like(opt.m), np.zeros_like(opt.v), 0)
            opt.m, opt.v, opt.t = saved[0].copy(), saved[1].copy(), saved[2]
            if opt.step_size < 1e-12:
                new = loss
                break
        if new < loss:
            opt.step_size = min(step_size, opt.step_size * 1.5)
        loss = new
        curve.rows.append((epoch, loss, heldout_mse()))
    return model, curve


# ---------------------------------------------------------------------------
# bias injection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BiasSpec:
    lam: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0 or not np.isfinite(self.lam):
            raise ConfigError(f"bias level must lie in [0, 1], got {self.lam}")


def keyed_noise(seed: int, users, lists) -> np.ndarray:
    """Standard normal per (user, list content); a pure function of its arguments."""
    return kernels.keyed_normal(seed, np.asarray(users, dtype=np.int64), np.asarray(lists, dtype=np.int64))


def inject_bias(base: RewardFn, spec: BiasSpec) -> RewardFn:
    """``(1 - lam) * base + lam * eps`` with ``eps`` keyed on the list content."""
    if spec.lam == 0.0:
        return base

    def biased(users, lists):
        users = np.asarray(users, dtype=np.int64)
        lists = np.asarray(lists, dtype=np.int64)
        out = keyed_noise(spec.seed, users, lists) * spec.lam
        if spec.lam < 1.0:
            out = out + (1.0 - spec.lam) * np.asarray(base(users, lists), dtype=np.float64)
        return out

    return biased


def world_reward(world: SyntheticRewardSpec) -> RewardFn:
    return world.rewards
