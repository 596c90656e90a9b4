"""Generator-only and generator-evaluator baselines.

* ``g_only``: a pointwise scorer trained with binary cross-entropy on whether
  each candidate is among the user's target items; greedy top-L decoding.
* ``g_e``: the same generator proposes ``c`` sampled lists and a separately
  trained list evaluator picks the best.
* ``mg_e``: ``k`` generators (distinct seeds, widths jittered by up to 25%)
  pool their proposals for the evaluator.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .nn import autodiff as ad
from .nn.optim import make_optimizer, step as optimizer_step
from .nn.scorer import ScorerSpec, init_scorer
from .oracle import ConfigError
from .policy import FeatureStore, ScorerPolicy
from .reward import RewardModel

BASELINES = ("g_only", "g_e", "mg_e")


class ContractViolation(ValueError):
    pass


def select_best_list(evaluator, user: int, proposals) -> tuple[int, ...]:
    """Proposal with the highest evaluator value; the first one wins ties."""
    proposals = np.asarray(proposals, dtype=np.int64)
    if proposals.ndim != 2 or len(proposals) == 0:
        raise ContractViolation("select_best_list needs at least one proposal")
    vals = np.asarray(evaluator(np.full(len(proposals), int(user)), proposals))
    return tuple(int(v) for v in proposals[int(np.argmax(vals))])


@dataclass
class PointwiseConfig:
    epochs: int = 200
    batch_size: int = 50
    step_size: float = 0.01
    seed: int = 0


def pointwise_labels(users, cands, targets: dict[int, tuple[int, ...]]) -> np.ndarray:
    return np.array([np.isin(row, targets.get(int(u), ())) for u, row in zip(users, cands)], dtype=np.float64)


def train_pointwise(spec: ScorerSpec, store: FeatureStore, users, cands, labels, config: PointwiseConfig,
                    name: str = "g_only") -> ScorerPolicy:
    """Minibatch Adam on per-candidate BCE of first-step logits."""
    users = np.asarray(users, dtype=np.int64)
    cands = np.asarray(cands, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.float64)
    params = init_scorer(spec, config.seed)
    policy = ScorerPolicy(spec, params, store, step_independent=True, name=name)
    opt = make_optimizer("adam", config.step_size, params.values.size)
    rng = np.random.default_rng([config.seed, 0xB5])
    U, N = cands.shape
    for _ in range(config.epochs):
        perm = rng.permutation(U)
        for b0 in range(0, U, config.batch_size):
            rows = perm[b0 : b0 + config.batch_size]
            theta = params.tensor(requires_grad=True)
            lg = policy.logits(users[rows], cands[rows], np.zeros((len(rows), 1, N), dtype=bool),
                               np.zeros((len(rows), 1), dtype=np.int64), theta)
            loss = ad.mean(ad.bce_with_logits(ad.reshape(lg, (len(rows), N)), labels[rows]))
            params.values = optimizer_step(opt, params.values, ad.grad(loss, theta))
    return policy


def jittered_widths(widths: tuple[int, ...], k: int) -> list[tuple[int, ...]]:
    """Generator 0 keeps ``widths``; the others scale them by factors spread over [0.75, 1.25]."""
    factors = [1.0] + (list(np.linspace(0.75, 1.25, k - 1)) if k > 2 else [0.75] * (k - 1))
    return [tuple(max(1, int(round(w * f))) for w in widths) for f in factors]


@dataclass
class BaselineArtifact:
    kind: str
    generators: list[ScorerPolicy]
    evaluator: RewardModel | None = None
    proposals: int = 1
    seed: int = 0
    temperature: float = 1.0
    meta: dict = field(default_factory=dict)

    def propose(self, users, cands, L: int) -> np.ndarray:
        """(U, k*c, L) item-id proposals; sampling is keyed on (seed, user)."""
        users = np.asarray(users, dtype=np.int64)
        cands = np.asarray(cands, dtype=np.int64)
        out = []
        for r, u in enumerate(users):
            rows = []
            for gi, gen in enumerate(self.generators):
                rng = np.random.default_rng([self.seed, int(u), gi])
                pos = gen.sample_positions(np.full(self.proposals, u), np.repeat(cands[r : r + 1], self.proposals, 0),
                                           L, rng, self.temperature)
                rows.append(cands[r][pos])
            out.append(np.concatenate(rows))
        return np.stack(out)

    def decode(self, users, cands, L: int) -> np.ndarray:
        if self.kind == "g_only":
            return self.generators[0].decode(users, cands, L)
        props = self.propose(users, cands, L)
        return np.array([select_best_list(self.evaluator, u, p) for u, p in zip(users, props)], dtype=np.int64)

    def item_scores(self, users, cands) -> np.ndarray:
        return np.mean([g.first_step_scores(users, cands) for g in self.generators], axis=0)


def train_baseline(kind: str, spec: ScorerSpec, store: FeatureStore, users, cands, targets: dict,
                   config: PointwiseConfig, evaluator: RewardModel | None = None, proposals: int = 8,
                   k: int = 1) -> BaselineArtifact:
    """Train one of ``g_only`` / ``g_e`` / ``mg_e``.

    ``targets`` holds the per-user relevant items used as pointwise labels;
    ``evaluator`` is an independently trained list-value model (required for
    the evaluator-based kinds).
    """
    if kind not in BASELINES:
        raise ConfigError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
    if kind == "mg_e" and k < 1:
        raise ConfigError("mg_e needs k >= 1 generators")
    if kind != "g_only" and evaluator is None:
        raise ConfigError(f"{kind} needs a list evaluator")
    if proposals < 1:
        raise ConfigError("proposal count must be >= 1")
    labels = pointwise_labels(users, cands, targets)
    n_gen = k if kind == "mg_e" else 1
    gens = []
    for gi, widths in enumerate(jittered_widths(spec.hidden_widths, n_gen)):
        gspec = replace(spec, hidden_widths=widths)
        gens.append(train_pointwise(gspec, store, users, cands, labels, replace(config, seed=config.seed + gi),
                                    name=f"{kind}[{gi}]"))
    return BaselineArtifact(kind, gens, None if kind == "g_only" else evaluator, proposals, config.seed)
