"""Synthetic list rewards, the Boltzmann oracle policy, KL error, and mixture fitting."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .policy import DensePolicy, ListSpace

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# synthetic reward
# ---------------------------------------------------------------------------


@dataclass
class SyntheticRewardSpec:
    """r*(l) = sum_t w_t u(v_t, x) + sum_{s<t} I(v_s, v_t).

    ``u(v, x) = base_utility[v] + context_scale * <x, item_features[v]>``
    where ``x`` is the user's row of ``contexts``.
    """

    seed: int
    base_utility: np.ndarray
    item_features: np.ndarray
    contexts: np.ndarray
    position_weights: np.ndarray
    interaction: np.ndarray
    context_scale: float = 1.0
    _utility: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("base_utility", "item_features", "contexts", "position_weights", "interaction"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            setattr(self, name, arr)
        if not np.allclose(self.interaction, self.interaction.T, atol=0, rtol=0):
            raise ValueError("interaction matrix must be symmetric")

    @property
    def list_length(self) -> int:
        return len(self.position_weights)

    @property
    def utility(self) -> np.ndarray:
        """(n_users, n_items) item utilities."""
        if self._utility is None:
            self._utility = self.base_utility[None, :] + self.context_scale * (
                self.contexts @ self.item_features.T
            )
        return self._utility

    def rewards(self, users, lists) -> np.ndarray:
        """Vectorised r* for M lists: ``users`` (M,), ``lists`` (M, L) item ids."""
        lists = np.asarray(lists, dtype=np.int64)
        if lists.shape[1] != self.list_length:
            raise ValueError(f"lists have length {lists.shape[1]}, spec expects {self.list_length}")
        return kernels.list_reward(self.utility, np.asarray(users, dtype=np.int64), lists,
                                   self.position_weights, self.interaction)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "base_utility": self.base_utility.tolist(),
            "item_features": self.item_features.tolist(),
            "contexts": self.contexts.tolist(),
            "position_weights": self.position_weights.tolist(),
            "interaction": self.interaction.tolist(),
            "context_scale": self.context_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticRewardSpec":
        return cls(**{k: d[k] for k in ("seed", "base_utility", "item_features", "contexts",
                                         "position_weights", "interaction", "context_scale")})


def random_reward_spec(n_users: int, n_items: int, L: int, dim: int = 6, seed: int = 0,
                       context_scale: float = 1.0, interaction_density: float = 0.15,
                       interaction_scale: float = 0.8, base_scale: float = 1.0,
                       position_weights=None) -> SyntheticRewardSpec:
    rng = np.random.default_rng(seed)
    contexts = rng.normal(size=(n_users, dim)) / np.sqrt(dim)
    feats = rng.normal(size=(n_items, dim))
    base = base_scale * rng.normal(size=n_items)
    mask = np.triu(rng.random((n_items, n_items)) < interaction_density, 1)
    inter = np.where(mask, interaction_scale * rng.normal(size=(n_items, n_items)), 0.0)
    inter = inter + inter.T
    if position_weights is None:
        position_weights = np.linspace(1.0, 0.5, L)
    return SyntheticRewardSpec(seed, base, feats, contexts, np.asarray(position_weights, float),
                               inter, context_scale)


def synth_reward(spec: SyntheticRewardSpec, user: int, items) -> float:
    items = np.asarray(items, dtype=np.int64)
    if items.size != spec.list_length:
        raise ValueError("list length does not match the position weights")
    return float(spec.rewards(np.array([user]), items[None])[0])


# ---------------------------------------------------------------------------
# Boltzmann oracle and objectives
# ---------------------------------------------------------------------------


@dataclass
class BoltzmannPolicy:
    dense: DensePolicy
    tau: float
    log_Z: float


def _logsumexp(x: np.ndarray, axis=-1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def boltzmann_probs(rewards: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise softmax(r / tau) and log Z for an array of rewards (..., S)."""
    if not tau > 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    r = np.asarray(rewards, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise ValueError("rewards must be finite")
    z = r / tau
    log_Z = _logsumexp(z)
    return np.exp(z - log_Z[..., None]), log_Z


def boltzmann_policy(space: ListSpace, rewards, tau: float = 1.0) -> BoltzmannPolicy:
    probs, log_Z = boltzmann_probs(rewards, tau)
    return BoltzmannPolicy(DensePolicy(space, probs), float(tau), float(log_Z))


def entropy(probs: np.ndarray) -> float:
    p = np.asarray(probs)
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def entropy_objective(policy: DensePolicy, rewards, tau: float) -> float:
    """E_{l~pi}[r(l)] + tau * H(pi), with 0 log 0 := 0."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.shape != policy.probs.shape:
        raise ValueError("rewards must align with the policy's list space")
    return float(policy.probs @ r + tau * entropy(policy.probs))


def kl_rows(p: np.ndarray, q: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """Row-wise KL(p || q) with 0 log 0 := 0; +inf where q = 0 < p.

    ``eps`` > 0 smooths q (q + eps, renormalised) instead of returning +inf.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if eps > 0:
        q = (q + eps) / (q + eps).sum(axis=-1, keepdims=True)
    pos = p > 0
    bad = pos & (q <= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pos, p * (np.log(np.where(pos, p, 1.0)) - np.log(np.where(q > 0, q, 1.0))), 0.0)
    out = terms.sum(axis=-1)
    out = np.where(bad.any(axis=-1), np.inf, np.maximum(out, 0.0))
    return out


def kl_divergence(p: DensePolicy, q: DensePolicy, eps: float = 0.0) -> float:
    if p.space is not q.space:
        raise ValueError("policies must share a ListSpace")
    return float(kl_rows(p.probs, q.probs, eps))


# ---------------------------------------------------------------------------
# convex mixture-weight optimisation
# ---------------------------------------------------------------------------


@dataclass
class MixtureFit:
    weights: np.ndarray
    kl: float
    iterations: int
    converged: bool
    gap: float
    infinite: bool = False


def _mixture_objective(w, comps, target, neg_ent):
    m = np.tensordot(w, comps, axes=1)  # (U, S)
    pos = target > 0
    with np.errstate(divide="ignore"):
        logm = np.log(np.where(pos, m, 1.0))
    f = float(np.mean(neg_ent - np.sum(np.where(pos, target * logm, 0.0), axis=-1)))
    ratio = np.where(pos, target / np.where(m > 0, m, 1.0), 0.0)
    grad = -np.mean(np.sum(comps * ratio[None], axis=-1), axis=-1)  # (k,)
    return f, grad


def optimize_mixture_weights(components, target, max_iters: int = 10000, tol: float = 1e-10,
                             init=None) -> MixtureFit:
    """Minimise the mean over rows of KL(target || sum_i w_i components_i) on the simplex.

    ``components`` is (k, S) or (k, U, S) (or a list of DensePolicy) and
    ``target`` is (S,) or (U, S). Exponentiated-gradient steps with a
    backtracking step size; stops once the Frank-Wolfe gap, an upper bound on
    the excess KL, drops below ``tol``.
    """
    if isinstance(target, DensePolicy):
        target = target.probs
    comps = np.asarray([c.probs if isinstance(c, DensePolicy) else c for c in components], dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if target.ndim == 1:
        target = target[None]
        comps = comps[:, None, :]
    k = comps.shape[0]
    if k < 1:
        raise ValueError("need at least one component")
    if comps.shape[1:] != target.shape:
        raise ValueError("components and target must share a list space")

    covered = (comps > 0).any(axis=0)
    if np.any((target > 0) & ~covered):
        return MixtureFit(np.full(k, 1.0 / k), np.inf, 0, False, np.inf, infinite=True)

    pos = target > 0
    neg_ent = np.sum(np.where(pos, target * np.log(np.where(pos, target, 1.0)), 0.0), axis=-1)
    w = np.full(k, 1.0 / k) if init is None else np.asarray(init, dtype=np.float64)
    if k == 1:
        f, _ = _mixture_objective(w, comps, target, neg_ent)
        return MixtureFit(w, max(f, 0.0), 0, True, 0.0)

    f, g = _mixture_objective(w, comps, target, neg_ent)
    eta = 1.0
    gap = float(g @ w - g.min())
    it = 0
    for it in range(1, max_iters + 1):
        if gap <= tol:
            break
        accepted = False
        while eta > 1e-12:
            logits = np.log(np.maximum(w, 1e-300)) - eta * (g - g.min())
            w_new = np.exp(logits - logits.max())
            w_new /= w_new.sum()
            f_new, g_new = _mixture_objective(w_new, comps, target, neg_ent)
            # near the optimum f stops resolving the decrease; for a convex objective a
            # non-positive slope at the new point along the step also certifies descent
            if f_new <= f + 1e-4 * float(g @ (w_new - w)) or float(g_new @ (w_new - w)) <= 0.0:
                accepted = True
                break
            eta *= 0.5
        if not accepted:
            break
        w, f, g = w_new, f_new, g_new
        gap = float(g @ w - g.min())
        eta = min(eta * 2.0, 1e6)
    converged = gap <= tol
    if not converged:
        log.warning("mixture weights not converged after %d iterations (gap %.3g)", it, gap)
    return MixtureFit(w, max(f, 0.0), it, converged, gap)


# ---------------------------------------------------------------------------
# approximation reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("family", "k", "W", "D", "seed", "n", "kl")


@dataclass
class ApproximationReport:
    rows: list[dict] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def add(self, family: str, k: int, W: int, D: int, seed: int, kl: float, n: int = 0) -> None:
        if kl < 0:
            raise ValueError("KL must be non-negative")
        self.rows.append({"family": family, "k": int(k), "W": int(W), "D": int(D),
                          "seed": int(seed), "n": int(n), "kl": float(kl)})

    def values(self, family: str, **match) -> np.ndarray:
        return np.array([r["kl"] for r in self.rows
                         if r["family"] == family and all(r[k] == v for k, v in match.items())])

    def summary(self) -> dict:
        groups: dict[tuple, list[float]] = {}
        for r in self.rows:
            groups.setdefault((r["family"], r["k"], r["W"], r["D"], r["n"]), []).append(r["kl"])
        out = []
        for (fam, k, W, D, n), vals in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][2], kv[0][3], kv[0][4])):
            v = np.asarray(vals)
            out.append({"family": fam, "k": k, "W": W, "D": D, "n": n, "n_seeds": len(v),
                        "median": float(np.median(v)), "p10": float(np.percentile(v, 10)),
                        "p90": float(np.percentile(v, 90))})
        return {"groups": out, "notes": self.notes}

    def write(self, csv_path, json_path) -> None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow([r["family"], r["k"], r["W"], r["D"], r["seed"], r["n"], repr(r["kl"])])
        Path(json_path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
