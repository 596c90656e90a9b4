"""Feed-forward scorers over item embeddings.

Two heads share one parameter layout scheme:

``per_item_score``
    One logit per candidate given the user context and a step state (mean of
    the already-chosen candidates' representations plus a one-hot step index).
``list_value``
    One scalar per whole list: per-position hidden units are mean-pooled and
    passed through the remaining layers. Use depth >= 2 for item-item
    interactions to be expressible.

Candidate representation = learned id embedding (if ``n_items``) plus a
learned projection of the item features (if ``item_feature_dim``).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

HEADS = ("per_item_score", "list_value")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ScorerSpec:
    embedding_dim: int
    hidden_widths: tuple[int, ...]
    activation: str = "relu"
    context_dim: int = 0
    item_feature_dim: int = 0
    n_items: int = 0
    list_length: int = 1
    head: str = "per_item_score"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if len(self.hidden_widths) < 1 or min(self.hidden_widths) < 1:
            raise ValueError(f"hidden widths must be non-empty and >= 1: {self.hidden_widths}")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.n_items <= 0 and self.item_feature_dim <= 0:
            raise ValueError("scorer needs item ids (n_items) or item features")
        if self.list_length < 1:
            raise ValueError("list_length must be >= 1")

    @property
    def width(self) -> int:
        return max(self.hidden_widths)

    @property
    def depth(self) -> int:
        return len(self.hidden_widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScorerSpec":
        return cls(**{**d, "hidden_widths": tuple(d["hidden_widths"])})


def capacity(spec: ScorerSpec) -> tuple[int, int]:
    """Width and depth complexity: (max hidden width, number of hidden layers)."""
    return spec.width, spec.depth


@dataclass(frozen=True)
class Entry:
    name: str
    shape: tuple[int, ...]
    start: int
    fan_in: int
    is_bias: bool

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class Layout:
    entries: tuple[Entry, ...]

    @property
    def size(self) -> int:
        if not self.entries:
            return 0
        last = self.entries[-1]
        return last.start + last.size

    def __getitem__(self, name: str) -> Entry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(e.name == name for e in self.entries)

    def describe(self) -> list[dict]:
        return [
            {"name": e.name, "shape": list(e.shape), "start": e.start, "fan_in": e.fan_in}
            for e in self.entries
        ]


def build_layout(spec: ScorerSpec) -> Layout:
    e = spec.embedding_dim
    dc, df, L = spec.context_dim, spec.item_feature_dim, spec.list_length
    W = spec.hidden_widths
    raw: list[tuple[str, tuple[int, ...], int, bool]] = []
    if spec.n_items > 0:
        raw.append(("item_embedding", (spec.n_items, e), e, False))
    if df > 0:
        raw.append(("item_projection", (df, e), df, False))
    if spec.head == "per_item_score":
        fan = dc + 2 * e + L
        if dc > 0:
            raw.append(("hidden0.context", (dc, W[0]), fan, False))
        raw.append(("hidden0.candidate", (e, W[0]), fan, False))
        raw.append(("hidden0.state", (e, W[0]), fan, False))
        raw.append(("hidden0.step", (L, W[0]), fan, False))
    else:
        fan = dc + e + L
        if dc > 0:
            raw.append(("hidden0.context", (dc, W[0]), fan, False))
        raw.append(("hidden0.item", (e, W[0]), fan, False))
        raw.append(("hidden0.position", (L, W[0]), fan, False))
    raw.append(("hidden0.bias", (W[0],), fan, True))
    for i in range(1, len(W)):
        raw.append((f"hidden{i}.weight", (W[i - 1], W[i]), W[i - 1], False))
        raw.append((f"hidden{i}.bias", (W[i],), W[i - 1], True))
    raw.append(("output.weight", (W[-1],), W[-1], False))
    if spec.head == "list_value":
        raw.append(("output.bias", (1,), W[-1], True))
    entries = []
    start = 0
    for name, shape, fan_in, is_bias in raw:
        entries.append(Entry(name, shape, start, fan_in, is_bias))
        start += int(np.prod(shape))
    return Layout(tuple(entries))


@dataclass
class ParameterVector:
    values: np.ndarray
    layout: Layout
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.layout.size,):
            raise ShapeError(f"theta has {self.values.size} entries, layout needs {self.layout.size}")

    def tensor(self, requires_grad: bool = False) -> Tensor:
        return Tensor(self.values, requires_grad=requires_grad)

    def named(self, name: str) -> np.ndarray:
        e = self.layout[name]
        return self.values[e.start : e.start + e.size].reshape(e.shape)

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.layout, self.seed, dict(self.meta))


def init_scorer(spec: ScorerSpec, seed: int) -> ParameterVector:
    """Gaussian weights with std 1/sqrt(fan_in), zero biases."""
    layout = build_layout(spec)
    rng = np.random.default_rng(seed)
    theta = np.zeros(layout.size)
    for e in layout.entries:
        if e.is_bias:
            continue
        theta[e.start : e.start + e.size] = rng.normal(0.0, 1.0 / np.sqrt(e.fan_in), e.size)
    return ParameterVector(theta, layout, seed)


def _views(theta: Tensor, layout: Layout) -> dict[str, Tensor]:
    return {e.name: ad.flat_slice(theta, e.start, e.shape) for e in layout.entries}


def _item_repr(p, spec, item_ids, item_feats):
    rep = None
    if spec.n_items > 0:
        rep = ad.take_rows(p["item_embedding"], item_ids)
    if spec.item_feature_dim > 0:
        proj = ad.matmul(item_feats, p["item_projection"])
        rep = proj if rep is None else rep + proj
    return rep


def _check_dims(spec, context, item_ids, item_feats):
    if spec.context_dim > 0 and (context is None or context.shape[-1] != spec.context_dim):
        got = None if context is None else context.shape[-1]
        raise ShapeError(f"context dim {got} != spec.context_dim {spec.context_dim}")
    if spec.item_feature_dim > 0:
        if item_feats is None or item_feats.shape[-1] != spec.item_feature_dim:
            got = None if item_feats is None else item_feats.shape[-1]
            raise ShapeError(f"item feature dim {got} != spec.item_feature_dim {spec.item_feature_dim}")
    if spec.n_items > 0 and item_ids.size and (item_ids.min() < 0 or item_ids.max() >= spec.n_items):
        raise ShapeError("item id outside the embedding vocabulary")


def step_logits(
    theta: Tensor,
    spec: ScorerSpec,
    layout: Layout,
    context: np.ndarray | None,
    cand_ids: np.ndarray,
    cand_feats: np.ndarray | None,
    chosen: np.ndarray,
    step: np.ndarray,
) -> Tensor:
    """Raw (unmasked) per-candidate logits, shape (U, P, N).

    ``chosen`` is a boolean (U, P, N) mask of already-chosen candidates for
    each of P step states; ``step`` is the (U, P) step index.
    """
    if spec.head != "per_item_score":
        raise ValueError("step_logits needs a per_item_score head")
    cand_ids = np.asarray(cand_ids, dtype=np.int64)
    _check_dims(spec, context, cand_ids, cand_feats)
    U, N = cand_ids.shape
    p = _views(theta, layout)
    rep = _item_repr(p, spec, cand_ids, cand_feats)  # (U, N, e)

    chosen = np.asarray(chosen, dtype=np.float64)
    counts = np.maximum(chosen.sum(axis=-1, keepdims=True), 1.0)
    pool = chosen / counts  # (U, P, N)
    state = ad.matmul(pool, rep)  # (U, P, e)

    a = p["hidden0.bias"]
    if spec.context_dim > 0:
        a = ad.matmul(context, p["hidden0.context"]) + a  # (U, W)
    else:
        a = a + np.zeros((U, 1))
    b = ad.matmul(rep, p["hidden0.candidate"])  # (U, N, W)
    onehot = np.eye(spec.list_length)[np.asarray(step, dtype=np.int64)]  # (U, P, L)
    c = ad.matmul(state, p["hidden0.state"]) + ad.matmul(onehot, p["hidden0.step"])  # (U, P, W)

    if spec.depth == 1:
        return ad.fused_hidden(a, b, c, p["output.weight"], spec.activation)

    z = (
        ad.reshape(a, (U, 1, 1, a.shape[-1]))
        + ad.expand_dims(b, 1)
        + ad.expand_dims(c, 2)
    )
    h = ad.activation(z, spec.activation)
    for i in range(1, spec.depth):
        h = ad.activation(ad.matmul(h, p[f"hidden{i}.weight"]) + p[f"hidden{i}.bias"], spec.activation)
    return ad.matmul(h, p["output.weight"])


def list_value(
    theta: Tensor,
    spec: ScorerSpec,
    layout: Layout,
    context: np.ndarray | None,
    item_ids: np.ndarray,
    item_feats: np.ndarray | None,
) -> Tensor:
    """Scalar value for each of M lists: ``item_ids`` is (M, L)."""
    if spec.head != "list_value":
        raise ValueError("list_value needs a list_value head")
    item_ids = np.asarray(item_ids, dtype=np.int64)
    _check_dims(spec, context, item_ids, item_feats)
    M, L = item_ids.shape
    if L != spec.list_length:
        raise ShapeError(f"list length {L} != spec.list_length {spec.list_length}")
    p = _views(theta, layout)
    rep = _item_repr(p, spec, item_ids, item_feats)  # (M, L, e)
    z = ad.matmul(rep, p["hidden0.item"]) + p["hidden0.position"] + p["hidden0.bias"]
    if spec.context_dim > 0:
        z = z + ad.expand_dims(ad.matmul(context, p["hidden0.context"]), 1)
    h = ad.mean(ad.activation(z, spec.activation), axis=1)  # (M, W)
    for i in range(1, spec.depth):
        h = ad.activation(ad.matmul(h, p[f"hidden{i}.weight"]) + p[f"hidden{i}.bias"], spec.activation)
    return ad.matmul(h, p["output.weight"]) + p["output.bias"]


def forward_scores(
    params: ParameterVector,
    spec: ScorerSpec,
    context: np.ndarray | None,
    cand_ids: np.ndarray,
    cand_feats: np.ndarray | None,
    chosen: np.ndarray,
) -> np.ndarray:
    """Per-candidate scores for a single step state; chosen candidates get -inf.

    ``context`` is (dc,), ``cand_ids`` (N,), ``cand_feats`` (N, df) and
    ``chosen`` a boolean (N,) mask. The step index is the number chosen.
    """
    cand_ids = np.asarray(cand_ids, dtype=np.int64)
    if cand_ids.size < 1:
        raise ShapeError("need at least one candidate")
    chosen = np.asarray(chosen, dtype=bool)
    ctx = None if context is None else np.asarray(context, dtype=np.float64)[None]
    feats = None if cand_feats is None else np.asarray(cand_feats, dtype=np.float64)[None]
    step = np.array([[min(int(chosen.sum()), spec.list_length - 1)]])
    out = step_logits(
        params.tensor(), spec, params.layout, ctx, cand_ids[None], feats, chosen[None, None], step
    ).value[0, 0]
    return np.where(chosen, -np.inf, out)


# ---------------------------------------------------------------------------
# checkpoints: npz container + JSON manifest
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ParameterVector, spec: ScorerSpec, extra: dict | None = None) -> None:
    from pathlib import Path

    path = Path(path)
    header = {
        "version": CHECKPOINT_VERSION,
        "spec": spec.to_dict(),
        "layout": params.layout.describe(),
        "seed": params.seed,
        "meta": params.meta,
        **(extra or {}),
    }
    with open(path, "wb") as fh:
        np.savez(fh, theta=params.values, header=np.array(json.dumps(header, sort_keys=True)))
    W, D = capacity(spec)
    manifest = {"version": CHECKPOINT_VERSION, "spec": spec.to_dict(), "capacity": {"W": W, "D": D},
                "n_parameters": int(params.values.size), "seed": params.seed}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[ParameterVector, ScorerSpec, dict]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        theta = z["theta"]
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    spec = ScorerSpec.from_dict(header["spec"])
    params = ParameterVector(theta, build_layout(spec), header.get("seed"), header.get("meta", {}))
    return params, spec, header
