"""List metrics and offline policy evaluation.

Hit ratio is recall of the ground truth (``|rec & gt| / |gt|``). NDCG uses
binary gains and a log2 discount; MAP is truncated at L and normalised by
``min(L, |gt|)``. AUC is pointwise over the candidate set using first-step
scores, with ties counted as one half.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

METRICS = ("hit", "ndcg", "map", "f1", "auc")


def hit_ratio_at_l(rec, gt) -> float:
    gt = set(int(v) for v in gt)
    if not gt:
        raise ValueError("ground truth is empty")
    return len(gt.intersection(int(v) for v in rec)) / len(gt)


def ndcg_at_l(rec, gt, L: int | None = None) -> float:
    gt = set(int(v) for v in gt)
    if not gt:
        raise ValueError("ground truth is empty")
    rec = list(rec)[: L if L is not None else len(rec)]
    L = len(rec) if L is None else L
    dcg = sum(1.0 / np.log2(t + 2) for t, v in enumerate(rec) if int(v) in gt)
    idcg = sum(1.0 / np.log2(t + 2) for t in range(min(L, len(gt))))
    return float(dcg / idcg)


def map_at_l(rec, gt, L: int | None = None) -> float:
    gt = set(int(v) for v in gt)
    if not gt:
        raise ValueError("ground truth is empty")
    rec = list(rec)[: L if L is not None else len(rec)]
    L = len(rec) if L is None else L
    hits, acc = 0, 0.0
    for t, v in enumerate(rec):
        if int(v) in gt:
            hits += 1
            acc += hits / (t + 1)
    return acc / min(L, len(gt))


def f1_at_l(rec, gt, L: int | None = None) -> float:
    gt = set(int(v) for v in gt)
    if not gt:
        raise ValueError("ground truth is empty")
    rec = list(rec)[: L if L is not None else len(rec)]
    L = len(rec) if L is None else L
    n = len(gt.intersection(int(v) for v in rec))
    if n == 0:
        return 0.0
    precision, recall = n / L, n / len(gt)
    return 2 * precision * recall / (precision + recall)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; raises ValueError when only one class is present."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    r = _average_ranks(scores)
    return float((r[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    """Macro-averaged list metrics plus the per-user rows they came from.

    ``per_user[m]`` maps user id to value; AUC may cover fewer users than the
    list metrics (single-class candidate sets are excluded and counted). A
    report read back from JSON written without per-user rows keeps only the
    stored ``(value, n_users)`` aggregates.
    """

    L: int
    per_user: dict[str, dict[int, float]]
    config: dict = field(default_factory=dict)
    auc_excluded: int = 0
    aggregates: dict[str, tuple[float, int]] | None = None

    def value(self, metric: str) -> float:
        if self.aggregates is not None:
            return float(self.aggregates[metric][0])
        vals = list(self.per_user[metric].values())
        return float(np.mean(vals)) if vals else float("nan")

    def n_users(self, metric: str) -> int:
        if self.aggregates is not None:
            return int(self.aggregates[metric][1])
        return len(self.per_user[metric])

    def summary(self) -> dict[str, float]:
        return {m: self.value(m) for m in METRICS}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("metric", "value", "n_users"))
        for m in METRICS:
            w.writerow((f"{m}@{self.L}" if m != "auc" else m, repr(self.value(m)), self.n_users(m)))
        return buf.getvalue()

    def to_json(self, per_user: bool = False) -> str:
        d = {
            "L": self.L,
            "metrics": {m: self.value(m) for m in METRICS},
            "n_users": {m: self.n_users(m) for m in METRICS},
            "auc_excluded": self.auc_excluded,
            "config": self.config,
        }
        if per_user:
            d["per_user"] = {m: {str(u): v for u, v in sorted(self.per_user[m].items())} for m in METRICS}
        return json.dumps(d, indent=1, sort_keys=True) + "\n"

    def write(self, csv_path, json_path=None, per_user: bool = False) -> None:
        Path(csv_path).write_text(self.to_csv(), encoding="utf-8")
        if json_path is not None:
            Path(json_path).write_text(self.to_json(per_user), encoding="utf-8")

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        if "per_user" not in d:
            agg = {m: (d["metrics"][m], d["n_users"][m]) for m in METRICS}
            return cls(d["L"], {m: {} for m in METRICS}, d.get("config", {}), d.get("auc_excluded", 0), agg)
        per_user = {m: {int(u): v for u, v in d["per_user"][m].items()} for m in METRICS}
        return cls(d["L"], per_user, d.get("config", {}), d.get("auc_excluded", 0))


def evaluate_lists(users, lists: np.ndarray, cands: np.ndarray, item_scores: np.ndarray | None,
                   truth: dict[int, tuple[int, ...]], L: int, config: dict | None = None) -> MetricReport:
    """Score decoded ``lists`` (U, L) against ``truth``; ``item_scores`` (U, N) feed AUC."""
    per_user: dict[str, dict[int, float]] = {m: {} for m in METRICS}
    excluded = 0
    for r, u in enumerate(users):
        u = int(u)
        gt = truth[u]
        rec = lists[r]
        per_user["hit"][u] = hit_ratio_at_l(rec, gt)
        per_user["ndcg"][u] = ndcg_at_l(rec, gt, L)
        per_user["map"][u] = map_at_l(rec, gt, L)
        per_user["f1"][u] = f1_at_l(rec, gt, L)
        if item_scores is not None:
            labels = np.isin(cands[r], gt)
            if labels.all() or not labels.any():
                excluded += 1
            else:
                per_user["auc"][u] = auc(item_scores[r], labels)
    return MetricReport(L, per_user, dict(config or {}), excluded)


def evaluate_policy(decode: Callable, users, cands: np.ndarray, truth: dict, L: int,
                    score: Callable | None = None, config: dict | None = None) -> MetricReport:
    """Decode one list per user with ``decode(users, cands, L)`` and score it.

    ``score(users, cands)`` returns per-candidate marginal scores for AUC.
    Users missing from ``truth`` are skipped.
    """
    users = np.asarray(users, dtype=np.int64)
    keep = np.array([int(u) in truth for u in users], dtype=bool)
    users, cands = users[keep], np.asarray(cands)[keep]
    lists = np.asarray(decode(users, cands, L))
    item_scores = None if score is None else np.asarray(score(users, cands))
    return evaluate_lists(users, lists, cands, item_scores, truth, L, config)
