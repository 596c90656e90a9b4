"""Interaction logs: ingestion, k-core filtering, per-user temporal splits, ground truth.

Records are kept columnar (numpy arrays) with dense ids. The original ids
survive in ``user_ids`` / ``item_ids`` so tables can be re-emitted in the
source vocabulary.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("user_id", "item_id", "timestamp", "feedback")
DEFAULT_POSITIVE_THRESHOLD = 0.85


class ParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SchemaError(ValueError):
    pass


def _sort_key(raw: str):
    # numeric ids sort numerically, everything else lexically after them
    try:
        return (0, int(raw), raw)
    except ValueError:
        return (1, 0, raw)


@dataclass
class InteractionTable:
    """Columnar interaction records over dense user/item ids.

    ``user_ids[k]`` is the original identifier of dense user ``k``; same for
    items. Dictionaries may list ids that no longer have records after
    filtering; :meth:`compact` re-densifies.
    """

    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    feedback: np.ndarray
    user_ids: list[str]
    item_ids: list[str]

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.feedback = np.asarray(self.feedback, dtype=np.float64)
        n = len(self.users)
        if not (len(self.items) == len(self.timestamps) == len(self.feedback) == n):
            raise ValueError("column lengths differ")
        if n and (self.timestamps.min() < 0):
            raise ValueError("negative timestamp")
        if not np.all(np.isfinite(self.feedback)):
            raise ValueError("non-finite feedback")

    def __len__(self) -> int:
        return len(self.users)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def subset(self, mask) -> "InteractionTable":
        mask = np.asarray(mask)
        return InteractionTable(self.users[mask], self.items[mask], self.timestamps[mask], self.feedback[mask],
                                list(self.user_ids), list(self.item_ids))

    def chronological_order(self) -> np.ndarray:
        """Record order grouped by user, then timestamp, then item id (stable)."""
        return np.lexsort((self.items, self.timestamps, self.users))

    def sequences(self) -> dict[int, np.ndarray]:
        """Chronological item sequence per dense user with at least one record."""
        order = self.chronological_order()
        users = self.users[order]
        items = self.items[order]
        cut = np.flatnonzero(np.diff(users)) + 1
        return {int(u[0]): it for u, it in zip(np.split(users, cut), np.split(items, cut)) if len(u)}

    def compact(self) -> "InteractionTable":
        """Drop ids without records and re-index densely, preserving id order."""
        ku, users = np.unique(self.users, return_inverse=True)
        ki, items = np.unique(self.items, return_inverse=True)
        return InteractionTable(users, items, self.timestamps, self.feedback,
                                [self.user_ids[k] for k in ku], [self.item_ids[k] for k in ki])

    def equals(self, other: "InteractionTable") -> bool:
        return (self.user_ids == other.user_ids and self.item_ids == other.item_ids
                and all(np.array_equal(getattr(self, c), getattr(other, c))
                        for c in ("users", "items", "timestamps", "feedback")))

    def to_csv(self) -> str:
        """Canonical CSV in the original id vocabulary, chronological per user."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REQUIRED_COLUMNS)
        for k in self.chronological_order():
            w.writerow((self.user_ids[self.users[k]], self.item_ids[self.items[k]],
                        int(self.timestamps[k]), repr(float(self.feedback[k]))))
        return buf.getvalue()


def ingest_interactions(source, schema: dict[str, str] | None = None) -> InteractionTable:
    """Parse a headed comma-separated stream into an :class:`InteractionTable`.

    ``source`` may be bytes, text, a path or a binary/text file object.
    ``schema`` maps the required column names to the header names used in the
    stream (identity by default). Dense ids follow the sorted original ids,
    numerically when an id parses as an integer.
    """
    text = _read_text(source)
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("empty input: no header") from None
    header = [h.strip() for h in header]
    mapping = {c: c for c in REQUIRED_COLUMNS}
    mapping.update(schema or {})
    missing = [c for c in REQUIRED_COLUMNS if mapping[c] not in header]
    if missing:
        raise SchemaError(f"missing required column(s): {', '.join(missing)}")
    col = {c: header.index(mapping[c]) for c in REQUIRED_COLUMNS}

    raw_u, raw_i, ts, fb = [], [], [], []
    for row in reader:
        line = reader.line_num
        if not row or all(not f.strip() for f in row):
            continue
        if len(row) != len(header):
            raise ParseError(line, f"expected {len(header)} fields, got {len(row)}")
        u = row[col["user_id"]].strip()
        i = row[col["item_id"]].strip()
        if not u or not i:
            raise ParseError(line, "empty id")
        try:
            t = int(row[col["timestamp"]].strip())
        except ValueError:
            raise ParseError(line, f"timestamp {row[col['timestamp']]!r} is not an integer") from None
        if t < 0:
            raise ParseError(line, f"negative timestamp {t}")
        try:
            f = float(row[col["feedback"]].strip())
        except ValueError:
            raise ParseError(line, f"feedback {row[col['feedback']]!r} is not a number") from None
        if not math.isfinite(f):
            raise ParseError(line, f"non-finite feedback {f}")
        raw_u.append(u)
        raw_i.append(i)
        ts.append(t)
        fb.append(f)

    user_ids = sorted(set(raw_u), key=_sort_key)
    item_ids = sorted(set(raw_i), key=_sort_key)
    uix = {u: k for k, u in enumerate(user_ids)}
    iix = {i: k for k, i in enumerate(item_ids)}
    table = InteractionTable(np.array([uix[u] for u in raw_u], dtype=np.int64),
                             np.array([iix[i] for i in raw_i], dtype=np.int64),
                             np.array(ts, dtype=np.int64), np.array(fb, dtype=np.float64),
                             user_ids, item_ids)
    log.info("ingested %d records (%d users, %d items)", len(table), table.n_users, table.n_items)
    return table


def _read_text(source) -> str:
    if isinstance(source, bytes):
        return source.decode("utf-8")
    if isinstance(source, Path):
        return source.read_text(encoding="utf-8")
    if isinstance(source, str):
        # a string is a path unless it already looks like CSV text
        if "\n" in source or "," in source:
            return source
        return Path(source).read_text(encoding="utf-8")
    data = source.read()
    return data.decode("utf-8") if isinstance(data, bytes) else data


def positive_only(table: InteractionTable, threshold: float = DEFAULT_POSITIVE_THRESHOLD) -> InteractionTable:
    """Keep records whose feedback is strictly above ``threshold``."""
    return table.subset(table.feedback > threshold)


def apply_k_core(table: InteractionTable, k: int) -> InteractionTable:
    """Largest subtable where every surviving user and item has at least ``k`` records.

    Each round prunes users then items; rounds repeat until nothing changes.
    Id dictionaries are left untouched (call :meth:`InteractionTable.compact`).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    keep = np.ones(len(table), dtype=bool)
    while True:
        changed = False
        for ids, size in ((table.users, table.n_users), (table.items, table.n_items)):
            counts = np.bincount(ids[keep], minlength=size)
            bad = keep & (counts[ids] < k)
            if bad.any():
                keep &= ~bad
                changed = True
        if not changed:
            return table.subset(keep)


@dataclass
class SplitDataset:
    """Per-user chronological split. ``test`` holds only users with a non-empty test side."""

    train: InteractionTable
    test: InteractionTable
    sequences: dict[int, np.ndarray]
    ratio: float
    excluded_users: list[int] = field(default_factory=list)
    ground_truth: dict[int, tuple[int, ...]] = field(default_factory=dict)
    train_targets: dict[int, tuple[int, ...]] = field(default_factory=dict)
    gt_excluded: list[int] = field(default_factory=list)

    @property
    def test_users(self) -> np.ndarray:
        return np.array(sorted(self.ground_truth), dtype=np.int64)

    def stats(self) -> dict:
        return {
            "ratio": self.ratio,
            "n_train_records": len(self.train),
            "n_test_records": len(self.test),
            "n_users": len(self.sequences),
            "n_test_excluded": len(self.excluded_users),
            "n_ground_truth": len(self.ground_truth),
            "n_ground_truth_excluded": len(self.gt_excluded),
        }


def temporal_split(table: InteractionTable, ratio: float) -> SplitDataset:
    """Per user, the earliest ``ceil(ratio * n_u)`` records train, the rest test.

    Order is (timestamp, item id). Users whose test side would be empty have
    all their records in train and are reported in ``excluded_users``.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    order = table.chronological_order()
    users = table.users[order]
    counts = np.bincount(users, minlength=table.n_users)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    rank = np.arange(len(order)) - starts[users]
    # tiny slack keeps e.g. 0.8 * 10 from rounding up to 9
    n_train = np.ceil(ratio * counts - 1e-9).astype(np.int64)
    in_train = np.zeros(len(table), dtype=bool)
    in_train[order] = rank < n_train[users]
    excluded = [int(u) for u in np.flatnonzero((counts > 0) & (n_train >= counts))]
    if excluded:
        log.warning("%d user(s) have an empty test side and are excluded from test", len(excluded))
    return SplitDataset(table.subset(in_train), table.subset(~in_train), table.sequences(), ratio, excluded)


def last_distinct(seq, L: int) -> tuple[int, ...] | None:
    """Last ``L`` distinct items of ``seq`` in chronological order, or None if too few."""
    out: list[int] = []
    seen: set[int] = set()
    for v in reversed(list(seq)):
        v = int(v)
        if v not in seen:
            seen.add(v)
            out.append(v)
            if len(out) == L:
                return tuple(reversed(out))
    return None


def extract_ground_truth(split: SplitDataset, L: int) -> dict[int, tuple[int, ...]]:
    """Fill ``split.ground_truth`` from each test user's full sequence and return it.

    Also fills ``split.train_targets`` (the last ``L`` distinct train items),
    which training code uses in place of the held-out truth.
    """
    if L < 1:
        raise ValueError(f"L must be >= 1, got {L}")
    test_users = set(np.unique(split.test.users).tolist())
    gt, dropped = {}, []
    for u, seq in split.sequences.items():
        if u not in test_users:
            continue
        target = last_distinct(seq, L)
        if target is None:
            dropped.append(u)
        else:
            gt[u] = target
    train_seq = split.train.sequences()
    split.train_targets = {u: t for u, s in train_seq.items() if (t := last_distinct(s, L)) is not None}
    split.ground_truth = gt
    split.gt_excluded = sorted(dropped)
    if dropped:
        log.warning("%d user(s) lack %d distinct trailing items and are excluded", len(dropped), L)
    return gt


def write_split(split: SplitDataset, out_dir, L: int) -> dict[str, Path]:
    """Canonical CSVs for both halves plus a JSON sidecar (dictionaries, ground truth, stats)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"train": out_dir / "train.csv", "test": out_dir / "test.csv", "meta": out_dir / "split.json"}
    paths["train"].write_text(split.train.to_csv(), encoding="utf-8")
    paths["test"].write_text(split.test.to_csv(), encoding="utf-8")
    meta = {
        "L": L,
        "user_ids": split.train.user_ids,
        "item_ids": split.train.item_ids,
        "stats": split.stats(),
        "excluded_users": split.excluded_users,
        "ground_truth": {str(u): list(v) for u, v in sorted(split.ground_truth.items())},
        "train_targets": {str(u): list(v) for u, v in sorted(split.train_targets.items())},
        "gt_excluded": split.gt_excluded,
    }
    paths["meta"].write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return paths


def read_split(out_dir) -> tuple[SplitDataset, int]:
    """Inverse of :func:`write_split`; dense ids are restored from the sidecar dictionaries."""
    out_dir = Path(out_dir)
    meta = json.loads((out_dir / "split.json").read_text(encoding="utf-8"))
    uix = {u: k for k, u in enumerate(meta["user_ids"])}
    iix = {i: k for k, i in enumerate(meta["item_ids"])}

    def load(name):
        raw = ingest_interactions((out_dir / name).read_bytes())
        return InteractionTable(np.array([uix[raw.user_ids[u]] for u in raw.users], dtype=np.int64),
                                np.array([iix[raw.item_ids[i]] for i in raw.items], dtype=np.int64),
                                raw.timestamps, raw.feedback, list(meta["user_ids"]), list(meta["item_ids"]))

    train, test = load("train.csv"), load("test.csv")
    both = InteractionTable(np.concatenate([train.users, test.users]), np.concatenate([train.items, test.items]),
                            np.concatenate([train.timestamps, test.timestamps]),
                            np.concatenate([train.feedback, test.feedback]), train.user_ids, train.item_ids)
    split = SplitDataset(train, test, both.sequences(), meta["stats"]["ratio"], meta["excluded_users"],
                         {int(u): tuple(v) for u, v in meta["ground_truth"].items()},
                         {int(u): tuple(v) for u, v in meta["train_targets"].items()},
                         meta["gt_excluded"])
    return split, int(meta["L"])
