"""Seeded synthetic world and interaction log used by the tests and the CLI smoke runs.

Every user runs a sequence of sessions over a catalogue of items with known
list reward r*. In each session the user is shown a random slate of unseen
items, consumes the r*-best ordered list of length L from it (long views, high
feedback) and skims a few other slate items (short views, low feedback). The
last session's slate is everything the user has not consumed yet, so the
held-out ground truth is the best list among all remaining items.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .oracle import SyntheticRewardSpec, random_reward_spec

FIXTURE_FILES = ("interactions.csv", "world.json")


@dataclass(frozen=True)
class FixtureConfig:
    seed: int = 20240601
    n_users: int = 200
    n_items: int = 60
    dim: int = 6
    L: int = 3
    sessions: int = 10
    slate: int = 12
    short_views: int = 2
    context_scale: float = 2.0
    base_scale: float = 2.0
    interaction_scale: float = 0.2
    interaction_density: float = 0.15


def make_world(cfg: FixtureConfig) -> SyntheticRewardSpec:
    return random_reward_spec(cfg.n_users, cfg.n_items, cfg.L, dim=cfg.dim, seed=cfg.seed,
                              context_scale=cfg.context_scale, interaction_density=cfg.interaction_density,
                              interaction_scale=cfg.interaction_scale, base_scale=cfg.base_scale)


def best_list(world: SyntheticRewardSpec, user: int, pool: np.ndarray, L: int) -> np.ndarray:
    """r*-argmax over every ordered L-list from ``pool`` (first in enumeration order on ties)."""
    lists = np.array(list(itertools.permutations(np.sort(pool).tolist(), L)), dtype=np.int64)
    r = world.rewards(np.full(len(lists), user), lists)
    return lists[int(np.argmax(r))]


def make_interactions(cfg: FixtureConfig, world: SyntheticRewardSpec) -> str:
    rng = np.random.default_rng([cfg.seed, 1])
    rows = []
    for u in range(cfg.n_users):
        remaining = np.arange(cfg.n_items)
        t = int(rng.integers(1_600_000_000, 1_600_100_000))
        for s in range(cfg.sessions):
            last = s == cfg.sessions - 1
            slate = remaining if last else rng.choice(remaining, size=min(cfg.slate, len(remaining)), replace=False)
            chosen = best_list(world, u, slate, cfg.L)
            others = np.setdiff1d(slate, chosen)
            skims = rng.choice(others, size=min(cfg.short_views, len(others)), replace=False)
            for v in skims:
                t += int(rng.integers(5, 60))
                rows.append((u, int(v), t, round(float(rng.uniform(0.05, 0.8)), 4)))
            for v in chosen:
                t += int(rng.integers(30, 600))
                rows.append((u, int(v), t, round(float(rng.uniform(0.86, 1.0)), 4)))
            remaining = np.setdiff1d(remaining, chosen)
            t += int(rng.integers(3_600, 86_400))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("user_id", "item_id", "timestamp", "feedback"))
    w.writerows(rows)
    return buf.getvalue()


def render_fixture(cfg: FixtureConfig | None = None) -> dict[str, str]:
    cfg = cfg or FixtureConfig()
    world = make_world(cfg)
    meta = {"config": asdict(cfg), "world": world.to_dict()}
    return {"interactions.csv": make_interactions(cfg, world),
            "world.json": json.dumps(meta, sort_keys=True) + "\n"}


def write_fixture(out_dir, cfg: FixtureConfig | None = None) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, text in render_fixture(cfg).items():
        p = out_dir / name
        p.write_text(text, encoding="utf-8")
        paths.append(p)
    return paths


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("goalrank") / "fixtures" / name))


def load_world(path=None) -> tuple[SyntheticRewardSpec, FixtureConfig]:
    path = Path(path) if path is not None else bundled_path("world.json")
    meta = json.loads(path.read_text(encoding="utf-8"))
    return SyntheticRewardSpec.from_dict(meta["world"]), FixtureConfig(**meta["config"])
