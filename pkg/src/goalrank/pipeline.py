"""Pipeline stages over an output directory.

Layout under ``cfg.out``::

    data/        train.csv, test.csv, split.json
    retriever/   mf.npz, candidates_train.csv, candidates_eval.csv
    reward/      reward.npz (+ .json), curve.csv
    goalrank/    policy.npz (+ .json), train_log.csv
    baseline_<kind>/  generator_<i>.npz (+ .json), baseline.json
    eval/        metrics_<model>.csv, metrics_<model>.json

Training stages only read the train half of the split: training users,
train-side targets (the last L distinct train items) and candidates that
exclude every train item except those targets. Evaluation candidates exclude
everything the user consumed before the ground-truth window.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as data_mod
from .baselines import BaselineArtifact, PointwiseConfig, train_baseline
from .config import ExperimentConfig
from .eval import MetricReport, evaluate_policy
from .fixture import bundled_path, load_world
from .groups import GroupBuilderConfig
from .oracle import ConfigError
from .nn.scorer import ScorerSpec, load_checkpoint, save_checkpoint
from .policy import FeatureStore, ScorerPolicy, StaticScorePolicy
from .retrieval import MFParams, candidate_matrix, read_candidates, train_mf, write_candidates
from .reward import BiasSpec, FeedbackRecords, RewardModel, simulate_feedback, train_reward_model
from .trainer import TrainerConfig, TrainerState, train_goalrank


def stage_dir(cfg: ExperimentConfig, name: str) -> Path:
    return Path(cfg.out) / name


def interactions_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.interactions) if cfg.interactions else bundled_path("interactions.csv")


def world_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.world) if cfg.world else bundled_path("world.json")


# ---------------------------------------------------------------------------
# data / retriever
# ---------------------------------------------------------------------------


def prepare_data(cfg: ExperimentConfig) -> dict[str, Path]:
    table = data_mod.ingest_interactions(interactions_path(cfg).read_bytes())
    table = data_mod.positive_only(table, cfg.positive_feedback_threshold)
    table = data_mod.apply_k_core(table, cfg.core_k).compact()
    split = data_mod.temporal_split(table, cfg.split_ratio)
    data_mod.extract_ground_truth(split, cfg.L)
    return data_mod.write_split(split, stage_dir(cfg, "data"), cfg.L)


def load_split(cfg: ExperimentConfig):
    split, _ = data_mod.read_split(stage_dir(cfg, "data"))
    return split


def train_users(split) -> np.ndarray:
    return np.array(sorted(split.train_targets), dtype=np.int64)


def _train_exclusions(split) -> data_mod.InteractionTable:
    """Train records minus the train-side targets, so targets stay retrievable."""
    drop = np.array([int(v) in split.train_targets.get(int(u), ())
                     for u, v in zip(split.train.users, split.train.items)], dtype=bool)
    return split.train.subset(~drop)


def _history_exclusions(split) -> data_mod.InteractionTable:
    """Everything each user consumed before the ground-truth window (train and earlier test records)."""
    both = data_mod.InteractionTable(
        np.concatenate([split.train.users, split.test.users]), np.concatenate([split.train.items, split.test.items]),
        np.concatenate([split.train.timestamps, split.test.timestamps]),
        np.concatenate([split.train.feedback, split.test.feedback]), split.train.user_ids, split.train.item_ids)
    drop = np.array([int(v) in split.ground_truth.get(int(u), ()) for u, v in zip(both.users, both.items)], dtype=bool)
    return both.subset(~drop)


def train_retriever(cfg: ExperimentConfig) -> dict[str, Path]:
    split = load_split(cfg)
    mf = train_mf(split.train, cfg.mf_dim, cfg.mf_epochs, cfg.mf_reg, cfg.mf_negatives, cfg.seed)
    out = stage_dir(cfg, "retriever")
    out.mkdir(parents=True, exist_ok=True)
    mf.save(out / "mf.npz")
    tu = train_users(split)
    tc = candidate_matrix(mf, tu, cfg.N, _train_exclusions(split),
                          split.train_targets, cfg.ensure_ground_truth_in_candidates)
    write_candidates(out / "candidates_train.csv", mf, tu, tc)
    eu = split.test_users
    ec = candidate_matrix(mf, eu, cfg.N, _history_exclusions(split), split.ground_truth, cfg.ensure_ground_truth_in_candidates)
    write_candidates(out / "candidates_eval.csv", mf, eu, ec)
    return {"mf": out / "mf.npz", "train": out / "candidates_train.csv", "eval": out / "candidates_eval.csv"}


def load_retriever(cfg: ExperimentConfig) -> MFParams:
    return MFParams.load(stage_dir(cfg, "retriever") / "mf.npz")


def feature_store(mf: MFParams) -> FeatureStore:
    return FeatureStore(mf.user_features(), mf.item_features())


def candidates(cfg: ExperimentConfig, which: str) -> tuple[np.ndarray, np.ndarray]:
    return read_candidates(stage_dir(cfg, "retriever") / f"candidates_{which}.csv")


# ---------------------------------------------------------------------------
# reward model
# ---------------------------------------------------------------------------


@dataclass
class DenseWorld:
    """The synthetic world seen through the split's dense ids (filtering re-indexes users and items)."""

    world: object
    user_map: np.ndarray
    item_map: np.ndarray

    def rewards(self, users, lists) -> np.ndarray:
        return self.world.rewards(self.user_map[np.asarray(users, dtype=np.int64)],
                                  self.item_map[np.asarray(lists, dtype=np.int64)])

    __call__ = rewards


def dense_world(cfg: ExperimentConfig, split) -> DenseWorld:
    world, _ = load_world(world_path(cfg))
    try:
        umap = np.array([int(x) for x in split.train.user_ids], dtype=np.int64)
        imap = np.array([int(x) for x in split.train.item_ids], dtype=np.int64)
    except ValueError:
        raise ConfigError("oracle feedback needs integer user and item ids matching the world") from None
    if umap.max(initial=-1) >= len(world.contexts) or imap.max(initial=-1) >= len(world.base_utility):
        raise ConfigError("interaction ids fall outside the synthetic world")
    return DenseWorld(world, umap, imap)


def _mf_table(cfg: ExperimentConfig) -> np.ndarray:
    mf = load_retriever(cfg)
    return np.stack([mf.scores(u) for u in range(mf.n_users)])


def exposure_records(cfg: ExperimentConfig, split, users, cands, seed_offset: int = 0) -> FeedbackRecords:
    """Random exposure lists from each training user's candidates with simulated feedback."""
    rng = np.random.default_rng([cfg.seed, 0xFEED, seed_offset])
    U, N = cands.shape
    E = cfg.reward_exposures
    if cfg.reward_exposure_policy == "retriever":
        logger = StaticScorePolicy(_mf_table(cfg), name="logger")
        pos = logger.sample_positions(np.repeat(users, E), np.repeat(cands, E, axis=0), cfg.L, rng,
                                      cfg.reward_exposure_temperature).reshape(U, E, cfg.L)
    else:
        pos = np.array([[rng.permutation(N)[: cfg.L] for _ in range(E)] for _ in range(U)], dtype=np.int64)
    owner = np.repeat(np.arange(U), E)
    lists = np.take_along_axis(cands[owner], pos.reshape(U * E, cfg.L), axis=1)
    rep_users = users[owner]
    if cfg.reward_mode == "oracle":
        fb = simulate_feedback("oracle", rep_users, lists, world=dense_world(cfg, split), noise_scale=cfg.reward_noise, rng=rng)
    else:
        fb = simulate_feedback("relevance", rep_users, lists, truth=split.train_targets)
    return FeedbackRecords(rep_users, lists, fb)


def reward_spec(cfg: ExperimentConfig, mf: MFParams) -> ScorerSpec:
    return ScorerSpec(cfg.reward_embedding_dim, tuple(cfg.reward_widths), cfg.activation,
                      context_dim=mf.user_vectors.shape[1], item_feature_dim=mf.item_vectors.shape[1] + 1,
                      n_items=mf.n_items, list_length=cfg.L, head="list_value")


def fit_reward(cfg: ExperimentConfig, split, mf: MFParams, seed_offset: int = 0):
    users, cands = candidates(cfg, "train")
    records = exposure_records(cfg, split, users, cands, seed_offset)
    return train_reward_model(records, reward_spec(cfg, mf), feature_store(mf), epochs=cfg.reward_epochs,
                              step_size=cfg.reward_step_size, seed=cfg.seed + seed_offset,
                              heldout_fraction=cfg.reward_heldout)


def train_reward(cfg: ExperimentConfig) -> dict[str, Path]:
    split = load_split(cfg)
    mf = load_retriever(cfg)
    model, curve = fit_reward(cfg, split, mf)
    out = stage_dir(cfg, "reward")
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "reward.npz")
    curve.write(out / "curve.csv")
    return {"model": out / "reward.npz", "curve": out / "curve.csv"}


def load_reward(cfg: ExperimentConfig, mf: MFParams, name: str = "reward.npz") -> RewardModel:
    return RewardModel.load(stage_dir(cfg, "reward") / name, feature_store(mf))


# ---------------------------------------------------------------------------
# goalrank
# ---------------------------------------------------------------------------


def generator_spec(cfg: ExperimentConfig, mf: MFParams, widths=None) -> ScorerSpec:
    return ScorerSpec(cfg.embedding_dim, tuple(widths or cfg.hidden_widths), cfg.activation,
                      context_dim=mf.user_vectors.shape[1], item_feature_dim=mf.item_vectors.shape[1] + 1,
                      n_items=mf.n_items, list_length=cfg.L)


def group_config(cfg: ExperimentConfig) -> GroupBuilderConfig:
    size = cfg.group_size
    quotas = dict(cfg.quotas())
    # small groups: keep the strategy mix but never ask for more lists than fit
    total = sum(quotas.values())
    if total > size:
        scaled, budget = {}, size - 1
        for k, v in quotas.items():
            take = min(v, max(budget, 0))
            scaled[k] = take
            budget -= take
        quotas = scaled
    return GroupBuilderConfig(size=size, quotas=quotas, gap_threshold=cfg.gap_threshold,
                              on_gap_failure=cfg.on_gap_failure, subset_size=cfg.subset_size,
                              tree_branch=cfg.tree_branch, tree_depth=cfg.tree_depth, full_space=cfg.full_space)


def trainer_config(cfg: ExperimentConfig) -> TrainerConfig:
    bias = BiasSpec(cfg.bias_lambda, cfg.bias_seed) if cfg.bias_lambda > 0 else None
    return TrainerConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, step_size=cfg.step_size,
                         groups=group_config(cfg), bias=bias, seed=cfg.seed, renormalize=cfg.renormalize)


def reward_function(cfg: ExperimentConfig, mf: MFParams):
    if cfg.reward_source == "oracle":
        return dense_world(cfg, load_split(cfg))
    return load_reward(cfg, mf)


def fit_goalrank(cfg: ExperimentConfig, mf: MFParams, reward_fn=None) -> tuple[ScorerPolicy, TrainerState]:
    users, cands = candidates(cfg, "train")
    store = feature_store(mf)
    spec = generator_spec(cfg, mf)
    reward_fn = reward_fn if reward_fn is not None else reward_function(cfg, mf)
    aux = [StaticScorePolicy(np.stack([mf.scores(u) for u in range(mf.n_users)]), name="retriever")]
    state = train_goalrank(spec, store, users, cands, reward_fn, cfg.L, trainer_config(cfg), auxiliary=aux)
    return ScorerPolicy(spec, state.params, store, name="goalrank"), state


def train_goalrank_stage(cfg: ExperimentConfig) -> dict[str, Path]:
    mf = load_retriever(cfg)
    policy, state = fit_goalrank(cfg, mf)
    out = stage_dir(cfg, "goalrank")
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "policy.npz", policy.params, policy.spec,
                    {"skip_rate": state.skip_rate, "gap_threshold": state.gap_threshold, "steps": state.step})
    state.write_history(out / "train_log.csv")
    return {"policy": out / "policy.npz", "log": out / "train_log.csv"}


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def fit_baseline(cfg: ExperimentConfig, split, mf: MFParams, kind: str | None = None) -> BaselineArtifact:
    kind = kind or cfg.baseline_kind
    users, cands = candidates(cfg, "train")
    evaluator = None
    if kind != "g_only":
        # the evaluator is a separately seeded list-value model on its own exposures
        evaluator, _ = fit_reward(cfg, split, mf, seed_offset=1)
    pc = PointwiseConfig(epochs=cfg.baseline_epochs, batch_size=cfg.batch_size, step_size=cfg.step_size,
                         seed=cfg.seed)
    return train_baseline(kind, generator_spec(cfg, mf), feature_store(mf), users, cands, split.train_targets, pc,
                          evaluator=evaluator, proposals=cfg.baseline_proposals, k=cfg.baseline_k)


def train_baseline_stage(cfg: ExperimentConfig) -> dict[str, Path]:
    split = load_split(cfg)
    mf = load_retriever(cfg)
    art = fit_baseline(cfg, split, mf)
    out = stage_dir(cfg, f"baseline_{art.kind}")
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for i, g in enumerate(art.generators):
        p = out / f"generator_{i}.npz"
        save_checkpoint(p, g.params, g.spec)
        paths[f"generator_{i}"] = p
    if art.evaluator is not None:
        art.evaluator.save(out / "evaluator.npz")
        paths["evaluator"] = out / "evaluator.npz"
    meta = {"kind": art.kind, "n_generators": len(art.generators), "proposals": art.proposals, "seed": art.seed}
    (out / "baseline.json").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")
    paths["meta"] = out / "baseline.json"
    return paths


def load_baseline(cfg: ExperimentConfig, kind: str, mf: MFParams) -> BaselineArtifact:
    out = stage_dir(cfg, f"baseline_{kind}")
    meta = json.loads((out / "baseline.json").read_text(encoding="utf-8"))
    store = feature_store(mf)
    gens = []
    for i in range(meta["n_generators"]):
        params, spec, _ = load_checkpoint(out / f"generator_{i}.npz")
        gens.append(ScorerPolicy(spec, params, store, step_independent=True, name=f"{kind}[{i}]"))
    ev = RewardModel.load(out / "evaluator.npz", store) if (out / "evaluator.npz").exists() else None
    return BaselineArtifact(kind, gens, ev, meta["proposals"], meta["seed"])


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class Evaluable:
    decode: object
    score: object


def load_model(cfg: ExperimentConfig, model: str, mf: MFParams) -> Evaluable:
    if model == "goalrank":
        params, spec, _ = load_checkpoint(stage_dir(cfg, "goalrank") / "policy.npz")
        pol = ScorerPolicy(spec, params, feature_store(mf), name="goalrank")
        return Evaluable(pol.decode, pol.item_scores)
    if model == "retriever":
        pol = StaticScorePolicy(np.stack([mf.scores(u) for u in range(mf.n_users)]), name="retriever")
        return Evaluable(pol.decode, pol.item_scores)
    art = load_baseline(cfg, model, mf)
    return Evaluable(art.decode, art.item_scores)


def evaluate_model(cfg: ExperimentConfig, decode, score, split=None) -> MetricReport:
    split = split if split is not None else load_split(cfg)
    users, cands = candidates(cfg, "eval")
    return evaluate_policy(decode, users, cands, split.ground_truth, cfg.L, score,
                           {"N": cfg.N, "L": cfg.L, "seed": cfg.seed})


def evaluate_stage(cfg: ExperimentConfig, model: str, per_user: bool = False) -> dict[str, Path]:
    mf = load_retriever(cfg)
    ev = load_model(cfg, model, mf)
    report = evaluate_model(cfg, ev.decode, ev.score)
    out = stage_dir(cfg, "eval")
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / f"metrics_{model}.csv", "json": out / f"metrics_{model}.json"}
    report.write(paths["csv"], paths["json"], per_user=per_user)
    return paths
