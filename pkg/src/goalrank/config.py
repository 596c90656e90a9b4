"""Flat experiment configuration with strict key checking."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .oracle import ConfigError


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    # data
    interactions: str = ""  # empty: the bundled fixture
    world: str = ""  # empty: the bundled fixture world (oracle feedback)
    L: int = 3
    N: int = 8
    split_ratio: float = 0.8
    core_k: int = 20
    positive_feedback_threshold: float = 0.85
    # retriever
    mf_dim: int = 8
    mf_epochs: int = 15
    mf_reg: float = 0.1
    mf_negatives: int = 4
    ensure_ground_truth_in_candidates: bool = False
    # reward model
    reward_mode: str = "oracle"
    reward_noise: float = 0.1
    reward_exposures: int = 50
    reward_exposure_policy: str = "uniform"  # "uniform" random lists or "retriever" (softmax sampling of MF scores)
    reward_exposure_temperature: float = 0.1
    reward_embedding_dim: int = 16
    reward_widths: list = field(default_factory=lambda: [64])
    reward_epochs: int = 400
    reward_step_size: float = 0.01
    reward_heldout: float = 0.2
    # generator
    embedding_dim: int = 16
    hidden_widths: list = field(default_factory=lambda: [64])
    activation: str = "relu"
    # trainer
    epochs: int = 40
    batch_size: int = 50
    step_size: float = 0.01
    reward_source: str = "model"  # "model" (learned) or "oracle" (the fixture's r*)
    bias_lambda: float = 0.0
    bias_seed: int = 0
    renormalize: bool = False
    # groups
    group_size: int = 12
    quota_tree: int = 2
    quota_softmax_sampling: int = 4
    quota_markov: int = 2
    quota_random: int = 0
    quota_substitution: int = 2
    quota_diversity: int = 2
    gap_threshold: float | None = None
    on_gap_failure: str = "skip"
    subset_size: int | None = None
    tree_branch: int = 2
    tree_depth: int = 1
    full_space: bool = False
    # baselines
    baseline_kind: str = "g_only"
    baseline_epochs: int = 150
    baseline_proposals: int = 8
    baseline_k: int = 3
    # studies
    study_users: int = 200
    study_items: int = 60
    study_N: int = 8
    study_L: int = 3
    study_seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    study_epochs: int = 300
    study_step_size: float = 0.01
    study_batch_size: int = 50
    study_embedding_dim: int = 16
    study_k: int = 4
    study_alpha: int = 16
    study_n_ladder: list = field(default_factory=lambda: [16, 48, 112])
    study_width_ladder: list = field(default_factory=lambda: [16, 48, 112, 240])
    study_depth_ladder: list = field(default_factory=list)
    study_depth_width: int = 16
    ablation_group_sizes: list = field(default_factory=lambda: [3, 5, 8, 10, 20, 50, 80, 100])
    ablation_lambdas: list = field(default_factory=lambda: [0.0, 0.2, 0.5])
    ablation_seeds: list = field(default_factory=lambda: [0])
    ablation_metric: str = "hit"

    def __post_init__(self):
        self._check_types()
        if self.L < 1 or self.N <= self.L:
            raise ConfigError(f"need 1 <= L < N, got L={self.L}, N={self.N}")
        if not 0 < self.split_ratio < 1:
            raise ConfigError("split_ratio must lie in (0, 1)")
        if self.reward_mode not in ("oracle", "relevance"):
            raise ConfigError("reward_mode must be 'oracle' or 'relevance'")
        if self.reward_exposure_policy not in ("uniform", "retriever"):
            raise ConfigError("reward_exposure_policy must be 'uniform' or 'retriever'")
        if self.reward_source not in ("model", "oracle"):
            raise ConfigError("reward_source must be 'model' or 'oracle'")
        if self.baseline_kind not in ("g_only", "g_e", "mg_e"):
            raise ConfigError("baseline_kind must be one of g_only, g_e, mg_e")
        for name in ("interactions", "world"):
            path = getattr(self, name)
            if path and not Path(path).exists():
                raise ConfigError(f"{name} path does not exist: {path}")
        for name in ("ablation_group_sizes", "ablation_lambdas", "study_seeds", "study_width_ladder",
                     "study_n_ladder"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must not be empty")

    def _check_types(self) -> None:
        # the annotation strings are the declared types; ints are accepted where floats are
        # expected, bools never stand in for numbers
        accept = {"int": (int,), "float": (int, float), "str": (str,), "bool": (bool,), "list": (list,)}
        for f in fields(self):
            v = getattr(self, f.name)
            base, _, optional = str(f.type).partition(" | ")
            if v is None and optional == "None":
                continue
            ok = accept[base]
            if isinstance(v, bool) and bool not in ok or not isinstance(v, ok):
                raise ConfigError(f"{f.name} must be {f.type}, got {type(v).__name__} {v!r}")
            if base == "float":
                setattr(self, f.name, float(v))

    def quotas(self) -> dict:
        return {k[len("quota_"):]: getattr(self, k) for k in self.keys() if k.startswith("quota_")}

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def load_config(path=None, overrides: dict | None = None, environ=None) -> ExperimentConfig:
    """Build a config from an optional JSON file, explicit overrides, then env overrides.

    ``GOALRANK_SEED`` and ``GOALRANK_OUT`` take precedence over everything else.
    """
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    data.update(overrides or {})
    env = os.environ if environ is None else environ
    if env.get("GOALRANK_SEED"):
        try:
            data["seed"] = int(env["GOALRANK_SEED"])
        except ValueError:
            raise ConfigError("GOALRANK_SEED must be an integer") from None
    if env.get("GOALRANK_OUT"):
        data["out"] = env["GOALRANK_OUT"]
    unknown = sorted(set(data) - set(ExperimentConfig.keys()))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    try:
        return ExperimentConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
