"""Command-line driver: one subcommand per pipeline stage, study or report.

Every run writes ``<out>/_runs/<run>/manifest.json`` before any result file,
then ``_SUCCESS`` on completion or ``_FAILED`` (with the error category) on a
crash. An exclusive lock on the output directory keeps two runs from writing
into it at once.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, pipeline
from ._accel import backend_name
from .baselines import BASELINES, ContractViolation
from .config import ExperimentConfig, load_config
from .data import ParseError, SchemaError
from .groups import DegenerateGroupError
from .nn.autodiff import ContractError
from .nn.scorer import ShapeError
from .oracle import ConfigError
from .policy import DomainError, SimplexError, SpaceTooLarge
from .reporting import FORMATS, ReportError, ResultTable, emit_report
from .retrieval import ColdStartError
from .reward import TrainingDiverged, VocabularyError
from .trainer import TrainingAborted

log = logging.getLogger("goalrank")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
MODELS = ("goalrank", "retriever") + BASELINES

REPORT_HELP = """\
report columns (CSV; JSON holds the same rows under "columns"/"rows"):
  source  eval | oracle_study | scaling_study | ablation_group_size | ablation_bias
  name    model name, or family/W/D/n for capacity studies, or ablation value/seed
  metric  hit, ndcg, map, f1, auc, or kl_median
  value   the metric value
"""

_CATEGORIES: list[tuple[type, str]] = [
    (ConfigError, "config"),
    (SpaceTooLarge, "config"),
    (ParseError, "data"),
    (SchemaError, "data"),
    (ColdStartError, "data"),
    (VocabularyError, "data"),
    (FileNotFoundError, "data"),
    (DegenerateGroupError, "data"),
    (TrainingAborted, "numeric"),
    (TrainingDiverged, "numeric"),
    (FloatingPointError, "numeric"),
    (ContractViolation, "contract"),
    (ContractError, "contract"),
    (DomainError, "contract"),
    (SimplexError, "contract"),
    (ShapeError, "contract"),
    (ReportError, "io"),
]


def categorize(exc: BaseException) -> str:
    for kind, name in _CATEGORIES:
        if isinstance(exc, kind):
            return name
    return "runtime"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat JSON experiment config")
    common.add_argument("--out", help="output directory (overrides config and GOALRANK_OUT)")
    common.add_argument("--seed", type=int, help="master seed (overrides config and GOALRANK_SEED)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; VALUE is parsed as JSON when possible")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = _Parser(prog="goalrank", description="Generator-only list ranking lab.",
                formatter_class=argparse.RawDescriptionHelpFormatter, epilog=REPORT_HELP)
    p.add_argument("--version", action="version", version=f"goalrank {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_, description=help_)

    add("prepare-data", "filter, split and extract ground truth from the interaction log")
    add("train-retriever", "fit the matrix-factorisation retriever and write candidate sets")
    add("train-reward", "fit the list reward model on simulated exposures")
    add("train-goalrank", "train the generator by group-relative distillation")
    b = add("train-baseline", "train a G-only, G-E or MG-E baseline")
    b.add_argument("--kind", choices=BASELINES, help="baseline kind (defaults to baseline_kind in the config)")
    e = add("evaluate", "evaluate a trained model on the held-out ground truth")
    e.add_argument("--model", choices=MODELS, default="goalrank")
    e.add_argument("--per-user", action="store_true", help="include per-user metrics in the JSON report")
    add("oracle-study", "mixture of small generators vs one wider generator on an enumerable instance")
    add("scaling-study", "approximation error along a width ladder")
    a = add("ablation", "group-size or bias-level sweep of full GoalRank runs")
    a.add_argument("--which", choices=("group_size", "bias"), required=True)
    r = _Parser(add_help=False)
    r.add_argument("--format", choices=FORMATS, default="csv")
    sub.add_parser("report", parents=[common, r], help="collect every result under --out into one table",
                   description="collect every result under --out into one table", epilog=REPORT_HELP,
                   formatter_class=argparse.RawDescriptionHelpFormatter)
    f = add("make-fixture", "regenerate the bundled synthetic fixture")
    f.add_argument("--dest", required=True, help="directory to write interactions.csv and world.json into")
    return p


def _overrides(args) -> dict:
    ov: dict = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        try:
            ov[k] = json.loads(v)
        except json.JSONDecodeError:
            ov[k] = v
    if args.out is not None:
        ov["out"] = args.out
    if args.seed is not None:
        ov["seed"] = args.seed
    return ov


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config, _overrides(args))
    # explicit flags beat the environment
    if args.out is not None:
        cfg.out = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def hash_paths(paths) -> str:
    """Content hash over files (recursively for directories) keyed by their relative names."""
    h = hashlib.sha256()
    for root in paths:
        root = Path(root)
        if not root.exists():
            continue
        files = sorted(p for p in root.rglob("*") if p.is_file()) if root.is_dir() else [root]
        for f in files:
            rel = f.relative_to(root).as_posix() if root.is_dir() else f.name
            h.update(rel.encode() + b"\0")
            h.update(hashlib.sha256(f.read_bytes()).digest())
    return h.hexdigest()


def _inputs(cfg: ExperimentConfig, command: str, model: str | None = None) -> dict[str, list[Path]]:
    out = Path(cfg.out)
    raw = {"interactions": [pipeline.interactions_path(cfg)], "world": [pipeline.world_path(cfg)]}
    stages = {"data": [out / "data"], "retriever": [out / "retriever"], "reward": [out / "reward"]}
    need = {
        "prepare-data": ["interactions"],
        "train-retriever": ["data"],
        "train-reward": ["data", "retriever", "world"],
        "train-goalrank": ["data", "retriever", "reward", "world"],
        "train-baseline": ["data", "retriever", "world"],
        "evaluate": ["data", "retriever"],
        "ablation": ["data", "retriever", "reward", "world"],
    }.get(command, [])
    found = {**raw, **stages}
    res = {k: found[k] for k in need}
    if command == "evaluate" and model != "retriever":
        # only the evaluated model, so training another one leaves this manifest alone
        res["model"] = [out / ("goalrank" if model in (None, "goalrank") else f"baseline_{model}")]
    if command == "report":
        res["results"] = [out / "eval", out / "studies"]
    return res


def run_name(args) -> str:
    if args.command == "evaluate":
        return f"evaluate-{args.model}"
    if args.command == "train-baseline":
        return f"train-baseline-{args.kind}"
    if args.command == "ablation":
        return f"ablation-{args.which}"
    if args.command == "report":
        return f"report-{args.format}"
    return args.command


def build_manifest(cfg: ExperimentConfig, args) -> dict:
    needed = _inputs(cfg, args.command, getattr(args, "model", None))
    inputs = {k: hash_paths(v) for k, v in sorted(needed.items())}
    versions = {"goalrank": __version__, "numpy": np.__version__, "python": platform.python_version(),
                "backend": backend_name()}
    try:
        import numba

        versions["numba"] = numba.__version__
    except ImportError:  # pragma: no cover
        pass
    body = {"run": run_name(args), "config_digest": cfg.digest(), "config": cfg.to_dict(),
            "seeds": {"seed": cfg.seed, "bias_seed": cfg.bias_seed, "study_seeds": list(cfg.study_seeds),
                      "ablation_seeds": list(cfg.ablation_seeds)},
            "versions": versions, "inputs": inputs}
    digest = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()
    return {**body, "manifest_hash": digest, "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z")}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _studies_dir(cfg) -> Path:
    return Path(cfg.out) / "studies"


def _write_table(table: ResultTable, stem: Path) -> list[Path]:
    return [emit_report(table, "csv", stem.with_suffix(".csv")), emit_report(table, "json", stem.with_suffix(".json"))]


def collect_report(cfg: ExperimentConfig) -> ResultTable:
    from .eval import MetricReport

    table = ResultTable(("source", "name", "metric", "value"))
    out = Path(cfg.out)
    for model in MODELS:
        p = out / "eval" / f"metrics_{model}.json"
        if p.exists():
            rep = MetricReport.from_json(p.read_text(encoding="utf-8"))
            for m, v in rep.summary().items():
                table.append(source="eval", name=model, metric=m, value=float(v))
    for study in ("oracle_study", "scaling_study"):
        p = _studies_dir(cfg) / f"{study}.json"
        if p.exists():
            for g in json.loads(p.read_text(encoding="utf-8"))["groups"]:
                name = f"{g['family']}/W={g['W']}/D={g['D']}/n={g['n']}"
                table.append(source=study, name=name, metric="kl_median", value=float(g["median"]))
    for which in ("group_size", "bias"):
        p = _studies_dir(cfg) / f"ablation_{which}.json"
        if p.exists():
            t = ResultTable.from_json(p.read_text(encoding="utf-8"))
            for r in t.rows:
                for m in t.columns[3:]:
                    table.append(source=f"ablation_{which}", name=f"value={r['value']}/seed={r['seed']}",
                                 metric=m, value=float(r[m]))
    return table


def execute(cfg: ExperimentConfig, args) -> list[Path]:
    from . import studies

    cmd = args.command
    if cmd == "prepare-data":
        return list(pipeline.prepare_data(cfg).values())
    if cmd == "train-retriever":
        return list(pipeline.train_retriever(cfg).values())
    if cmd == "train-reward":
        return list(pipeline.train_reward(cfg).values())
    if cmd == "train-goalrank":
        return list(pipeline.train_goalrank_stage(cfg).values())
    if cmd == "train-baseline":
        cfg.baseline_kind = args.kind
        return list(pipeline.train_baseline_stage(cfg).values())
    if cmd == "evaluate":
        return list(pipeline.evaluate_stage(cfg, args.model, args.per_user).values())
    if cmd in ("oracle-study", "scaling-study"):
        rep = studies.oracle_study(cfg) if cmd == "oracle-study" else studies.scaling_study(cfg)
        d = _studies_dir(cfg)
        d.mkdir(parents=True, exist_ok=True)
        stem = d / cmd.replace("-", "_")
        rep.write(stem.with_suffix(".csv"), stem.with_suffix(".json"))
        return [stem.with_suffix(".csv"), stem.with_suffix(".json")]
    if cmd == "ablation":
        return _write_table(studies.ablation(cfg, args.which), _studies_dir(cfg) / f"ablation_{args.which}")
    if cmd == "report":
        return [emit_report(collect_report(cfg), args.format, Path(cfg.out) / f"report.{args.format}")]
    raise UsageError(f"unknown command {cmd!r}")  # pragma: no cover - argparse rejects it first


def _make_fixture(args) -> int:
    from .fixture import write_fixture

    for p in write_fixture(args.dest):
        print(p)
    return EXIT_OK


def run_command(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(build_parser().format_usage().rstrip(), file=sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "make-fixture":
        return _make_fixture(args)
    try:
        cfg = _config(args)
        if args.command == "train-baseline" and args.kind is None:
            args.kind = cfg.baseline_kind
    except (ConfigError, UsageError) as exc:
        print(f"goalrank: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    from filelock import FileLock, Timeout

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out / ".goalrank.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        print(f"goalrank: another run holds the lock on {out}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        run_dir = out / "_runs" / run_name(args)
        run_dir.mkdir(parents=True, exist_ok=True)
        for marker in ("_SUCCESS", "_FAILED"):
            (run_dir / marker).unlink(missing_ok=True)
        (run_dir / "manifest.json").write_text(json.dumps(build_manifest(cfg, args), indent=2, sort_keys=True)
                                               + "\n", encoding="utf-8")
        try:
            paths = execute(cfg, args)
        except Exception as exc:  # noqa: BLE001 - every failure is categorised and reported
            cat = categorize(exc)
            (run_dir / "_FAILED").write_text(json.dumps({"category": cat, "error": type(exc).__name__,
                                                         "message": str(exc)}, sort_keys=True) + "\n")
            print(f"goalrank: {cat} error: {exc}", file=sys.stderr)
            if args.verbose:
                logging.getLogger("goalrank").exception("run failed")
            return EXIT_USAGE if cat == "config" else EXIT_RUNTIME
        (run_dir / "_SUCCESS").write_text("".join(f"{Path(p).as_posix()}\n" for p in paths))
        for p in paths:
            print(p)
        return EXIT_OK
    finally:
        lock.release()


def main() -> None:  # pragma: no cover - thin wrapper
    sys.exit(run_command())
