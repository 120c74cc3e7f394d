"""
Command-line surface.

Configuration precedence, lowest to highest: built-in defaults, the TOML
file (``--config`` or MOWE_CONFIG), ``--set section.key=value`` overrides,
then the dedicated flags ``--seed``, ``--threads``, ``--epochs`` and
``--router``. Every command exits 0 on success; failures write one JSON
object to stderr and exit 2 for configuration or argument errors, 1
otherwise.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

from mowe.config import MoweConfig, apply_overrides, config_toml, defaults_toml, load_config, settings
from mowe.errors import ArgumentError, ConfigError, MoweError
from mowe.gradcheck import run_gradient_suite
from mowe.pipeline import build_model
from mowe.reporting import (
    RunDirectory, format_proportions, linear_probe_accuracy, majority_share, most_similar_tasks,
    pair_relation, write_ablation_csv, write_metrics_csv, write_proportions_csv,
)
from mowe.synthdata import Dataset, generate_from_config, load_dataset, save_dataset, split
from mowe.trainer import (
    diversity_study_config, evaluate, load_checkpoint, run_ablation_matrix, run_capacity_comparison,
    run_diversity_study, run_training, save_checkpoint,
)

logger = logging.getLogger("mowe.cli")

DATASET_DIR = "dataset"
CHECKPOINT_FILE = "checkpoint.bin"
SPEECH_PAIR = ("asr", "sqa")


# ---------------------------------------------------------------- parsing

class _Parser(argparse.ArgumentParser):
    """Usage errors become ArgumentError so they share the JSON error path."""

    def error(self, message: str):
        raise ArgumentError(message, {"usage": self.format_usage().strip()})


def _common() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML config file (default: $MOWE_CONFIG)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("--seed", type=int, help="root seed (trainer.seed)")
    common.add_argument("--threads", type=int, help="evaluation workers (trainer.threads)")
    common.add_argument("--epochs", type=int, help="training epochs (trainer.epochs)")
    common.add_argument("--router", help="router mode (routing.mode)")
    common.add_argument("--out", help="output directory (default: a fresh run directory)")
    common.add_argument("--log-level", default=None, help="logging level (default: $MOWE_LOG_LEVEL)")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="mowe", description="Mixture of weak encoders: desk-scale experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate a synthetic multi-task dataset")

    train = sub.add_parser("train", parents=[common], help="train a model and write checkpoint + report")
    train.add_argument("--data", help="dataset directory (default: generate from config)")

    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", help="dataset directory (default: regenerate from the checkpoint config)")
    ev.add_argument("--split", choices=["eval", "train", "all"], default="eval")

    ablate = sub.add_parser("ablate", parents=[common], help="train every router mode and compare")
    ablate.add_argument("--data")

    route = sub.add_parser("route-report", parents=[common], help="task x encoder routing proportions")
    route.add_argument("--checkpoint", required=True)
    route.add_argument("--data")
    route.add_argument("--split", choices=["eval", "train", "all"], default="eval")

    sub.add_parser("grad-check", parents=[common], help="finite-difference gradient suite")

    capacity = sub.add_parser("compare-capacity", parents=[common], help="MoWE against the base-only baseline")
    capacity.add_argument("--data")
    capacity.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])

    diversity = sub.add_parser("diversity-study", parents=[common],
                               help="dep router mean-gate entropy with and without the diversity loss")
    diversity.add_argument("--data")

    config = sub.add_parser("config", help="configuration helpers")
    config_sub = config.add_subparsers(dest="config_command", required=True)
    config_sub.add_parser("show-defaults", help="print the built-in defaults as TOML")
    return parser


def resolve_config(args: argparse.Namespace, base: Optional[MoweConfig] = None) -> MoweConfig:
    config = base if base is not None else load_config(args.config)
    config = apply_overrides(config, args.overrides)
    flags: Dict[str, Any] = {}
    if args.seed is not None:
        flags["trainer.seed"] = args.seed
    if args.threads is not None:
        flags["trainer.threads"] = args.threads
    if args.epochs is not None:
        flags["trainer.epochs"] = args.epochs
    if args.router is not None:
        flags["routing.mode"] = args.router
    return config.override(flags) if flags else config


# ---------------------------------------------------------------- data helpers

def _load_data(path: Optional[str], config: MoweConfig) -> Dataset:
    if not path:
        return generate_from_config(config.data, config.trainer.seed)
    directory = Path(path)
    if (directory / DATASET_DIR).is_dir():
        directory = directory / DATASET_DIR
    dataset = load_dataset(directory)
    if dataset.seq_len and dataset.seq_len != config.data.seq_len:
        raise ConfigError(f"dataset has {dataset.seq_len} frames per sample, config expects {config.data.seq_len}",
                          location="data.seq_len", hint="regenerate the data or match the config")
    if dataset.d_in != config.data.d_in:
        raise ConfigError(f"dataset has d_in={dataset.d_in}, config expects {config.data.d_in}",
                          location="data.d_in")
    return dataset


def _splits(dataset: Dataset, config: MoweConfig) -> Tuple[Dataset, Dataset]:
    return split(dataset, config.data.train_fraction, config.trainer.seed)


def _select(dataset: Dataset, config: MoweConfig, which: str) -> Dataset:
    if which == "all":
        return dataset
    train_set, eval_set = _splits(dataset, config)
    return train_set if which == "train" else eval_set


def _checkpoint_path(path: str) -> Path:
    candidate = Path(path)
    if candidate.is_dir():
        candidate = candidate / CHECKPOINT_FILE
    if not candidate.is_file():
        raise ArgumentError(f"checkpoint not found: {path}")
    return candidate


def _emit(payload: Any) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


# ---------------------------------------------------------------- commands

def cmd_gen_data(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    dataset = generate_from_config(config.data, config.trainer.seed)
    run = RunDirectory.create("gen-data", config.trainer.seed, config.echo(), args.out)
    save_dataset(dataset, run.file(DATASET_DIR))
    probe = linear_probe_accuracy(dataset)
    run.write_json("summary.json", {"samples": len(dataset), "tasks": dataset.task_names(), "probe_accuracy": probe})
    run.write_manifest()
    _emit({"out": str(run.path), "samples": len(dataset), "probe_accuracy": probe})
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    train_set, eval_set = _splits(_load_data(args.data, config), config)
    model = build_model(config)
    report = run_training(config, train_set, model, eval_set)
    run = RunDirectory.create("train", config.trainer.seed, config.echo(), args.out)
    save_checkpoint(run.file(CHECKPOINT_FILE), model)
    run.file("config.toml").write_text(config_toml(config), encoding="utf-8")
    run.write_json("report.json", report)
    write_metrics_csv(run.file("metrics.csv"), report.steps)
    write_proportions_csv(run.file("proportions.csv"), report.routing_proportions)
    run.write_manifest()
    _emit({"out": str(run.path), "final_train_loss": report.final_train_loss,
           "final_eval": report.final_eval.model_dump(mode="json", exclude={"routing"})})
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model = load_checkpoint(_checkpoint_path(args.checkpoint))
    config = resolve_config(args, model.config)
    dataset = _select(_load_data(args.data, config), config, args.split)
    report = evaluate(model, dataset, config.trainer.threads)
    if args.out:
        run = RunDirectory.create("eval", config.trainer.seed, config.echo(), args.out)
        run.write_json("eval.json", report)
        run.write_manifest()
    _emit(report.model_dump(mode="json", exclude={"routing"}))
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    train_set, eval_set = _splits(_load_data(args.data, config), config)
    rows, reports = run_ablation_matrix(config, train_set, eval_set)
    run = RunDirectory.create("ablate", config.trainer.seed, config.echo(), args.out)
    write_ablation_csv(run.file("ablation.csv"), rows)
    for mode, report in reports.items():
        run.write_json(f"reports/{mode}.json", report)
    run.write_manifest()
    _emit({"out": str(run.path), "rows": [r.model_dump(mode="json") for r in rows]})
    return 0


def cmd_route_report(args: argparse.Namespace) -> int:
    model = load_checkpoint(_checkpoint_path(args.checkpoint))
    config = resolve_config(args, model.config)
    dataset = _select(_load_data(args.data, config), config, args.split)
    report = evaluate(model, dataset, config.trainer.threads)
    summary: Dict[str, Any] = {"routers": {}}
    for router, table in report.routing_proportions.items():
        logger.info("%s", format_proportions(router, table))
        majorities = {task: dict(zip(("encoder", "share"), majority_share(row))) for task, row in table.items()}
        summary["routers"][router] = {
            "proportions": table,
            "majority": majorities,
            "distinct_majority_encoders": len({m["encoder"] for m in majorities.values()}),
            "speech_pair": pair_relation(table, *SPEECH_PAIR),
            "nearest": {task: most_similar_tasks(table, task, top_k=1) for task in table},
        }
    run = RunDirectory.create("route-report", config.trainer.seed, config.echo(), args.out)
    write_proportions_csv(run.file("proportions.csv"), report.routing_proportions)
    run.write_json("summary.json", summary)
    run.write_manifest()
    _emit({"out": str(run.path), **summary})
    return 0


def cmd_grad_check(args: argparse.Namespace) -> int:
    config = resolve_config(args) if (args.config or args.overrides) else None
    seed = args.seed if args.seed is not None else 0
    report = run_gradient_suite(config, seed)
    _emit(report.to_dict())
    return 0 if report.passed else 1


def cmd_compare_capacity(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    train_set, eval_set = _splits(_load_data(args.data, config), config)
    result = run_capacity_comparison(config, train_set, eval_set, args.seeds)
    run = RunDirectory.create("compare-capacity", config.trainer.seed, config.echo(), args.out)
    run.write_json("capacity.json", result)
    run.write_manifest()
    _emit({"out": str(run.path), "mowe_mean": result.mowe_mean, "baseline_mean": result.baseline_mean,
           **result.model_dump(mode="json")})
    return 0


def cmd_diversity_study(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    train_set = eval_set = None
    if args.data:
        train_set, eval_set = _splits(_load_data(args.data, config), config)
    result = run_diversity_study(config, train_set, eval_set)
    study_config = diversity_study_config(config)
    run = RunDirectory.create("diversity-study", config.trainer.seed, study_config.echo(), args.out)
    run.write_json("diversity.json", result)
    run.write_manifest()
    _emit(result.model_dump(mode="json"))
    return 0


def cmd_config(args: argparse.Namespace) -> int:
    sys.stdout.write(defaults_toml())
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "route-report": cmd_route_report,
    "grad-check": cmd_grad_check,
    "compare-capacity": cmd_compare_capacity,
    "diversity-study": cmd_diversity_study,
    "config": cmd_config,
}


def configure_logging(level: Optional[str]) -> None:
    name = (level or settings.LOG_LEVEL).upper()
    try:
        logging.basicConfig(
            level=name,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
            force=True,
        )
    except ValueError as exc:
        raise ArgumentError(f"unknown log level '{name}'") from exc


def _fail(payload: Dict[str, Any], code: int) -> int:
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    command = "mowe"
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        configure_logging(getattr(args, "log_level", None))
        return COMMANDS[command](args)
    except (ConfigError, ArgumentError) as exc:
        return _fail(exc.to_dict(), 2)
    except MoweError as exc:
        return _fail(exc.to_dict(), 1)
    except Exception as exc:
        logger.exception("unexpected failure in %s", command)
        return _fail({"error": "internal", "type": type(exc).__name__, "message": str(exc), "details": {}}, 1)


if __name__ == "__main__":
    sys.exit(main())
