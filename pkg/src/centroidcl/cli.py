"""Command-line interface: run experiments, sweep an axis, export embeddings."""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, parse_config
from .harness import SWEEP_AXES, export_embeddings, run_experiment, run_sweep
from .scenarios import ScenarioError


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="path to a JSON config file")
    parser.add_argument("--strategy", choices=("cm", "naive", "cumulative", "er"))
    parser.add_argument("--mode", choices=("til", "cil"))
    parser.add_argument("--lambda", dest="reg_weight", type=float,
                        help="weight of the embedding-distance regularizer")
    parser.add_argument("--support-size", type=int)
    parser.add_argument("--memory", type=int, help="replay memory capacity")
    parser.add_argument("--merging",
                        choices=("scale_translate", "linear", "offset", "none"))
    parser.add_argument("--seeds", help="comma-separated seed list, e.g. 0,1,2")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--save-models", action="store_true", default=None)


def _overrides_from(args: argparse.Namespace) -> dict:
    overrides: dict[str, object] = {}
    if args.strategy is not None:
        overrides["strategy"] = args.strategy
    if args.mode is not None:
        overrides["scenario.mode"] = args.mode
    if args.reg_weight is not None:
        overrides["train.lambda"] = args.reg_weight
    if args.support_size is not None:
        overrides["train.support_size"] = args.support_size
    if args.memory is not None:
        overrides["train.memory_capacity"] = args.memory
    if args.merging is not None:
        overrides["train.merging_variant"] = args.merging
    if args.seeds is not None:
        try:
            overrides["seeds"] = [int(s) for s in args.seeds.split(",") if s != ""]
        except ValueError:
            raise ConfigError(f"seeds: could not parse {args.seeds!r}")
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.save_models is not None:
        overrides["save_models"] = args.save_models
    return overrides


def _parse_sweep_values(axis: str, raw: str) -> list:
    items = [s for s in raw.split(",") if s != ""]
    if axis == "lambda":
        return [float(s) for s in items]
    if axis in ("support_size", "memory_capacity"):
        return [int(s) for s in items]
    return items


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="centroidcl",
        description="Centroid-matching continual learning experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment over its seeds")
    _add_common_flags(run_p)

    sweep_p = sub.add_parser("sweep", help="run one experiment per axis value")
    _add_common_flags(sweep_p)
    sweep_p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sweep_p.add_argument("--values", required=True,
                         help="comma-separated values for the axis")

    export_p = sub.add_parser("export-embeddings",
                              help="train one seed and export 2-d projections")
    _add_common_flags(export_p)
    export_p.add_argument("--seed", type=int, default=0)
    export_p.add_argument("--task", type=int, default=None,
                          help="restrict a task-incremental export to one task")

    args = parser.parse_args(argv)
    try:
        config = parse_config(args.config, _overrides_from(args))
        if args.command == "run":
            result = run_experiment(config, keep_artifacts=True)
            for outcome in result.outcomes:
                if outcome.status == "ok":
                    print(f"seed {outcome.seed}: accuracy={outcome.accuracy:.4f} "
                          f"bwt={outcome.bwt:.4f}"
                          f"{'' if outcome.bwt_defined else ' (bwt undefined)'}")
                else:
                    print(f"seed {outcome.seed}: aborted ({outcome.abort_reason})",
                          file=sys.stderr)
            agg = result.aggregate()
            if "accuracy_mean" in agg:
                print(f"mean accuracy={agg['accuracy_mean']:.4f} "
                      f"mean bwt={agg.get('bwt_mean', 0.0):.4f} "
                      f"over {agg['n_seeds']} seed(s)")
            print(f"results written to {config.out_dir}")
            return 1 if result.aborted else 0
        if args.command == "sweep":
            values = _parse_sweep_values(args.axis, args.values)
            rows = run_sweep(config, args.axis, values)
            for row in rows:
                acc = row.get("accuracy_mean")
                print(f"{args.axis}={row['value']}: "
                      f"accuracy={'n/a' if acc is None else f'{acc:.4f}'} "
                      f"({row['n_seeds']} seed(s), {row['aborted_seeds']} aborted)")
            print(f"sweep table written to {config.out_dir}/sweep.txt")
            return 1 if any(row["aborted_seeds"] for row in rows) else 0
        paths = export_embeddings(config, args.seed, config.out_dir, args.task)
        for path in paths:
            print(path)
        return 0
    except (ConfigError, ScenarioError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
