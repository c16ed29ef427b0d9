import argparse
import json
import logging
import sys
from pathlib import Path

from dotenv import load_dotenv

from core.config import ConfigError, load_experiment_config, parse_overrides
from core.experiment import (
    StageError,
    check_proposition,
    estimate_gamma_report,
    evaluate_saved_run,
    ingest_summary,
    proposition_grid,
    run_experiment,
    sweep_lambda,
    write_split,
)

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_STAGE_FAILURE = 1
EXIT_CONFIG_ERROR = 2

# Named flags and the config keys they set; they override --config and --set
FLAG_KEYS = {
    "dataset": "dataset_path",
    "dataset_name": "dataset_name",
    "format": "format",
    "model": "model",
    "epochs": "epochs",
    "lambda_f": "lambda_f",
    "gamma": "gamma",
    "k": "k",
    "seed": "seed",
    "output_dir": "output_dir",
}


def _floats(text: str):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str):
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="Flat key=value experiment config file.")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="Override one config key (repeatable).")
    common.add_argument("--dataset", type=str, help="Path to the interaction file.")
    common.add_argument("--dataset-name", type=str, help="Benchmark name, used for the default gamma.")
    common.add_argument("--format", type=str, help="Format preset: csv, movielens-1m, movielens-100k, gowalla.")
    common.add_argument("--model", type=str, choices=["mf", "lightgcn"], help="Preference model kind.")
    common.add_argument("--epochs", type=int, help="Training epochs.")
    common.add_argument("--lambda-f", type=float, help="IPL regularization weight.")
    common.add_argument("--gamma", type=float, help="Exposure exponent.")
    common.add_argument("-k", type=int, help="Recommendation list length.")
    common.add_argument("--seed", type=int, help="Training seed.")
    common.add_argument("--output-dir", type=str, help="Output root (defaults to $IPL_OUTPUT_ROOT or ./runs).")
    common.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")

    parser = argparse.ArgumentParser(
        description="Train, evaluate and sweep popularity-debiased recommenders."
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="Parse a dataset and print an ingest summary.")
    sub.add_parser("split", parents=[common], help="Write the stratified train/validation/test split.")
    sub.add_parser("train", parents=[common], help="Run parse, split, train and evaluate into a run directory.")

    evaluate = sub.add_parser("evaluate", parents=[common], help="Re-score a finished run from its manifest.")
    evaluate.add_argument("run_dir", type=str, help="Run directory holding manifest.txt and the checkpoint.")

    sweep = sub.add_parser("sweep", parents=[common], help="Sweep lambda_f and write sweep.csv.")
    sweep.add_argument("--parallel", action="store_true", help="Run sweep points in a process pool.")

    check = sub.add_parser("check-proposition", parents=[common], help="Bound the probability of condition-1.")
    check.add_argument("--grid-c", type=_floats, help="Comma-separated c values for a bound grid.")
    check.add_argument("--grid-k", type=_ints, help="Comma-separated k values for a bound grid.")
    check.add_argument("--grid-out", type=str, help="CSV path for the bound grid.")

    sub.add_parser("estimate-gamma", parents=[common], help="Resolve or fit the exposure exponent gamma.")
    return parser


def resolve_config(args: argparse.Namespace):
    overrides = parse_overrides(args.set)
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return load_experiment_config(args.config, overrides)


def _print(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True, default=str))


def main(argv=None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        if args.command == "evaluate" and not args.config:
            args.config = str(Path(args.run_dir) / "manifest.txt")
        config = resolve_config(args)

        if args.command == "ingest":
            _print(ingest_summary(config))
        elif args.command == "split":
            _print({"split_dir": str(write_split(config))})
        elif args.command == "train":
            outcome = run_experiment(config)
            _print({"run_dir": str(outcome.run_dir), "metrics": outcome.metrics.model_dump()})
        elif args.command == "evaluate":
            _print(evaluate_saved_run(args.run_dir, k=args.k).model_dump())
        elif args.command == "sweep":
            frame = sweep_lambda(config, parallel=args.parallel)
            print(frame.to_csv(index=False), end="")
        elif args.command == "check-proposition":
            report = check_proposition(config)
            if args.grid_c or args.grid_k:
                grid = proposition_grid(config, args.grid_c or [config.proposition_c], args.grid_k or [config.k])
                out = args.grid_out or str(Path(config.output_dir) / "bound_grid.csv")
                Path(out).parent.mkdir(parents=True, exist_ok=True)
                grid.to_csv(out, index=False)
                report["grid_csv"] = out
            _print(report)
        elif args.command == "estimate-gamma":
            _print(estimate_gamma_report(config))
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG_ERROR
    except StageError as e:
        logger.error(f"Stage '{e.stage}' failed: {e}")
        return EXIT_STAGE_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
