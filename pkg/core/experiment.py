import json
import logging
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch

from core.config import MANIFEST_NAME, ConfigError, ExperimentConfig, QStarSource, load_experiment_config, write_manifest
from core.dataset import DatasetError, InteractionLog, SplitBundle, parse_interactions, stratified_split
from core.estimator import GammaEstimate, GammaMethod, estimate_gamma, exposure_proxy, interaction_rate
from core.evaluation import MetricsReport, evaluate_run, hit_counts, report_row
from core.ml_models import ModelKind, PreferenceModel, init_model, top_k
from core.models_loader import apply_thread_setting, get_device, get_or_load_model, save_checkpoint
from core.theory import BoundInputs, DegenerateFitError, bound_grid, condition1_bound, fit_pareto_beta
from core.train import TrainResult, train, write_loss_trace

logger = logging.getLogger(__name__)

FAILED_MARKER = "FAILED"
METRICS_FILE = "metrics.json"
LOSS_TRACE_FILE = "loss_trace.csv"
RECOMMENDATIONS_FILE = "recommendations.tsv"
RATE_FILE = "interaction_rate.csv"
SWEEP_FILE = "sweep.csv"


class StageError(RuntimeError):
    """A pipeline stage failed; `stage` names which one."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@contextmanager
def stage(name: str) -> Iterator[None]:
    logger.info(f"Stage '{name}' started")
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        logger.error(f"Stage '{name}' failed: {e}")
        raise StageError(name, str(e)) from e
    logger.info(f"Stage '{name}' finished")


@dataclass(frozen=True)
class PreparedData:
    log: InteractionLog
    split: SplitBundle

    def q_star(self, source: QStarSource) -> np.ndarray:
        """Reference popularity for estimator statistics."""
        if source is QStarSource.FULL:
            return self.log.item_degrees()
        return self.split.train.item_degrees()


@dataclass
class RunOutcome:
    run_dir: Path
    metrics: MetricsReport
    gamma: GammaEstimate
    result: TrainResult


def _torch_dtype(config: ExperimentConfig) -> torch.dtype:
    return torch.float64 if config.dtype == "float64" else torch.float32


def prepare_data(config: ExperimentConfig) -> PreparedData:
    if not config.dataset_path:
        raise ConfigError("dataset_path is not set")
    with stage("parse"):
        log = parse_interactions(config.dataset_path, config.interaction_format())
        if log.is_empty():
            raise DatasetError(f"'{config.dataset_path}' holds no interactions")
    with stage("split"):
        split = stratified_split(log, config.split_ratios, seed=config.split_seed)
    return PreparedData(log=log, split=split)


def build_model(config: ExperimentConfig, split: SplitBundle) -> PreferenceModel:
    return init_model(
        config.model,
        split.train.n_users,
        split.train.n_items,
        config.dim,
        n_layers=config.n_layers,
        init_scale=config.init_scale,
        seed=config.seed,
        train=split.train,
        dtype=_torch_dtype(config),
        device=get_device(),
    )


def resolve_gamma(config: ExperimentConfig, data: PreparedData) -> GammaEstimate:
    """Config-supplied gamma, or a power-law fit on the exposure of a plain MF model trained on this split."""
    with stage("estimate-gamma"):
        if config.gamma_method is GammaMethod.CONFIG_SUPPLIED:
            return estimate_gamma(data.split.train, GammaMethod.CONFIG_SUPPLIED, gamma=config.gamma, dataset_name=config.dataset_name)
        plain = config.model_copy(update={"lambda_f": 0.0, "model": ModelKind.MF, "early_stopping_patience": None})
        model = build_model(plain, data.split)
        train(model, data.split, plain.train_config(gamma=None))
        return estimate_gamma(
            data.q_star(config.q_star_source),
            GammaMethod.POWERLAW_FIT,
            gamma=config.gamma,
            dataset_name=config.dataset_name,
            exposure=exposure_proxy(model),
        )


def _mark_failed(run_dir: Path, error: StageError) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / FAILED_MARKER).write_text(f"stage={error.stage}\n{error}\n")


def run_experiment(
    config: ExperimentConfig,
    data: Optional[PreparedData] = None,
    gamma: Optional[GammaEstimate] = None,
) -> RunOutcome:
    """parse -> split -> train -> top_k -> metrics, with every artifact written under one run directory."""
    run_dir = config.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / FAILED_MARKER).unlink(missing_ok=True)
    apply_thread_setting()

    try:
        data = data or prepare_data(config)
        gamma = gamma or resolve_gamma(config, data)

        with stage("train"):
            model = build_model(config, data.split)
            result = train(model, data.split, config.train_config(gamma=gamma.value))

        with stage("evaluate"):
            test = data.split.test
            q_star = data.q_star(config.q_star_source)
            users = np.flatnonzero(test.user_degrees() > 0)
            run = top_k(model, users, config.k, exclude=data.split.train, n_workers=1 if config.deterministic else config.n_workers)
            metrics = evaluate_run(
                run, test, q_star, gamma.value, config.k, mi_bins=config.mi_bins, snips_eta=config.snips_eta
            )

        with stage("write"):
            checkpoint = run_dir / f"model.{config.checkpoint_format}"
            save_checkpoint(model, checkpoint, seed=config.seed, checkpoint_format=config.checkpoint_format)
            payload = {
                "metrics": metrics.model_dump(),
                "gamma": gamma.to_dict(),
                "lambda_f": config.lambda_f,
                "model": config.model.value,
                "best_epoch": result.best_epoch,
                "stopped_early": result.stopped_early,
            }
            with open(run_dir / METRICS_FILE, "w") as f:
                json.dump(payload, f, indent=2, sort_keys=True)
            write_loss_trace(result.trace, run_dir / LOSS_TRACE_FILE)
            run.write_delimited(run_dir / RECOMMENDATIONS_FILE, id_maps=data.log.id_maps)
            interaction_rate(hit_counts(run, test, config.k), q_star, gamma.value).write_csv(
                run_dir / RATE_FILE, id_maps=data.log.id_maps
            )
            write_manifest(
                config,
                run_dir / MANIFEST_NAME,
                extra={"gamma": gamma.value, "gamma_method": gamma.method.value, "checkpoint": checkpoint.name},
            )
    except StageError as e:
        _mark_failed(run_dir, e)
        raise

    logger.info(f"Run complete: {run_dir}")
    return RunOutcome(run_dir=run_dir, metrics=metrics, gamma=gamma, result=result)


def evaluate_saved_run(run_dir: Union[str, Path], k: Optional[int] = None) -> MetricsReport:
    """Re-score a finished run from its manifest and checkpoint, optionally at a different k."""
    run_dir = Path(run_dir)
    config = load_experiment_config(run_dir / MANIFEST_NAME)
    if k is not None:
        config = config.model_copy(update={"k": k})
    try:
        with open(run_dir / METRICS_FILE, "r") as f:
            saved = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise StageError("load", f"Cannot read {METRICS_FILE} in '{run_dir}': {e}") from e

    data = prepare_data(config)
    with stage("load"):
        model = get_or_load_model(run_dir / f"model.{config.checkpoint_format}", train=data.split.train)
    with stage("evaluate"):
        test = data.split.test
        users = np.flatnonzero(test.user_degrees() > 0)
        run = top_k(model, users, config.k, exclude=data.split.train)
        return evaluate_run(
            run,
            test,
            data.q_star(config.q_star_source),
            float(saved["gamma"]["value"]),
            config.k,
            mi_bins=config.mi_bins,
            snips_eta=config.snips_eta,
        )


def _sweep_point(config: ExperimentConfig, gamma: GammaEstimate, data: Optional[PreparedData]) -> Dict[str, Any]:
    try:
        outcome = run_experiment(config, data=data, gamma=gamma)
        row = report_row(
            outcome.metrics,
            model=config.model.value,
            seed=config.seed,
            lambda_f=config.lambda_f,
            status="ok",
            run_dir=str(outcome.run_dir),
        )
        row["error"] = None
        return row
    except Exception as e:
        logger.error(f"Sweep point lambda_f={config.lambda_f} failed: {e}")
        return {
            "model": config.model.value,
            "seed": config.seed,
            "lambda_f": config.lambda_f,
            "status": "error",
            "run_dir": None,
            "error": str(e),
        }


def sweep_dir_name(config: ExperimentConfig) -> str:
    return f"sweep-{config.model.value}-s{config.seed}-{config.digest()}"


def sweep_lambda(config: ExperimentConfig, parallel: bool = False) -> pd.DataFrame:
    """
    One run per lambda_f value plus a lambda_f = 0 baseline row first. Failed
    points become rows with status 'error'. Writes sweep.csv under the sweep
    directory and returns the same table.
    """
    values = config.sweep_values()
    if not values:
        raise ConfigError("lambda_f grid is empty")
    sweep_dir = Path(config.output_dir).resolve() / sweep_dir_name(config)
    sweep_dir.mkdir(parents=True, exist_ok=True)

    data = prepare_data(config)
    gamma = resolve_gamma(config, data)
    points = [
        config.model_copy(update={"lambda_f": value, "output_dir": str(sweep_dir), "run_name": f"lambda-{index:02d}"})
        for index, value in enumerate([0.0] + list(values))
    ]
    logger.info(f"Sweeping {len(points)} lambda_f values into '{sweep_dir}' (parallel={parallel})")

    if parallel and config.n_workers > 1:
        # workers rebuild the split from the config; the split is a pure function of it
        with ProcessPoolExecutor(max_workers=config.n_workers) as pool:
            rows = list(pool.map(_sweep_point, points, [gamma] * len(points), [None] * len(points)))
    else:
        rows = [_sweep_point(point, gamma, data) for point in points]

    frame = pd.DataFrame(rows)
    leading = ["model", "seed", "lambda_f", "status", "recall_snips", "inv_di"]
    frame = frame[[c for c in leading if c in frame.columns] + [c for c in frame.columns if c not in leading]]
    frame.to_csv(sweep_dir / SWEEP_FILE, index=False)
    logger.info(f"Sweep table written to '{sweep_dir / SWEEP_FILE}'")
    return frame


def check_proposition(config: ExperimentConfig) -> Dict[str, Any]:
    """Fit beta on the training degrees, bound the probability of condition-1 and compare it to the threshold."""
    data = prepare_data(config)
    degrees = data.split.train.user_degrees()
    degrees = degrees[degrees > 0]
    report: Dict[str, Any] = {
        "c": config.proposition_c,
        "k": config.k,
        "threshold": config.proposition_threshold,
        "n_users": int(degrees.size),
        "x_min": config.pareto_x_min,
    }
    with stage("theory"):
        try:
            fit = fit_pareto_beta(degrees, x_min=config.pareto_x_min)
        except DegenerateFitError as e:
            logger.warning(f"Proposition check inconclusive: {e}")
            report.update({"beta": None, "p": None, "q": None, "bound": None, "verdict": "inconclusive", "diagnostic": str(e)})
            return report
        result = condition1_bound(
            BoundInputs(user_degrees=degrees, k=config.k, c=config.proposition_c, beta=fit.beta),
            enforce_tail_regime=not config.raw_bound_formula,
        )
    passed = not result.vacuous and result.bound < config.proposition_threshold
    report.update({
        "beta": fit.beta,
        "p": result.p,
        "q": result.q,
        "bound": result.bound,
        "n_users_at_risk": result.n_users_at_risk,
        "vacuous": result.vacuous,
        "verdict": "pass" if passed else "fail",
        "diagnostic": result.diagnostic,
    })
    logger.info(f"Proposition check: beta={fit.beta:.4f} q={result.q:.4g} bound={result.bound:.4g} -> {report['verdict']}")
    return report


def proposition_grid(config: ExperimentConfig, cs: Sequence[float], ks: Sequence[int]) -> pd.DataFrame:
    data = prepare_data(config)
    degrees = data.split.train.user_degrees()
    degrees = degrees[degrees > 0]
    with stage("theory"):
        fit = fit_pareto_beta(degrees, x_min=config.pareto_x_min)
        return bound_grid(degrees, fit.beta, cs, ks, enforce_tail_regime=not config.raw_bound_formula)


def write_split(config: ExperimentConfig) -> Path:
    data = prepare_data(config)
    with stage("write"):
        return data.split.write(Path(config.output_dir) / f"split-s{config.split_seed}-{config.digest()}")


def ingest_summary(config: ExperimentConfig) -> Dict[str, Any]:
    if not config.dataset_path:
        raise ConfigError("dataset_path is not set")
    with stage("parse"):
        log = parse_interactions(config.dataset_path, config.interaction_format())
    q_star = log.item_degrees()
    return {
        "n_users": log.n_users,
        "n_items": log.n_items,
        "n_interactions": log.n_interactions,
        "report": log.report.to_dict() if log.report else None,
        "max_item_popularity": int(q_star.max()) if q_star.size else 0,
        "median_item_popularity": float(np.median(q_star)) if q_star.size else 0.0,
    }


def estimate_gamma_report(config: ExperimentConfig) -> Dict[str, Any]:
    data = prepare_data(config)
    estimate = resolve_gamma(config, data)
    return {"dataset_name": config.dataset_name, **estimate.to_dict()}


def sweep_rows(frame: pd.DataFrame) -> List[Dict[str, Any]]:
    """JSON-safe records of a sweep table (NaN becomes None)."""
    return json.loads(frame.to_json(orient="records"))
