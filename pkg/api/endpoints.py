import logging
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import APIRouter, File, Form, HTTPException, Query, UploadFile, status
from fastapi.responses import FileResponse

from api.dependencies import output_root, resolve_dataset_path, resolve_run_file
from api.schemas import (
    BoundRequest,
    BoundResponse,
    DatasetInspectResponse,
    ExperimentRequest,
    ExperimentResponse,
    PropositionResponse,
    RunEvaluationResponse,
    SweepResponse,
)
from core.config import MANIFEST_NAME, ConfigError, ExperimentConfig, load_experiment_config
from core.dataset import FORMAT_PRESETS, DatasetError, parse_interactions
from core.estimator import dataset_gamma
from core.experiment import (
    METRICS_FILE,
    SWEEP_FILE,
    StageError,
    check_proposition,
    evaluate_saved_run,
    run_experiment,
    sweep_dir_name,
    sweep_lambda,
    sweep_rows,
)
from core.models_loader import is_model_cached
from core.theory import BoundInputs, DegenerateFitError, condition1_bound, fit_pareto_beta

logger = logging.getLogger(__name__)

router = APIRouter()

BASE_URL = os.getenv("BASE_URL", "http://localhost:8000")


def get_file_url(run_id: str, filename: str) -> str:
    return f"{BASE_URL}/downloads/{run_id}/{filename}"


def _config_from_request(request: ExperimentRequest) -> ExperimentConfig:
    overrides = dict(request.overrides)
    # runs always land under the served output root so they stay downloadable
    overrides["output_dir"] = str(output_root())
    if overrides.get("dataset_path"):
        overrides["dataset_path"] = str(resolve_dataset_path(str(overrides["dataset_path"])))
    try:
        return load_experiment_config(None, overrides)
    except ConfigError as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))


def _stage_failure(e: StageError) -> HTTPException:
    logger.error(f"Stage '{e.stage}' failed: {e}")
    return HTTPException(status_code=status.HTTP_500_INTERNAL_SERVER_ERROR, detail=str(e))


@router.post("/v1/datasets/inspect", response_model=DatasetInspectResponse)
def inspect_dataset(
    file: UploadFile = File(...),
    format: str = Form("csv"),
    dataset_name: Optional[str] = Form(None),
):
    """Parse an uploaded interaction file and summarise it."""
    if format not in FORMAT_PRESETS:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail=f"Unknown format '{format}'. Must be one of {sorted(FORMAT_PRESETS)}.",
        )
    try:
        log = parse_interactions(file.file.read(), FORMAT_PRESETS[format])
    except DatasetError as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))

    gamma = None
    if dataset_name:
        try:
            gamma = dataset_gamma(dataset_name)
        except ValueError:
            logger.info(f"No known gamma for dataset '{dataset_name}'")

    q_star = log.item_degrees()
    return DatasetInspectResponse(
        status="success",
        n_users=log.n_users,
        n_items=log.n_items,
        n_interactions=log.n_interactions,
        ingest_report=log.report.to_dict() if log.report else {},
        max_item_popularity=int(q_star.max()) if q_star.size else 0,
        median_item_popularity=float(np.median(q_star)) if q_star.size else 0.0,
        gamma=gamma,
    )


@router.post("/v1/experiments/run", response_model=ExperimentResponse)
def run_experiment_endpoint(request: ExperimentRequest):
    """Run parse, split, train and evaluate for one configuration."""
    config = _config_from_request(request)
    try:
        outcome = run_experiment(config)
    except StageError as e:
        raise _stage_failure(e)
    except ConfigError as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))

    run_id = outcome.run_dir.name
    return ExperimentResponse(
        status="success",
        run_id=run_id,
        metrics=outcome.metrics,
        gamma=outcome.gamma.to_dict(),
        metrics_url=get_file_url(run_id, METRICS_FILE),
        generated_at=datetime.now(timezone.utc),
    )


@router.post("/v1/experiments/sweep", response_model=SweepResponse)
def sweep_endpoint(request: ExperimentRequest):
    """Sweep lambda_f and return one row per grid point plus the baseline."""
    config = _config_from_request(request)
    try:
        frame = sweep_lambda(config, parallel=False)
    except StageError as e:
        raise _stage_failure(e)
    except ConfigError as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))

    sweep_dir = sweep_dir_name(config)
    return SweepResponse(
        status="success",
        rows=sweep_rows(frame),
        csv_url=get_file_url(sweep_dir, SWEEP_FILE),
        generated_at=datetime.now(timezone.utc),
    )


@router.post("/v1/theory/bound", response_model=BoundResponse)
def bound_endpoint(request: BoundRequest):
    """Upper bound on the probability of condition-1 for explicit user degrees."""
    beta = request.beta
    if beta is None:
        try:
            beta = fit_pareto_beta(request.user_degrees, x_min=request.x_min).beta
        except DegenerateFitError as e:
            raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))
    try:
        inputs = BoundInputs(user_degrees=np.asarray(request.user_degrees), k=request.k, c=request.c, beta=beta)
    except ValueError as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))
    result = condition1_bound(inputs, enforce_tail_regime=not request.raw_formula)
    return BoundResponse(**result.to_dict())


@router.post("/v1/theory/check-proposition", response_model=PropositionResponse)
def check_proposition_endpoint(request: ExperimentRequest):
    """Fit beta on a configured dataset and compare the condition-1 bound to the threshold."""
    config = _config_from_request(request)
    try:
        report = check_proposition(config)
    except StageError as e:
        raise _stage_failure(e)
    except ConfigError as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))
    return PropositionResponse(verdict=report["verdict"], report=report)


@router.get("/v1/runs/{run_id}/metrics")
def get_run_metrics(run_id: str):
    """Metrics JSON of a finished run."""
    path: Path = resolve_run_file(run_id, METRICS_FILE)
    return FileResponse(path, media_type="application/json")


@router.post("/v1/runs/{run_id}/evaluate", response_model=RunEvaluationResponse)
def evaluate_run_endpoint(run_id: str, k: Optional[int] = Query(None, ge=1)):
    """Re-score a finished run from its checkpoint, served from the model cache when it is retained."""
    run_dir = resolve_run_file(run_id, MANIFEST_NAME).parent
    try:
        manifest = load_experiment_config(run_dir / MANIFEST_NAME)
        cached = is_model_cached(run_dir / f"model.{manifest.checkpoint_format}")
        metrics = evaluate_saved_run(run_dir, k=k)
    except StageError as e:
        raise _stage_failure(e)
    except ConfigError as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))
    return RunEvaluationResponse(
        status="success",
        run_id=run_id,
        metrics=metrics,
        cached=cached,
        generated_at=datetime.now(timezone.utc),
    )


@router.get("/downloads/{run_id}/{filename}")
def download_artifact(run_id: str, filename: str):
    """Download a run artifact (checkpoint, traces, recommendations, manifest)."""
    path = resolve_run_file(run_id, filename)
    return FileResponse(path)
