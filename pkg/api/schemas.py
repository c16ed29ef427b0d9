from datetime import datetime
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field

from core.evaluation import MetricsReport


class ExperimentRequest(BaseModel):
    # Flat experiment config keys, same names as the key=value config files
    overrides: Dict[str, Any] = Field(default_factory=dict)


class ExperimentResponse(BaseModel):
    status: str
    run_id: str
    metrics: MetricsReport
    gamma: Dict[str, Any]
    metrics_url: str
    generated_at: datetime


class SweepResponse(BaseModel):
    status: str
    rows: List[Dict[str, Any]]
    csv_url: str
    generated_at: datetime


class BoundRequest(BaseModel):
    user_degrees: List[int] = Field(min_length=1)
    k: int = Field(20, ge=1)
    c: float = Field(0.99, gt=0, lt=1)
    beta: Optional[float] = Field(None, gt=1, description="Fitted from user_degrees when omitted")
    x_min: float = Field(1.0, ge=1)
    raw_formula: bool = False


class BoundResponse(BaseModel):
    bound: float
    q: float
    p: float
    beta: float
    c: float
    k: int
    n_users_at_risk: int
    vacuous: bool
    diagnostic: Optional[str] = None


class PropositionResponse(BaseModel):
    verdict: str
    report: Dict[str, Any]


class DatasetInspectResponse(BaseModel):
    status: str
    n_users: int
    n_items: int
    n_interactions: int
    ingest_report: Dict[str, int]
    max_item_popularity: int
    median_item_popularity: float
    gamma: Optional[float] = None


class RunEvaluationResponse(BaseModel):
    status: str
    run_id: str
    metrics: MetricsReport
    # checkpoint came from the in-memory cache rather than disk
    cached: bool
    generated_at: datetime
