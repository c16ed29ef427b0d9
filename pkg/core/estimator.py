import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
from scipy import stats

from core.dataset import IdMaps, InteractionLog
from core.ml_models import PreferenceModel

logger = logging.getLogger(__name__)

# Exposure exponents fitted per benchmark with a plain MF model
DATASET_GAMMA: Dict[str, float] = {
    "movielens-1m": 1.826,
    "gowalla": 1.285,
    "yelp": 1.552,
    "amazon-book": 1.446,
}

SOURCE_RUN_OBSERVED = "run-observed"
SOURCE_MODEL_EXPECTED = "model-expected"


class GammaMethod(str, Enum):
    CONFIG_SUPPLIED = "config-supplied"
    POWERLAW_FIT = "powerlaw-fit"


def normalize_dataset_name(name: str) -> str:
    """'MovieLens-1M', 'ml-1m' and 'movielens_1m' all map to 'movielens-1m'."""
    key = name.strip().lower().replace("_", "-").replace(" ", "-")
    aliases = {"ml-1m": "movielens-1m", "ml1m": "movielens-1m", "amazonbook": "amazon-book", "amazon-books": "amazon-book"}
    return aliases.get(key, key)


def dataset_gamma(name: str) -> float:
    key = normalize_dataset_name(name)
    if key not in DATASET_GAMMA:
        raise ValueError(
            f"No known gamma for dataset '{name}'. Supply gamma explicitly or use one of {sorted(DATASET_GAMMA)}."
        )
    return DATASET_GAMMA[key]


@dataclass(frozen=True)
class GammaEstimate:
    value: float
    method: GammaMethod
    diagnostics: Optional[Dict[str, Any]] = None

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"gamma must be finite, got {self.value}")
        if self.method is GammaMethod.CONFIG_SUPPLIED and self.diagnostics is not None:
            raise ValueError("A config-supplied gamma carries no fit diagnostics")

    def to_dict(self) -> Dict[str, Any]:
        return {"value": self.value, "method": self.method.value, "diagnostics": self.diagnostics}


@dataclass(frozen=True)
class InteractionRate:
    """Per-item r_i = C_i* / (Q_i*)^(2-gamma); items with Q* = 0 hold NaN and are listed in skipped_items."""

    values: np.ndarray
    included: np.ndarray
    c_star: np.ndarray
    q_star: np.ndarray
    gamma: float
    source: str = SOURCE_RUN_OBSERVED
    skipped_items: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    @property
    def included_values(self) -> np.ndarray:
        return self.values[self.included]

    def to_frame(self, id_maps: Optional[IdMaps] = None) -> pd.DataFrame:
        items = np.arange(self.values.size)
        return pd.DataFrame({
            "item": [id_maps.item_ids[i] for i in items] if id_maps else items,
            "C*": self.c_star,
            "Q*": self.q_star,
            "r": self.values,
        })

    def write_csv(self, path, id_maps: Optional[IdMaps] = None) -> None:
        self.to_frame(id_maps).to_csv(path, index=False)


def interaction_rate(
    c_star: Sequence[float],
    q_star: Sequence[float],
    gamma: float,
    source: str = SOURCE_RUN_OBSERVED,
    n_users: Optional[int] = None,
) -> InteractionRate:
    c_star = np.asarray(c_star, dtype=np.float64)
    q_star = np.asarray(q_star, dtype=np.float64)
    if c_star.shape != q_star.shape:
        raise ValueError(f"c_star and q_star must align, got {c_star.shape} and {q_star.shape}")
    if np.any(c_star < 0) or np.any(q_star < 0):
        raise ValueError("Interaction counts must be non-negative")
    if n_users is not None and np.any(c_star > n_users):
        raise ValueError(f"C* cannot exceed the number of users ({n_users})")
    if not np.isfinite(gamma):
        raise ValueError(f"gamma must be finite, got {gamma}")

    included = q_star > 0
    values = np.full(c_star.shape, np.nan)
    values[included] = c_star[included] / np.power(q_star[included], 2.0 - gamma)
    skipped = np.flatnonzero(~included)
    if skipped.size:
        logger.debug(f"{skipped.size} items with Q*=0 excluded from the interaction rate")
    return InteractionRate(
        values=values,
        included=included,
        c_star=c_star,
        q_star=q_star,
        gamma=float(gamma),
        source=source,
        skipped_items=skipped,
    )


def unobserved_items(q_star: Sequence[float]) -> np.ndarray:
    """Indices of items with no reference interactions (Q* <= 0)."""
    return np.flatnonzero(np.asarray(q_star) <= 0)


def snips_weights(q_star: Sequence[float], eta: float) -> np.ndarray:
    """
    Inverse-propensity weights w_i = (Q_i*)^-eta. Items with Q* = 0 get weight 0,
    except at eta = 0 where every weight is exactly 1 so SNIPS recall reduces to recall.
    """
    q_star = np.asarray(q_star, dtype=np.float64)
    if eta == 0:
        return np.ones_like(q_star)
    weights = np.zeros_like(q_star)
    unobserved = unobserved_items(q_star)
    if unobserved.size:
        logger.warning(f"{unobserved.size} items have Q* = 0 and get SNIPS weight 0")
    observed = np.ones(q_star.size, dtype=bool)
    observed[unobserved] = False
    weights[observed] = np.power(q_star[observed], -float(eta))
    return weights


def exposure_proxy(model: PreferenceModel) -> np.ndarray:
    """Per-item expected exposure sum_u sigma(y_ui) over every user."""
    with torch.no_grad():
        user_vecs, item_vecs = model.final_embeddings()
        total = torch.zeros(model.n_items, dtype=torch.float64, device=model.device)
        for start in range(0, model.n_users, 1024):
            block = user_vecs[start:start + 1024] @ item_vecs.T
            total += torch.sigmoid(block.double()).sum(dim=0)
    return total.cpu().numpy()


def fit_powerlaw_exponent(q_star: np.ndarray, exposure: np.ndarray) -> Dict[str, Any]:
    """Least-squares slope of log(exposure) on log(Q*) over items with both positive."""
    q_star = np.asarray(q_star, dtype=np.float64)
    exposure = np.asarray(exposure, dtype=np.float64)
    usable = (q_star > 0) & (exposure > 0) & np.isfinite(exposure)
    x, y = np.log(q_star[usable]), np.log(exposure[usable])
    if x.size < 2 or np.ptp(x) == 0:
        return {"degenerate": True, "n_items": int(x.size)}
    fit = stats.linregress(x, y)
    residual = float(np.sqrt(np.mean((y - (fit.intercept + fit.slope * x)) ** 2)))
    return {
        "degenerate": False,
        "slope": float(fit.slope),
        "intercept": float(fit.intercept),
        "r_value": float(fit.rvalue),
        "residual_rms": residual,
        "n_items": int(x.size),
    }


def estimate_gamma(
    log: Union[InteractionLog, np.ndarray],
    method: Union[GammaMethod, str] = GammaMethod.CONFIG_SUPPLIED,
    gamma: Optional[float] = None,
    dataset_name: Optional[str] = None,
    exposure: Optional[np.ndarray] = None,
) -> GammaEstimate:
    """
    Resolve the exposure exponent. config-supplied returns `gamma` or the
    per-dataset constant; powerlaw-fit regresses the exposure proxy on Q*
    and falls back to the configured value when the fit is degenerate.
    """
    method = GammaMethod(method)

    def _fallback() -> float:
        if gamma is not None:
            return float(gamma)
        if dataset_name:
            return dataset_gamma(dataset_name)
        raise ValueError("No gamma configured and no known dataset name to fall back on")

    if method is GammaMethod.CONFIG_SUPPLIED:
        return GammaEstimate(value=_fallback(), method=method)

    if exposure is None:
        raise ValueError("powerlaw-fit needs an exposure proxy (see exposure_proxy)")
    q_star = log.item_degrees() if isinstance(log, InteractionLog) else np.asarray(log)
    diagnostics = fit_powerlaw_exponent(q_star, exposure)
    if diagnostics["degenerate"]:
        value = _fallback()
        logger.warning(f"Power-law fit is degenerate (constant popularity); falling back to gamma={value}")
        return GammaEstimate(value=value, method=method, diagnostics=diagnostics)
    logger.info(f"Power-law fit gamma={diagnostics['slope']:.4f} (rms residual {diagnostics['residual_rms']:.4g})")
    return GammaEstimate(value=diagnostics["slope"], method=method, diagnostics=diagnostics)
