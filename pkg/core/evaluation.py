import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from sklearn.metrics import mutual_info_score

from core.dataset import InteractionLog
from core.estimator import SOURCE_RUN_OBSERVED, InteractionRate, interaction_rate, snips_weights
from core.ml_models import RecommendationRun

logger = logging.getLogger(__name__)

DEFAULT_MI_BINS = 10


class MetricsReport(BaseModel):
    k: int
    n_users_evaluated: int
    precision_at_k: float = Field(ge=0, le=100)
    recall_at_k: float = Field(ge=0, le=100)
    ndcg_at_k: float = Field(ge=0, le=100)
    snips_recall: float = Field(ge=0)
    snips_users_excluded: int = 0
    mi: Optional[float] = Field(None, ge=0)
    di: Optional[float] = Field(None, ge=0)
    exposure_di: Optional[float] = Field(None, ge=0)
    interaction_recall: float = Field(ge=0)
    skipped_items: int
    gamma: float
    snips_eta: float
    mi_bins: int


def _user_hits(run: RecommendationRun, test: InteractionLog, k: int) -> List[Tuple[int, np.ndarray, np.ndarray]]:
    """(user, top-k list, hit mask) for every user with a non-empty test set, ascending user index."""
    if k > run.k:
        raise ValueError(f"k={k} exceeds the run's list length {run.k}")
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    rows = []
    for u in np.flatnonzero(test.user_degrees() > 0):
        items = run.list_for(u)[:k]
        rows.append((int(u), items, np.isin(items, test.by_user(u))))
    return rows


def _ndcg(hit_mask: np.ndarray, n_relevant: int, k: int) -> float:
    discounts = 1.0 / np.log2(np.arange(2, k + 2, dtype=np.float64))
    dcg = discounts[: hit_mask.size][hit_mask].sum()
    idcg = discounts[: min(k, n_relevant)].sum()
    return float(dcg / idcg)


def precision_recall_ndcg(run: RecommendationRun, test: InteractionLog, k: int) -> Tuple[float, float, float]:
    """Macro-averaged Precision@k, Recall@k and NDCG@k, all multiplied by 100."""
    rows = _user_hits(run, test, k)
    if not rows:
        return 0.0, 0.0, 0.0
    degrees = test.user_degrees()
    precision, recall, ndcg = [], [], []
    for u, _, hits in rows:
        n_hits = int(hits.sum())
        n_relevant = int(degrees[u])
        precision.append(n_hits / k)
        recall.append(n_hits / n_relevant)
        ndcg.append(_ndcg(hits, n_relevant, k))
    return 100.0 * float(np.mean(precision)), 100.0 * float(np.mean(recall)), 100.0 * float(np.mean(ndcg))


def snips_recall_detail(
    run: RecommendationRun, test: InteractionLog, weights: np.ndarray, k: int
) -> Tuple[float, int]:
    """SNIPS recall plus the number of users dropped because all their test items weigh 0."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.size != test.n_items:
        raise ValueError(f"Expected {test.n_items} item weights, got {weights.size}")
    values, excluded = [], 0
    for u, items, hits in _user_hits(run, test, k):
        denominator = weights[test.by_user(u)].sum()
        if denominator <= 0:
            excluded += 1
            continue
        values.append(weights[items[hits]].sum() / denominator)
    if excluded:
        logger.warning(f"{excluded} users excluded from SNIPS recall (all test items have weight 0)")
    return (float(np.mean(values)) if values else 0.0), excluded


def snips_recall(run: RecommendationRun, test: InteractionLog, weights: np.ndarray, k: int) -> float:
    return snips_recall_detail(run, test, weights, k)[0]


def hit_counts(run: RecommendationRun, test: InteractionLog, k: int) -> np.ndarray:
    """C_i*: users who got item i in their top-k list and hold it in test."""
    counts = np.zeros(test.n_items, dtype=np.int64)
    for _, items, hits in _user_hits(run, test, k):
        np.add.at(counts, items[hits], 1)
    return counts


def recommendation_counts(run: RecommendationRun, n_items: int, k: int) -> np.ndarray:
    """Times each item appears in a top-k list, the exposure-side count."""
    if k > run.k:
        raise ValueError(f"k={k} exceeds the run's list length {run.k}")
    counts = np.zeros(n_items, dtype=np.int64)
    for items in run.lists:
        np.add.at(counts, items[:k], 1)
    return counts


def dispersion_index(rate: InteractionRate) -> Optional[float]:
    """std/mean of r over included items; None when the mean is 0 or nothing is included."""
    values = rate.included_values
    if values.size == 0:
        return None
    mean = values.mean()
    if mean <= 0:
        return None
    return float(np.std(values) / mean)


def di(
    run: RecommendationRun,
    test: InteractionLog,
    q_star: np.ndarray,
    gamma: float,
    k: int,
) -> Optional[float]:
    rate = interaction_rate(hit_counts(run, test, k), q_star, gamma, source=SOURCE_RUN_OBSERVED)
    value = dispersion_index(rate)
    if value is None:
        logger.warning("DI undefined: no hits on any included item")
    return value


def exposure_di(run: RecommendationRun, q_star: np.ndarray, gamma: float, k: int) -> Optional[float]:
    rate = interaction_rate(recommendation_counts(run, len(q_star), k), q_star, gamma)
    return dispersion_index(rate)


def equal_mass_bins(values: np.ndarray, bins: int) -> np.ndarray:
    """Quantile bin index per value; a value equal to an edge goes to the lower bin."""
    edges = np.quantile(values, np.linspace(0.0, 1.0, bins + 1)[1:-1])
    return np.searchsorted(edges, values, side="left")


def mi(r: Sequence[float], q_star: Sequence[float], bins: int = DEFAULT_MI_BINS) -> float:
    """Mutual information (nats) between r and Q* after equal-mass binning; NaN entries of r are dropped."""
    r = np.asarray(r, dtype=np.float64)
    q_star = np.asarray(q_star, dtype=np.float64)
    if r.shape != q_star.shape:
        raise ValueError("r and q_star must align")
    if bins < 2:
        raise ValueError(f"MI needs at least 2 bins, got {bins}")
    keep = np.isfinite(r)
    r, q_star = r[keep], q_star[keep]
    if r.size < 2:
        raise ValueError("MI needs at least two included items")
    if np.ptp(r) == 0 or np.ptp(q_star) == 0:
        return 0.0
    value = mutual_info_score(equal_mass_bins(r, bins), equal_mass_bins(q_star, bins))
    return max(0.0, float(value))


def interaction_recall(run: RecommendationRun, test: InteractionLog, k: int) -> float:
    """Share of all test interactions recovered by the top-k lists, sum C* / sum Q*_test."""
    total = test.n_interactions
    if total == 0:
        return 0.0
    return float(hit_counts(run, test, k).sum() / total)


def evaluate_run(
    run: RecommendationRun,
    test: InteractionLog,
    q_star: np.ndarray,
    gamma: float,
    k: int,
    mi_bins: int = DEFAULT_MI_BINS,
    snips_eta: Optional[float] = None,
) -> MetricsReport:
    """All accuracy and bias metrics of one run. q_star is the reference popularity (train split by default)."""
    q_star = np.asarray(q_star, dtype=np.float64)
    eta = gamma / 2.0 if snips_eta is None else snips_eta
    precision, recall, ndcg = precision_recall_ndcg(run, test, k)
    snips, snips_excluded = snips_recall_detail(run, test, snips_weights(q_star, eta), k)

    rate = interaction_rate(hit_counts(run, test, k), q_star, gamma)
    di_value = dispersion_index(rate)
    included = int(rate.included.sum())
    mi_value = mi(rate.values, q_star, mi_bins) if included >= 2 else None

    report = MetricsReport(
        k=k,
        n_users_evaluated=int((test.user_degrees() > 0).sum()),
        precision_at_k=precision,
        recall_at_k=recall,
        ndcg_at_k=ndcg,
        snips_recall=snips,
        snips_users_excluded=snips_excluded,
        mi=mi_value,
        di=di_value,
        exposure_di=exposure_di(run, q_star, gamma, k),
        interaction_recall=interaction_recall(run, test, k),
        skipped_items=int(rate.skipped_items.size),
        gamma=gamma,
        snips_eta=eta,
        mi_bins=mi_bins,
    )
    logger.info(
        f"Metrics@{k}: P={precision:.4f} R={recall:.4f} NDCG={ndcg:.4f} "
        f"SNIPS={snips:.4f} DI={di_value} MI={mi_value}"
    )
    return report


def report_row(report: MetricsReport, **labels) -> Dict[str, object]:
    """
    Flat CSV row for sweep aggregation, with 1/DI alongside: inf when DI is 0
    (every included item has the same rate), None when DI is undefined.
    """
    row: Dict[str, object] = dict(labels)
    row.update(report.model_dump())
    row["recall_snips"] = report.snips_recall
    if report.di is None:
        row["inv_di"] = None
    else:
        row["inv_di"] = math.inf if report.di == 0 else 1.0 / report.di
    return row
