import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.special import gammaln, logsumexp

logger = logging.getLogger(__name__)


class DegenerateFitError(ValueError):
    """Raised when a Pareto exponent cannot be estimated from the degrees."""


@dataclass(frozen=True)
class BoundInputs:
    user_degrees: np.ndarray
    k: int
    c: float
    beta: float

    def __post_init__(self):
        if not 0 < self.c < 1:
            raise ValueError(f"c must lie in (0, 1), got {self.c}")
        if not self.beta > 1 or not math.isfinite(self.beta):
            raise ValueError(f"beta must be a finite value above 1, got {self.beta}")
        if self.k < 1:
            raise ValueError(f"k must be at least 1, got {self.k}")


@dataclass(frozen=True)
class ParetoFit:
    beta: float
    n: int
    x_min: float


@dataclass(frozen=True)
class BoundResult:
    bound: float
    q: float
    p: float
    beta: float
    c: float
    k: int
    n_users_at_risk: int
    vacuous: bool
    diagnostic: Optional[str] = None

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


def fit_pareto_beta(user_degrees: Sequence[float], x_min: float = 1.0) -> ParetoFit:
    """Continuous Pareto MLE beta = 1 + n / sum(ln(x / x_min)) over degrees >= x_min."""
    if x_min < 1:
        raise ValueError(f"x_min must be at least 1, got {x_min}")
    degrees = np.asarray(user_degrees, dtype=np.float64)
    tail = degrees[degrees >= x_min]
    if tail.size == 0:
        raise DegenerateFitError(f"No degrees at or above x_min={x_min}")
    log_sum = float(np.log(tail / x_min).sum())
    if log_sum <= 0:
        raise DegenerateFitError(f"All {tail.size} degrees equal x_min={x_min}; beta is infinite")
    beta = 1.0 + tail.size / log_sum
    logger.info(f"Pareto fit beta={beta:.4f} (n={tail.size}, x_min={x_min})")
    return ParetoFit(beta=beta, n=int(tail.size), x_min=float(x_min))


def at_risk_probability(k: int, beta: float) -> float:
    """p = Pr(|I_u| > k) = k^(1 - beta)."""
    return float(k ** (1.0 - beta))


def membership_bound_q(c: float, p: float, enforce_tail_regime: bool = True) -> float:
    """
    Chernoff bound exp(-D(1-c || p)) on an item being at risk, evaluated in log space.
    Returns the vacuous 1.0 outside 0 < c, p < 1, and when 1 - c < p unless
    `enforce_tail_regime` is off.
    """
    if not (0 < c < 1 and 0 < p < 1):
        logger.warning(f"membership bound vacuous: c={c}, p={p} outside (0, 1)")
        return 1.0
    a = 1.0 - c
    if enforce_tail_regime and a < p:
        logger.warning(f"membership bound vacuous: 1-c={a:.6g} is below p={p:.6g}")
        return 1.0
    log_q = -(a * math.log(a / p) + c * math.log(c / (1.0 - p)))
    return min(1.0, math.exp(log_q))


def log_binomial_tail(n: int, k: int, q: float) -> float:
    """log of sum_{j=k+1}^{n} C(n, j) q^j; -inf when the sum is empty or q = 0."""
    if n <= k or q <= 0:
        return -math.inf
    j = np.arange(k + 1, n + 1, dtype=np.float64)
    terms = gammaln(n + 1.0) - gammaln(j + 1.0) - gammaln(n - j + 1.0) + j * math.log(q)
    return float(logsumexp(terms))


def condition1_bound(inputs: BoundInputs, q: Optional[float] = None, enforce_tail_regime: bool = True) -> BoundResult:
    """
    Upper bound 1 - prod_{u: |I_u| > k} (1 - min(1, sum_{j>k} C(|I_u|, j) q^j)),
    accumulated as a sum of log1p terms over distinct degrees.
    """
    p = at_risk_probability(inputs.k, inputs.beta)
    if q is None:
        q = membership_bound_q(inputs.c, p, enforce_tail_regime=enforce_tail_regime)
    degrees = np.asarray(inputs.user_degrees, dtype=np.int64)
    at_risk = degrees[degrees > inputs.k]

    def _result(bound: float, vacuous: bool, diagnostic: Optional[str] = None) -> BoundResult:
        return BoundResult(
            bound=bound, q=q, p=p, beta=inputs.beta, c=inputs.c, k=inputs.k,
            n_users_at_risk=int(at_risk.size), vacuous=vacuous, diagnostic=diagnostic,
        )

    if at_risk.size == 0:
        return _result(0.0, False, "no user has more than k interactions")
    if q >= 1.0:
        return _result(1.0, True, "membership bound q is vacuous")
    if q <= 0.0:
        return _result(0.0, False)

    log_product = 0.0
    saturated = 0
    unique, counts = np.unique(at_risk, return_counts=True)
    for n, count in zip(unique, counts):
        tail = math.exp(min(0.0, log_binomial_tail(int(n), inputs.k, q)))
        if tail >= 1.0:
            saturated += int(count)
            log_product = -math.inf
            continue
        log_product += int(count) * math.log1p(-tail)

    bound = min(1.0, max(0.0, -math.expm1(log_product)))
    if saturated:
        logger.warning(f"{saturated} users have a binomial tail of 1; the bound is vacuous")
        return _result(bound, True, f"{saturated} users with a saturated inner sum")
    return _result(bound, False)


def bound_grid(
    user_degrees: Sequence[int],
    beta: float,
    cs: Sequence[float],
    ks: Sequence[int],
    enforce_tail_regime: bool = True,
) -> pd.DataFrame:
    """One row (c, k, beta, p, q, bound) per grid point."""
    rows = []
    degrees = np.asarray(user_degrees, dtype=np.int64)
    for k in ks:
        for c in cs:
            result = condition1_bound(
                BoundInputs(user_degrees=degrees, k=int(k), c=float(c), beta=beta),
                enforce_tail_regime=enforce_tail_regime,
            )
            rows.append({
                "c": result.c, "k": result.k, "beta": result.beta,
                "p": result.p, "q": result.q, "bound": result.bound, "vacuous": result.vacuous,
            })
    return pd.DataFrame(rows, columns=["c", "k", "beta", "p", "q", "bound", "vacuous"])
