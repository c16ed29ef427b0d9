import math
import os
import time
from dataclasses import replace

import mpmath
import numpy as np
import pytest

from core.dataset import FORMAT_PRESETS, parse_interactions, stratified_split
from core.theory import (
    BoundInputs,
    DegenerateFitError,
    at_risk_probability,
    bound_grid,
    condition1_bound,
    fit_pareto_beta,
    log_binomial_tail,
    membership_bound_q,
)

mpmath.mp.dps = 50


def _mp_q(c, p):
    c, p = mpmath.mpf(c), mpmath.mpf(p)
    a = 1 - c
    return mpmath.exp(-(a * mpmath.log(a / p) + c * mpmath.log(c / (1 - p))))


def _mp_tail(n, k, q):
    q = mpmath.mpf(q)
    return mpmath.fsum(mpmath.binomial(n, j) * q ** j for j in range(k + 1, n + 1))


def _mp_bound(degrees, k, q):
    # 1 - prod(1 - tail) summed in log space; a tiny bound would cancel to 0 otherwise
    logs = []
    for n in degrees:
        if n > k:
            tail = min(mpmath.mpf(1), _mp_tail(n, k, q))
            if tail >= 1:
                return mpmath.mpf(1)
            logs.append(mpmath.log1p(-tail))
    return -mpmath.expm1(mpmath.fsum(logs))


def test_pareto_closed_form():
    fit = fit_pareto_beta(np.full(50, math.e), x_min=1.0)
    assert fit.beta == pytest.approx(2.0)
    assert fit.n == 50


def test_pareto_recovers_sampled_exponent():
    rng = np.random.default_rng(0)
    degrees = 1.0 + rng.pareto(1.5, size=100_000)
    assert fit_pareto_beta(degrees, x_min=1.0).beta == pytest.approx(2.5, abs=0.02)


def test_pareto_ignores_degrees_below_x_min():
    fit = fit_pareto_beta([1, 1, 2 * math.e, 2 * math.e], x_min=2.0)
    assert fit.n == 2
    assert fit.beta == pytest.approx(2.0)


def test_pareto_degenerate():
    with pytest.raises(DegenerateFitError):
        fit_pareto_beta([3, 3], x_min=3)
    with pytest.raises(DegenerateFitError):
        fit_pareto_beta([1, 2], x_min=5)
    with pytest.raises(ValueError):
        fit_pareto_beta([1, 2], x_min=0.5)


def test_at_risk_probability():
    assert at_risk_probability(20, 2.0) == pytest.approx(0.05)


def test_membership_bound_raw_formula_matches_high_precision():
    q = membership_bound_q(0.99, 0.05, enforce_tail_regime=False)
    assert q == pytest.approx(float(_mp_q(0.99, 0.05)), rel=1e-12)
    expected = math.exp(-(0.01 * math.log(0.01 / 0.05) + 0.99 * math.log(0.99 / 0.95)))
    assert q == pytest.approx(expected, rel=1e-12)


def test_membership_bound_tail_regime():
    assert membership_bound_q(0.99, 0.05) == 1.0
    q = membership_bound_q(0.5, 0.05)
    assert q == pytest.approx(float(_mp_q(0.5, 0.05)), rel=1e-12)
    assert q < 1.0


def test_membership_bound_corner_has_no_first_term():
    # 1 - c = p zeroes the first term and leaves exp(-c ln(c / (1 - p)))
    p = 0.2
    c = 1.0 - p
    assert membership_bound_q(c, p) == pytest.approx(math.exp(-c * math.log(c / (1.0 - p))))


def test_membership_bound_outside_unit_interval():
    assert membership_bound_q(0.5, 1.0) == 1.0
    assert membership_bound_q(1.0, 0.3) == 1.0


@pytest.mark.parametrize("n,k,q", [(30, 5, 0.1), (200, 20, 1e-3), (21, 20, 0.4), (500, 20, 1e-12)])
def test_log_binomial_tail_matches_high_precision(n, k, q):
    expected = float(mpmath.log(_mp_tail(n, k, q)))
    assert log_binomial_tail(n, k, q) == pytest.approx(expected, rel=1e-10)


def test_log_binomial_tail_empty():
    assert log_binomial_tail(20, 20, 0.5) == -math.inf
    assert log_binomial_tail(30, 5, 0.0) == -math.inf


def test_bound_inputs_validation():
    with pytest.raises(ValueError):
        BoundInputs(user_degrees=np.array([3]), k=1, c=1.0, beta=2.0)
    with pytest.raises(ValueError):
        BoundInputs(user_degrees=np.array([3]), k=1, c=0.5, beta=1.0)
    with pytest.raises(ValueError):
        BoundInputs(user_degrees=np.array([3]), k=0, c=0.5, beta=2.0)


def test_bound_empty_at_risk_set():
    result = condition1_bound(BoundInputs(user_degrees=np.array([1, 5, 20]), k=20, c=0.5, beta=2.0))
    assert result.bound == 0.0
    assert result.n_users_at_risk == 0
    assert not result.vacuous


def test_bound_matches_high_precision():
    degrees = np.array([25, 25, 40, 3, 90, 120, 21])
    inputs = BoundInputs(user_degrees=degrees, k=20, c=0.9, beta=1.8)
    for q in (1e-4, 1e-2, 0.05):
        result = condition1_bound(inputs, q=q)
        expected = float(_mp_bound(degrees, 20, q))
        assert result.bound == pytest.approx(expected, rel=1e-9, abs=1e-300)
        assert result.n_users_at_risk == 6


def test_bound_decreases_with_q():
    degrees = np.array([25, 30, 60, 200])
    inputs = BoundInputs(user_degrees=degrees, k=20, c=0.9, beta=1.8)
    bounds = [condition1_bound(inputs, q=q).bound for q in (0.2, 0.1, 0.05, 0.01, 1e-3, 1e-6)]
    assert all(a >= b for a, b in zip(bounds, bounds[1:]))
    assert bounds[-1] < 1e-50


@pytest.mark.parametrize("seed", range(10))
def test_bound_grows_with_user_degree(seed):
    rng = np.random.default_rng(seed)
    degrees = rng.integers(1, 80, size=6)
    inputs = BoundInputs(user_degrees=degrees, k=20, c=0.9, beta=1.8)
    before = condition1_bound(inputs, q=0.05).bound
    grown = degrees.copy()
    grown[int(rng.integers(degrees.size))] += int(rng.integers(1, 40))
    after = condition1_bound(replace(inputs, user_degrees=grown), q=0.05).bound
    assert after >= before


def test_bound_saturates_to_vacuous():
    inputs = BoundInputs(user_degrees=np.array([500]), k=1, c=0.9, beta=1.8)
    result = condition1_bound(inputs, q=0.9)
    assert result.vacuous
    assert result.bound == 1.0


def test_bound_vacuous_membership():
    inputs = BoundInputs(user_degrees=np.array([50]), k=20, c=0.99, beta=2.0)
    assert condition1_bound(inputs).vacuous
    assert condition1_bound(inputs, enforce_tail_regime=False).q < 1.0


def test_bound_ordering_follows_membership_bound():
    rng = np.random.default_rng(1)
    degrees = np.floor(20.0 * (1.0 + rng.pareto(1.2, size=2000))).astype(int)
    beta = fit_pareto_beta(degrees).beta
    loose = condition1_bound(BoundInputs(degrees, k=20, c=0.5, beta=beta), enforce_tail_regime=False)
    tight = condition1_bound(BoundInputs(degrees, k=20, c=0.99, beta=beta), enforce_tail_regime=False)
    assert (loose.bound >= tight.bound) == (loose.q >= tight.q)
    assert 0.0 <= loose.bound <= 1.0 and 0.0 <= tight.bound <= 1.0


def test_bound_grid_rows():
    grid = bound_grid([5, 30, 80], beta=1.6, cs=[0.5, 0.9], ks=[10, 20, 100])
    assert list(grid.columns) == ["c", "k", "beta", "p", "q", "bound", "vacuous"]
    assert len(grid) == 6
    assert grid.loc[grid["k"] == 100, "bound"].eq(0.0).all()


@pytest.mark.slow
@pytest.mark.skipif(not os.getenv("IPL_ML1M_RATINGS"), reason="IPL_ML1M_RATINGS not set")
def test_movielens_1m_bound():
    fmt = replace(FORMAT_PRESETS["movielens-1m"], rating_threshold=4)
    start = time.monotonic()
    log = parse_interactions(os.environ["IPL_ML1M_RATINGS"], fmt)
    degrees = stratified_split(log, seed=0).train.user_degrees()
    beta = fit_pareto_beta(degrees).beta
    result = condition1_bound(BoundInputs(degrees, k=20, c=0.99, beta=beta))
    assert 0.0 <= result.bound <= 1.0
    assert result.n_users_at_risk > 0
    assert time.monotonic() - start < 120.0
