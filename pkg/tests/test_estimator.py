import numpy as np
import pytest
import torch

from core.estimator import (
    DATASET_GAMMA,
    GammaMethod,
    dataset_gamma,
    estimate_gamma,
    exposure_proxy,
    interaction_rate,
    snips_weights,
    unobserved_items,
)
from core.evaluation import dispersion_index
from core.ml_models import init_model
from tests.conftest import make_log


def test_rate_gamma_two_is_raw_count():
    rate = interaction_rate([3, 0, 7], [5, 2, 9], gamma=2.0)
    np.testing.assert_array_equal(rate.values, [3.0, 0.0, 7.0])


def test_rate_plain_ratio():
    assert interaction_rate([5], [10], gamma=1.0).values[0] == pytest.approx(0.5)


def test_rate_square_root():
    assert interaction_rate([10], [100], gamma=1.5).values[0] == pytest.approx(1.0)


def test_rate_skips_unobserved_items():
    rate = interaction_rate([1, 0], [4, 0], gamma=1.5)
    assert np.isnan(rate.values[1])
    np.testing.assert_array_equal(rate.skipped_items, [1])
    assert rate.included_values.size == 1


def test_rate_rejects_bad_counts():
    with pytest.raises(ValueError):
        interaction_rate([-1], [2], gamma=1.5)
    with pytest.raises(ValueError):
        interaction_rate([5], [2], gamma=1.5, n_users=3)
    with pytest.raises(ValueError):
        interaction_rate([1, 2], [2], gamma=1.5)


def test_rate_constant_when_counts_follow_the_criterion():
    q_star = np.array([1, 2, 5, 13, 40, 120], dtype=float)
    gamma, kappa = 1.446, 0.37
    rate = interaction_rate(kappa * q_star ** (2.0 - gamma), q_star, gamma)
    np.testing.assert_allclose(rate.values, kappa)
    assert dispersion_index(rate) == pytest.approx(0.0, abs=1e-12)


def test_rate_frame(tmp_path):
    rate = interaction_rate([1, 2], [2, 4], gamma=1.0)
    rate.write_csv(tmp_path / "rate.csv")
    assert (tmp_path / "rate.csv").read_text().splitlines()[0] == "item,C*,Q*,r"


def test_snips_weights_eta_zero():
    np.testing.assert_array_equal(snips_weights([0, 3, 10], 0.0), [1.0, 1.0, 1.0])


def test_snips_weights_reciprocal():
    np.testing.assert_allclose(snips_weights([1, 4], 1.0), [1.0, 0.25])
    np.testing.assert_allclose(snips_weights([9], 0.5), [1.0 / 3.0])


def test_snips_weights_unobserved_item_is_zero():
    assert snips_weights([0, 2], 1.0)[0] == 0.0
    np.testing.assert_array_equal(unobserved_items([0, 2, 0]), [0, 2])


def test_snips_weights_report_unobserved_items(caplog):
    with caplog.at_level("WARNING", logger="core.estimator"):
        weights = snips_weights([0, 4, 0, 1], 0.5)
    np.testing.assert_allclose(weights, [0.0, 0.5, 0.0, 1.0])
    assert "2 items have Q* = 0" in caplog.text


@pytest.mark.parametrize("name,value", sorted(DATASET_GAMMA.items()))
def test_dataset_constants(name, value):
    assert dataset_gamma(name) == value


def test_dataset_aliases():
    assert dataset_gamma("ML-1M") == 1.826
    assert dataset_gamma("Amazon_Book") == 1.446
    with pytest.raises(ValueError):
        dataset_gamma("netflix")


def test_config_supplied_gamma():
    estimate = estimate_gamma(np.array([1, 2]), GammaMethod.CONFIG_SUPPLIED, dataset_name="movielens-1m")
    assert estimate.value == 1.826
    assert estimate.diagnostics is None
    assert estimate_gamma(np.array([1]), gamma=1.3).value == 1.3
    with pytest.raises(ValueError):
        estimate_gamma(np.array([1]))


def test_powerlaw_fit_recovers_exponent():
    rng = np.random.default_rng(0)
    q_star = rng.integers(1, 500, size=400).astype(float)
    exposure = 0.02 * q_star ** 1.5 * rng.lognormal(0.0, 0.1, size=q_star.size)
    estimate = estimate_gamma(q_star, "powerlaw-fit", exposure=exposure)
    assert estimate.method is GammaMethod.POWERLAW_FIT
    assert estimate.value == pytest.approx(1.5, abs=0.1)
    assert not estimate.diagnostics["degenerate"]


def test_powerlaw_fit_degenerate_falls_back():
    q_star = np.full(6, 4.0)
    estimate = estimate_gamma(q_star, "powerlaw-fit", gamma=1.7, exposure=np.arange(1.0, 7.0))
    assert estimate.value == 1.7
    assert estimate.diagnostics["degenerate"]


def test_powerlaw_fit_needs_exposure():
    with pytest.raises(ValueError):
        estimate_gamma(np.array([1.0, 2.0]), "powerlaw-fit", gamma=1.5)


def test_exposure_proxy_sums_sigmoids():
    model = init_model("mf", 3, 2, 1, dtype=torch.float64)
    with torch.no_grad():
        model.user_emb.weight.copy_(torch.tensor([[1.0], [0.0], [-2.0]], dtype=torch.float64))
        model.item_emb.weight.copy_(torch.tensor([[0.0], [1.0]], dtype=torch.float64))
    expected_1 = sum(1.0 / (1.0 + np.exp(-s)) for s in (1.0, 0.0, -2.0))
    np.testing.assert_allclose(exposure_proxy(model), [1.5, expected_1])


def test_estimate_gamma_accepts_log():
    log = make_log(2, 2, [(0, 0), (1, 0), (0, 1)])
    assert estimate_gamma(log, gamma=1.2).value == 1.2
