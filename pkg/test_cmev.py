#!/usr/bin/env python3
"""
Tests for conditional multivariate extremes: fitting, diagnostics and prediction
"""
import json
import os
import sys
sys.path.append(os.path.dirname(__file__))

import numpy as np
import pandas as pd
import pytest
from scipy.stats import laplace

from cmev_service import BOUNDARY_A, classify_dependence, cmev_service, laplace_threshold
from exceptions import DataValidationError
from models import HtFit, HtTargetFit, ReturnPanel
from simulation_service import SimRandom, simulation_service


def _laplace_panel(columns, market_ids):
    returns = np.column_stack(columns)
    dates = pd.bdate_range("2010-01-05", periods=len(returns)).to_numpy().astype('datetime64[D]')
    return ReturnPanel(market_ids=market_ids, dates=dates, returns=returns, scale="laplace")


def _direct_fit(a, b, residuals, dep_quantile=0.7):
    residuals = np.asarray(residuals, dtype=float)
    u = laplace_threshold(dep_quantile)
    x = u + np.linspace(0.01, 3.0, len(residuals))
    return HtFit(
        conditioning_index="A", dep_quantile=dep_quantile, threshold=u, targets=["B"],
        params={"B": HtTargetFit(target="B", a=a, b=b, mu=0.0, sigma=1.0, loglik=0.0)},
        conditioning_values=x, target_values=a * x + x ** b * residuals, residuals=residuals,
    )


@pytest.fixture(scope="module")
def model_panel():
    # Y = 0.5 X + X^0.3 Z above zero, the generating model of the fit
    rng = SimRandom(77)
    x = laplace.ppf(rng.uniform(20_000))
    z = rng.normal(20_000)
    y = np.where(x > 0, 0.5 * x + np.abs(x) ** 0.3 * z, laplace.ppf(rng.uniform(20_000)))
    return _laplace_panel([x, y], ["A", "B"])


def test_duplicate_column_hits_boundary():
    x = laplace.ppf(SimRandom(3).uniform(3000))
    fit = cmev_service.fit_ht(_laplace_panel([x, x], ["A", "B"]), "A", 0.7)
    params = fit.params["B"]
    assert params.a >= 1 - 1e-6
    assert BOUNDARY_A in params.flags
    assert np.var(fit.residual_column("B")) < 1e-10


def test_independent_columns_give_small_slope():
    panel = simulation_service.sim_gauss_copula_panel(np.eye(2), 20_000, seed=5, scale="laplace",
                                                      market_ids=["A", "B"])
    fit = cmev_service.fit_ht(panel, "A", 0.7)
    assert abs(fit.params["B"].a) < 0.1


@pytest.mark.slow
def test_gaussian_copula_parameters():
    corr = np.array([[1.0, 0.5], [0.5, 1.0]])
    panel = simulation_service.sim_gauss_copula_panel(corr, 50_000, seed=6, scale="laplace", market_ids=["A", "B"])
    params = cmev_service.fit_ht(panel, "A", 0.7).params["B"]
    assert params.a == pytest.approx(0.25, abs=0.07)
    assert params.b == pytest.approx(0.5, abs=0.15)


def test_residuals_are_stored_jointly(model_panel):
    fit = cmev_service.fit_ht(model_panel, "A", 0.7)
    assert fit.residuals.shape == (fit.n_cond_exceed, 1)
    assert fit.n_cond_exceed == int(np.sum(model_panel.column("A") > laplace.ppf(0.7)))
    x, y = fit.conditioning_values, fit.target_values[:, 0]
    p = fit.params["B"]
    assert np.allclose(fit.residual_column("B"), (y - p.a * x) / x ** p.b)


def test_residual_trends_are_flat_at_the_true_model(model_panel):
    fit = cmev_service.fit_ht(model_panel, "A", 0.7)
    assert fit.params["B"].a == pytest.approx(0.5, abs=0.1)
    slopes = cmev_service.diagnostic_slopes(fit)["B"]
    assert abs(slopes["residuals"]) < 0.05
    assert abs(slopes["spread"]) < 0.05


def test_diagnostic_layers(model_panel):
    fit = cmev_service.fit_ht(model_panel, "A", 0.7)
    layers = cmev_service.ht_diagnostics(fit)["B"]
    assert set(layers) == {'residuals', 'spread', 'scatter', 'quantile_curves'}
    assert np.all(np.diff(layers['residuals']['x']) >= 0)
    curves = layers['quantile_curves']
    assert list(curves.columns) == ['x', 'q05', 'q50', 'q95']
    p = fit.params["B"]
    expected = p.a * fit.threshold + fit.threshold ** p.b * np.median(fit.residual_column("B"))
    assert curves['x'].iloc[0] == pytest.approx(fit.threshold)
    assert curves['q50'].iloc[0] == pytest.approx(expected, rel=1e-12)
    assert np.all(curves['q05'] <= curves['q95'])


def test_smoother_needs_ten_points():
    smooth = cmev_service._smooth(np.linspace(0.7, 1.0, 9), np.ones(9))
    assert np.all(np.isnan(smooth))


def test_fit_requires_laplace_scale():
    panel = simulation_service.sim_gauss_copula_panel(np.eye(2), 500, seed=1, scale="gaussian")
    with pytest.raises(DataValidationError):
        cmev_service.fit_ht(panel, "M1", 0.7)


def test_too_few_exceedances():
    x = laplace.ppf(SimRandom(2).uniform(100))
    with pytest.raises(DataValidationError, match="too few exceedances"):
        cmev_service.fit_ht(_laplace_panel([x, -x], ["A", "B"]), "A", 0.7)


def test_perfect_dependence_prediction():
    fit = _direct_fit(1.0, 0.0, np.zeros(200))
    result = cmev_service.predict_exceedance_prob(fit, pred_quantile=0.9, n_importance=10_000, seed=1)
    assert result.probabilities["B"] == 1.0


def test_independence_prediction():
    residuals = laplace.ppf(np.arange(1, 1001) / 1001)
    fit = _direct_fit(0.0, 0.0, residuals)
    result = cmev_service.predict_exceedance_prob(fit, pred_quantile=0.9, n_importance=100_000, seed=2)
    assert result.probabilities["B"] == pytest.approx(0.3, abs=0.01)
    assert set(result.conditional_quantiles["B"]) == {"0.05", "0.5", "0.95"}


def test_prediction_is_deterministic():
    fit = _direct_fit(0.4, 0.2, SimRandom(9).normal(300))
    first = cmev_service.predict_exceedance_prob(fit, n_importance=5000, seed=11)
    second = cmev_service.predict_exceedance_prob(fit, n_importance=5000, seed=11)
    assert first.probabilities == second.probabilities
    other = cmev_service.predict_exceedance_prob(fit, n_importance=5000, seed=12)
    assert other.probabilities != first.probabilities


def test_prediction_below_dependence_quantile():
    fit = _direct_fit(0.4, 0.2, SimRandom(9).normal(300))
    with pytest.raises(DataValidationError):
        cmev_service.predict_exceedance_prob(fit, pred_quantile=0.6)


def test_prediction_search_skips_low_levels():
    fit = _direct_fit(0.4, 0.2, SimRandom(9).normal(300))
    table = cmev_service.prediction_quantile_search(fit, [0.6, 0.8, 0.95], n_importance=2000, seed=1)
    assert sorted(table['pred_quantile'].unique()) == [0.8, 0.95]


def test_importance_sample_columns():
    fit = _direct_fit(0.4, 0.2, SimRandom(9).normal(300))
    frame = cmev_service.importance_sample(fit, 0.9, n_importance=1000, seed=3)
    assert list(frame.columns) == ["A", "B"]
    assert np.all(frame["A"] > laplace_threshold(0.9))


@pytest.mark.parametrize("a,label", [
    (0.3888, "fairly strong positive"),
    (-0.0408, "very weak negative"),
    (0.0, "independence"),
    (0.75, "strong positive"),
    (-0.2, "weak negative"),
])
def test_classify_dependence(a, label):
    assert classify_dependence(a) == label


def test_classify_rejects_out_of_range():
    with pytest.raises(DataValidationError):
        classify_dependence(1.2)


def test_fits_survive_json(model_panel):
    fits = {"A": cmev_service.fit_ht(model_panel, "A", 0.7)}
    restored = cmev_service.ht_fits_from_dict(json.loads(json.dumps(cmev_service.ht_fits_to_dict(fits))))
    assert restored["A"].params == fits["A"].params
    np.testing.assert_array_equal(restored["A"].residuals, fits["A"].residuals)


def test_malformed_record():
    with pytest.raises(DataValidationError):
        cmev_service.ht_fits_from_dict({"A": {"dep_quantile": 0.7}})
