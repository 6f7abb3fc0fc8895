#!/usr/bin/env python3
"""
Tests for the semiparametric marginal CDF and the Laplace / Fréchet transforms
"""
import os
import sys
sys.path.append(os.path.dirname(__file__))

import numpy as np
import pytest
from scipy.stats import laplace

from exceptions import DataValidationError
from gpd_service import gpd_service
from margin_service import margin_service
from models import MarginScale
from simulation_service import SimRandom, simulation_service


@pytest.fixture(scope="module")
def sample():
    return SimRandom(31).normal(1000) * 0.01


@pytest.fixture(scope="module")
def margin(sample):
    return margin_service.build_margin(sample, 0.7)


def test_cdf_at_threshold_is_quantile_level(margin):
    assert margin_service.semiparametric_cdf(margin, margin.gpd.threshold) == pytest.approx(0.7, abs=1e-12)


def test_cdf_at_minimum(sample, margin):
    assert margin_service.semiparametric_cdf(margin, sample.min()) == pytest.approx(1 / 1001, rel=1e-9)


def test_cdf_of_tail_median(margin):
    x = gpd_service.gpd_quantile(margin.gpd, 0.5)
    assert margin_service.semiparametric_cdf(margin, x) == pytest.approx(0.85, abs=1e-12)


def test_cdf_below_minimum_stays_positive(sample, margin):
    p = margin_service.semiparametric_cdf(margin, sample.min() - np.array([0.001, 0.01, 1.0]))
    assert np.all(p > 0)
    assert np.all(np.diff(p) < 0)


def test_transforms_stay_finite_far_below_minimum(sample, margin):
    x = sample.min() - np.array([0.001, 1.0, 100.0])
    y = margin_service.to_laplace(margin, x)
    assert np.all(np.isfinite(y))
    assert np.all(np.diff(y) < 0)
    z = margin_service.to_frechet(margin, x)
    assert np.all(np.isfinite(z) & (z > 0))
    assert np.allclose(margin_service.from_laplace(margin, y), x, rtol=1e-9)


def test_laplace_closed_forms(margin):

    x90 = gpd_service.gpd_quantile(margin.gpd, (0.9 - 0.7) / 0.3)
    assert margin_service.to_laplace(margin, x90) == pytest.approx(np.log(5), abs=1e-9)
    median = margin_service.semiparametric_quantile(margin, 0.5)
    assert margin_service.to_laplace(margin, median) == pytest.approx(0.0, abs=1e-9)
    x10 = margin_service.semiparametric_quantile(margin, 0.1)
    assert margin_service.to_laplace(margin, x10) == pytest.approx(-np.log(5), abs=1e-9)


def test_frechet_closed_forms(margin):
    assert margin_service.to_frechet(margin, margin.gpd.threshold) == pytest.approx(-1 / np.log(0.7), abs=1e-6)
    assert margin_service.to_frechet(margin, margin.gpd.threshold) == pytest.approx(2.803673, abs=1e-6)
    x = margin_service.semiparametric_quantile(margin, np.exp(-1))
    assert margin_service.to_frechet(margin, x) == pytest.approx(1.0, abs=1e-9)
    x = margin_service.semiparametric_quantile(margin, 0.5)
    assert margin_service.to_frechet(margin, x) == pytest.approx(1 / np.log(2), abs=1e-9)


def test_back_transforms_invert(sample, margin):
    x = np.concatenate([sample[:50], [margin.gpd.threshold + 0.5 * margin.gpd.sigma]])
    assert np.allclose(margin_service.from_laplace(margin, margin_service.to_laplace(margin, x)), x, atol=1e-10)
    assert np.allclose(margin_service.from_frechet(margin, margin_service.to_frechet(margin, x)), x, atol=1e-10)


def test_transformed_sample_is_laplace():
    sample = simulation_service.sim_spliced(10_000, seed=4)
    t = margin_service.build_margin(sample, 0.7)
    y = np.sort(margin_service.to_laplace(t, sample))
    n = len(y)
    upper = np.abs(np.arange(1, n + 1) / n - laplace.cdf(y))
    lower = np.abs(np.arange(0, n) / n - laplace.cdf(y))
    assert max(upper.max(), lower.max()) < 0.02


def test_affine_map_leaves_laplace_values_unchanged(sample):
    base = margin_service.build_margin(sample, 0.7)
    moved = margin_service.build_margin(3.0 * sample + 0.5, 0.7)
    assert np.allclose(margin_service.to_laplace(moved, 3.0 * sample + 0.5),
                       margin_service.to_laplace(base, sample), atol=1e-6)


def test_quantile_outside_unit_interval(margin):
    with pytest.raises(DataValidationError):
        margin_service.semiparametric_quantile(margin, 1.0)


def test_fit_at_other_level_rejected(sample):
    fit = gpd_service.fit_gpd(sample, 0.8)
    with pytest.raises(DataValidationError):
        margin_service.build_margin(sample, 0.7, gpd=fit)


def test_panel_transform_and_persistence():
    panel = simulation_service.sim_gauss_copula_panel(np.array([[1.0, 0.4], [0.4, 1.0]]), 600, seed=9,
                                                       scale="gaussian", market_ids=["A", "B"])
    margins = margin_service.fit_panel_margins(panel, {"A": 0.7, "B": 0.8})
    frechet = margin_service.transform_panel(panel, margins, MarginScale.FRECHET)
    assert frechet.scale == "frechet"
    assert np.all(frechet.returns > 0)
    back = margin_service.back_transform_panel(frechet, margins)
    assert np.allclose(back.returns, panel.returns, atol=1e-9)

    restored = margin_service.margins_from_dict(margin_service.margins_to_dict(margins))
    assert restored["B"].gpd.quantile_level == 0.8
    np.testing.assert_array_equal(restored["A"].sample, margins["A"].sample)
