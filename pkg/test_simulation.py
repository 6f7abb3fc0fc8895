#!/usr/bin/env python3
"""
Tests for the seeded generators used as oracles and for the bundled demo panel
"""
import os
import sys
sys.path.append(os.path.dirname(__file__))

import numpy as np
import pytest

from dependence_families import extremal_coefficient
from exceptions import DataIOError, DataValidationError
from models import DependenceFamily, FamilyTag, SimConfig, SimGenerator
from simulation_service import SimRandom, simulation_service


def test_random_streams_are_reproducible():
    a = SimRandom(123, 4).uniform(1000)
    b = SimRandom(123, 4).uniform(1000)
    np.testing.assert_array_equal(a, b)
    assert np.all((a > 0) & (a < 1))
    assert not np.array_equal(a, SimRandom(123, 5).uniform(1000))


def test_integers_stay_in_range():
    idx = SimRandom(7).integers(13, 5000)
    assert idx.min() == 0
    assert idx.max() == 12


def test_exponential_gpd_mean():
    sample = simulation_service.sim_gpd(1.0, 0.0, 10_000, seed=1)
    assert sample.mean() == pytest.approx(1.0, abs=0.05)


def test_gpd_quantile():
    # sigma ((1 - p)^-xi - 1) / xi = (0.25^-0.5 - 1) / 0.5 = 2 at p = 0.75 with sigma = 1, xi = 0.5
    sample = simulation_service.sim_gpd(1.0, 0.5, 10_000, seed=2)
    assert np.quantile(sample, 0.75) == pytest.approx(2.0, abs=0.05)


def test_gpd_is_deterministic():
    np.testing.assert_array_equal(simulation_service.sim_gpd(2.0, 0.1, 500, seed=3),
                                  simulation_service.sim_gpd(2.0, 0.1, 500, seed=3))


def test_gpd_rejects_bad_scale():
    with pytest.raises(DataValidationError):
        simulation_service.sim_gpd(0.0, 0.1, 10, seed=1)


def test_logistic_independence():
    pairs = simulation_service.sim_bvevd(DependenceFamily(tag=FamilyTag.LOGISTIC, params=(1.0,)), 10_000, seed=4)
    corr = np.corrcoef(np.log(pairs[:, 0]), np.log(pairs[:, 1]))[0, 1]
    assert abs(corr) < 0.03


def test_logistic_near_complete_dependence():
    pairs = simulation_service.sim_bvevd(DependenceFamily(tag=FamilyTag.LOGISTIC, params=(0.01,)), 10_000, seed=5)
    w = pairs[:, 0] / pairs.sum(axis=1)
    assert np.mean(np.abs(w - 0.5) <= 0.05) >= 0.95


@pytest.mark.parametrize("tag,params", [
    (FamilyTag.LOGISTIC, (0.5,)),
    (FamilyTag.HUSLER_REISS, (1.5,)),
    (FamilyTag.COLES_TAWN, (1.0, 2.0)),
])
def test_margins_are_unit_frechet(tag, params):
    pairs = simulation_service.sim_bvevd(DependenceFamily(tag=tag, params=params), 10_000, seed=6)
    for column in pairs.T:
        z = np.sort(column)
        n = len(z)
        model = np.exp(-1 / z)
        sup = max(np.max(np.abs(np.arange(1, n + 1) / n - model)), np.max(np.abs(np.arange(n) / n - model)))
        assert sup < 0.02


def test_block_maxima_match_logistic_extremal_coefficient():
    family = DependenceFamily(tag=FamilyTag.LOGISTIC, params=(0.5,))
    pairs = simulation_service.sim_bvevd(family, 500_000, seed=7)
    estimate = simulation_service.block_maxima_extremal_coefficient(pairs, block=100)
    assert 2 - estimate == pytest.approx(2 - extremal_coefficient(family), abs=0.05)


@pytest.mark.slow
def test_block_maxima_match_husler_reiss_extremal_coefficient():
    family = DependenceFamily(tag=FamilyTag.HUSLER_REISS, params=(1.5,))
    pairs = simulation_service.sim_bvevd(family, 500_000, seed=8)
    estimate = simulation_service.block_maxima_extremal_coefficient(pairs, block=100)
    assert 2 - estimate == pytest.approx(2 - extremal_coefficient(family), abs=0.05)


def test_block_maxima_needs_a_full_block():
    with pytest.raises(DataValidationError):
        simulation_service.block_maxima_extremal_coefficient(np.ones((50, 2)), block=100)


def test_gauss_copula_correlations():
    panel = simulation_service.sim_gauss_copula_panel(np.eye(3), 10_000, seed=9, scale="gaussian")
    corr = np.corrcoef(panel.returns.T)
    assert np.all(np.abs(corr[np.triu_indices(3, 1)]) < 0.03)

    pair = simulation_service.sim_gauss_copula_panel(np.array([[1.0, 0.5], [0.5, 1.0]]), 10_000, seed=10,
                                                     scale="gaussian")
    assert np.corrcoef(pair.returns.T)[0, 1] == pytest.approx(0.5, abs=0.03)


def test_gauss_copula_scales():
    corr = np.array([[1.0, 0.3], [0.3, 1.0]])
    uniform = simulation_service.sim_gauss_copula_panel(corr, 1000, seed=11, scale="uniform")
    frechet = simulation_service.sim_gauss_copula_panel(corr, 1000, seed=11, scale="frechet")
    assert np.allclose(frechet.returns, -1 / np.log(uniform.returns), rtol=1e-8)
    assert frechet.scale == "frechet"


def test_gauss_copula_rejects_bad_matrix():
    with pytest.raises(DataValidationError):
        simulation_service.sim_gauss_copula_panel(np.array([[1.0, 1.5], [1.5, 1.0]]), 10, seed=1)
    with pytest.raises(DataValidationError):
        simulation_service.sim_gauss_copula_panel(np.array([[1.0, 0.2], [0.1, 1.0]]), 10, seed=1)


def test_demo_panel_is_reproducible():
    first = simulation_service.demo_panel(20100105)
    second = simulation_service.demo_panel(20100105)
    assert first.returns.shape == (2126, 5)
    assert first.market_ids == ["IBOV", "IMOEX", "NIFTY", "SHCOMP", "JALSH"]
    np.testing.assert_array_equal(first.returns, second.returns)


def test_sim_config_round_trip(tmp_path):
    config = SimConfig(seed=5, n=200, generator=SimGenerator.BVEVD, params={"family": "husler_reiss", "params": "1.2"})
    path = str(tmp_path / "simulation.ini")
    simulation_service.write_sim_config(config, path)
    restored = simulation_service.read_sim_config(path)
    assert restored == config
    pairs = simulation_service.simulate(restored)
    assert pairs.shape == (200, 2)


def test_sim_config_missing_file(tmp_path):
    with pytest.raises(DataIOError):
        simulation_service.read_sim_config(str(tmp_path / "absent.ini"))


def test_simulate_rejects_bad_parameters():
    config = SimConfig(seed=1, n=10, generator=SimGenerator.GPD, params={"sigma": "wide"})
    with pytest.raises(DataValidationError):
        simulation_service.simulate(config)
