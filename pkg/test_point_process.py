#!/usr/bin/env python3
"""
Tests for the bivariate point-process fits, AIC ranking, strength labels and the model comparison
"""
import json
import os
import sys
sys.path.append(os.path.dirname(__file__))

import numpy as np
import pytest

from dependence_families import FAMILY_MODELS
from exceptions import DataValidationError
from models import FAMILY_PARAM_COUNT, DependenceFamily, FamilySelection, FamilyTag, PpFit
from optimization import numerical_gradient
from point_process_service import angular_grid, format_estimate, point_process_service, pp_loglik, radial_threshold
from simulation_service import simulation_service


def _pp_fit(tag, params, aic=None):
    k = FAMILY_PARAM_COUNT[tag]
    loglik = 0.0 if aic is None else (2 * k - aic) / 2
    return PpFit(family=DependenceFamily(tag=tag, params=params), loglik=loglik, loglik_theta=loglik,
                 aic=2 * k - 2 * loglik, se=(0.01,) * k, n_points=2, n_total=100, r0=0.01, quantile_level=0.7,
                 points_r=[0.02, 0.05], points_w=[0.3, 0.6])


@pytest.fixture(scope="module")
def logistic_pairs():
    return simulation_service.sim_bvevd(DependenceFamily(tag=FamilyTag.LOGISTIC, params=(0.5,)), 10_000, seed=41)


@pytest.fixture(scope="module")
def logistic_fit(logistic_pairs):
    return point_process_service.fit_pp(logistic_pairs[:, 0], logistic_pairs[:, 1], FamilyTag.LOGISTIC, 0.7)


def test_radial_threshold_passes_through_joint_marginal_quantile():
    # v/n is the quantile_level quantile of a unit-Fréchet margin scaled by 1/n; the line x + y = r0 meets (v/n, v/n)
    n = 1000
    assert radial_threshold(0.7, n) * n == pytest.approx(-2 / np.log(0.7))
    assert radial_threshold(0.7, n) * n == pytest.approx(5.607346, abs=1e-6)


def test_recovers_logistic_parameter(logistic_fit):
    assert logistic_fit.family.alpha == pytest.approx(0.5, abs=0.05)
    assert logistic_fit.se[0] > 0
    assert np.all(logistic_fit.points_r > logistic_fit.r0)
    assert logistic_fit.n_points == len(logistic_fit.points_w)


def test_stored_loglik_matches_point_set(logistic_fit):
    fit = logistic_fit
    assert pp_loglik(fit.family, fit.points_r, fit.points_w, fit.r0) == pytest.approx(fit.loglik, rel=1e-12)
    theta_part = pp_loglik(fit.family, fit.points_r, fit.points_w, fit.r0, include_constant=False)
    assert theta_part == pytest.approx(fit.loglik_theta, rel=1e-12)
    assert fit.aic == pytest.approx(2 - 2 * fit.loglik)


def test_gradient_vanishes_at_optimum(logistic_fit):
    fit = logistic_fit
    model = FAMILY_MODELS[FamilyTag.LOGISTIC]

    def mean_loglik(p):
        return float(np.mean(model.log_h(tuple(p), fit.points_w)))

    grad = numerical_gradient(mean_loglik, np.array(fit.family.params))
    assert np.all(np.abs(grad) < 1e-4)


def test_constant_does_not_move_estimate(logistic_pairs):
    x, y = logistic_pairs[:, 0], logistic_pairs[:, 1]
    without = point_process_service.fit_pp(x, y, FamilyTag.HUSLER_REISS, 0.7)
    with_constant = point_process_service.fit_pp(x, y, FamilyTag.HUSLER_REISS, 0.7, include_constant=True)
    assert with_constant.family.alpha == pytest.approx(without.family.alpha, abs=1e-6)
    assert with_constant.loglik == pytest.approx(without.loglik, rel=1e-9)


def test_independent_pairs_move_toward_logistic_boundary():
    # interior angles of independent pairs shrink toward the axes only like 1 / log r0, so alpha rises with the level
    pairs = simulation_service.sim_bvevd(DependenceFamily(tag=FamilyTag.LOGISTIC, params=(1.0,)), 10_000, seed=42)
    low = point_process_service.fit_pp(pairs[:, 0], pairs[:, 1], FamilyTag.LOGISTIC, 0.7)
    high = point_process_service.fit_pp(pairs[:, 0], pairs[:, 1], FamilyTag.LOGISTIC, 0.99)
    assert high.family.alpha > low.family.alpha + 0.05
    assert low.family.alpha > 0.6
    assert point_process_service.classify_pp_strength(high) in ("independent", "nearly weak")


def test_too_few_points():
    pairs = simulation_service.sim_bvevd(DependenceFamily(tag=FamilyTag.LOGISTIC, params=(0.5,)), 20, seed=1)
    with pytest.raises(DataValidationError, match="too few points"):
        point_process_service.fit_pp(pairs[:, 0], pairs[:, 1], FamilyTag.LOGISTIC, 0.7)


def test_angular_grid_is_a_distribution():
    w, cdf, h = angular_grid(DependenceFamily(tag=FamilyTag.HUSLER_REISS, params=(1.3,)))
    assert cdf[0] == 0.0
    assert cdf[-1] == pytest.approx(1.0)
    assert np.all(np.diff(cdf) >= 0)
    assert np.all(h >= 0)
    # symmetric family: half the angular mass on each side of w = 1/2
    assert np.interp(0.5, w, cdf) == pytest.approx(0.5, abs=1e-9)


def test_angular_grid_needs_interior_mass():
    with pytest.raises(DataValidationError):
        angular_grid(DependenceFamily(tag=FamilyTag.LOGISTIC, params=(1.0,)))


def test_angular_diagnostics(logistic_fit):
    bundle = point_process_service.pp_diagnostics(logistic_fit, n_bins=20)
    assert set(bundle) == {'pp', 'qq', 'histogram'}
    pp = bundle['pp']
    assert len(pp) == logistic_fit.n_points
    assert np.max(np.abs(pp['y'] - pp['x'])) < 0.1
    assert np.all(np.diff(bundle['qq']['x']) >= 0)
    histogram = bundle['histogram']
    assert np.sum(histogram['y']) / 20 == pytest.approx(1.0)
    assert np.sum(histogram['model']) / 20 == pytest.approx(1.0, abs=0.05)
    row = point_process_service.diagnostics_row("A_B", logistic_fit, bundle)
    assert row['family'] == "logistic"
    assert float(row['max_pp_deviation']) < 0.1


def test_ranking_by_aic():

    aics = dict(zip(FamilyTag, [3762.38, 3711.77, 3669.11, 3763.84, 3712.99, 3718.47]))
    fits = [_pp_fit(tag, (0.5,) if FAMILY_PARAM_COUNT[tag] == 1 else (0.5, 0.5), aic) for tag, aic in aics.items()]
    ranked = point_process_service.rank_fits(fits)
    assert ranked[0].family.tag == FamilyTag.HUSLER_REISS
    assert [f.aic for f in ranked] == pytest.approx(sorted(aics.values()))


def test_ranking_ties():
    fits = [_pp_fit(FamilyTag.BILOGISTIC, (0.5, 0.5), 100.0), _pp_fit(FamilyTag.NEG_LOGISTIC, (1.0,), 100.0),
            _pp_fit(FamilyTag.LOGISTIC, (0.5,), 100.0)]
    ranked = point_process_service.rank_fits(fits)
    assert [f.family.tag for f in ranked] == [FamilyTag.LOGISTIC, FamilyTag.NEG_LOGISTIC, FamilyTag.BILOGISTIC]


def test_aic_of_zero_loglik():
    assert _pp_fit(FamilyTag.LOGISTIC, (0.5,)).aic == 2


def test_aic_must_match_loglik():
    with pytest.raises(DataValidationError):
        PpFit(family=DependenceFamily(tag=FamilyTag.LOGISTIC, params=(0.5,)), loglik=0.0, loglik_theta=0.0,
              aic=5.0, se=(0.1,), n_points=1, n_total=10, r0=0.1, quantile_level=0.7, points_r=[0.2],
              points_w=[0.5])


def test_select_family_ranks_all_six(logistic_pairs):
    selection = point_process_service.select_family(logistic_pairs[:, 0], logistic_pairs[:, 1], ("A", "B"))
    assert len(selection.fits) + len(selection.failures) == 6
    aics = [f.aic for f in selection.fits]
    assert aics == sorted(aics)
    assert selection.best.family.tag in (FamilyTag.LOGISTIC, FamilyTag.BILOGISTIC, FamilyTag.HUSLER_REISS,
                                         FamilyTag.NEG_LOGISTIC)

    table = point_process_service.pair_table(selection)
    assert list(table.columns) == ['family', 'alpha', 'beta', 'aic']
    one_param = table[table['family'].isin(['logistic', 'neg_logistic', 'husler_reiss'])]
    assert set(one_param['beta']) == {"Nil"}

    restored = point_process_service.pp_fits_from_dict(
        json.loads(json.dumps(point_process_service.pp_fits_to_dict({"A_B": selection}))))
    assert restored["A_B"].best.family == selection.best.family
    assert restored["A_B"].best.aic == selection.best.aic


def test_select_panel_requires_frechet_scale():
    panel = simulation_service.sim_gauss_copula_panel(np.eye(3), 300, seed=3, scale="laplace")
    with pytest.raises(DataValidationError):
        point_process_service.select_panel(panel)


def test_select_panel_covers_every_pair():
    corr = np.array([[1.0, 0.5, 0.3], [0.5, 1.0, 0.4], [0.3, 0.4, 1.0]])
    panel = simulation_service.sim_gauss_copula_panel(corr, 2000, seed=4, scale="frechet")
    selections = point_process_service.select_panel(panel, 0.7, seed=1)
    assert sorted(selections) == ["M1_M2", "M1_M3", "M2_M3"]
    summary = point_process_service.selection_summary(selections)
    assert len(summary) == 3


def test_format_estimate():
    assert format_estimate(1.3413, 0.0345) == "1.3413 (0.0345)"
    assert format_estimate(None) == "Nil"
    assert format_estimate(0.5, float('nan')) == "0.5000 (NA)"


@pytest.mark.parametrize("alpha,label", [
    (1.3413, "fairly strong"),
    (1.31, "weak"),
    (0.5, "nearly weak"),
    (2.0, "strong"),
])
def test_husler_reiss_bands(alpha, label):
    assert point_process_service.classify_pp_strength(_pp_fit(FamilyTag.HUSLER_REISS, (alpha,))) == label


def test_independence_limit_label():
    assert point_process_service.classify_pp_strength(_pp_fit(FamilyTag.LOGISTIC, (1.0,))) == "independent"


def test_configurable_bands():
    fit = _pp_fit(FamilyTag.HUSLER_REISS, (1.31,))
    assert point_process_service.classify_pp_strength(fit, hr_bands=(1.0, 1.3, 1.6)) == "fairly strong"


def test_compare_identical_labels():
    labels = {"A_B": "weak", "A_C": "fairly strong", "B_C": "strong"}
    comparison = point_process_service.compare_models(labels, labels)
    assert (comparison.agree, comparison.near, comparison.disagree) == (3, 0, 0)


def test_compare_panel_counts():
    pairs = [f"P{i}_Q{i}" for i in range(10)]
    cmev = {p: "weak positive" for p in pairs[:7]}
    cmev.update({p: "fairly strong positive" for p in pairs[7:]})
    pp = {p: "weak" for p in pairs[:7]}
    pp.update({pairs[7]: "fairly strong", pairs[8]: "fairly strong", pairs[9]: "nearly weak"})
    comparison = point_process_service.compare_models(cmev, pp)
    assert comparison.panels == [("weak", "weak", 7), ("fairly strong", "fairly strong", 2),
                                 ("fairly strong", "nearly weak", 1)]
    assert (comparison.agree, comparison.near, comparison.disagree) == (9, 0, 1)
    assert len(point_process_service.comparison_table(comparison)) == 10


def test_compare_reads_very_weak_as_nearly_weak():
    comparison = point_process_service.compare_models({"A_B": "very weak negative"}, {"A_B": "nearly weak"})
    assert comparison.agree == 1


def test_compare_rejects_bad_input():
    with pytest.raises(DataValidationError):
        point_process_service.compare_models({}, {})
    with pytest.raises(DataValidationError):
        point_process_service.compare_models({"A_B": "weak"}, {"A_C": "weak"})


@pytest.mark.slow
@pytest.mark.parametrize("tag,params", [(FamilyTag.LOGISTIC, (0.5,)), (FamilyTag.HUSLER_REISS, (1.3,))])
def test_parameter_recovery_over_seeds(tag, params):
    family = DependenceFamily(tag=tag, params=params)
    hits = 0
    for seed in range(100):
        pairs = simulation_service.sim_bvevd(family, 10_000, seed=seed)
        fit = point_process_service.fit_pp(pairs[:, 0], pairs[:, 1], tag, 0.7, seed=seed)
        hits += abs(fit.family.alpha - params[0]) < 0.05
    assert hits >= 90


# generating families at mid-domain parameters, with the number of wins out of 100 each must reach
SELECTION_STUDY = [
    (FamilyTag.LOGISTIC, (0.5,), 75),
    (FamilyTag.NEG_LOGISTIC, (2.0,), 80),
    (FamilyTag.HUSLER_REISS, (1.3,), 75),
    (FamilyTag.BILOGISTIC, (0.3, 0.7), 75),
    (FamilyTag.NEG_BILOGISTIC, (0.5, 2.0), 75),
    (FamilyTag.COLES_TAWN, (0.5, 2.0), 75),
]


@pytest.mark.slow
@pytest.mark.parametrize("tag,params,floor", SELECTION_STUDY, ids=[t.value for t, _, _ in SELECTION_STUDY])
def test_generating_family_is_selected(tag, params, floor):
    family = DependenceFamily(tag=tag, params=params)
    wins = 0
    for seed in range(100):
        pairs = simulation_service.sim_bvevd(family, 10_000, seed=seed)
        selection = point_process_service.select_family(pairs[:, 0], pairs[:, 1], seed=seed)
        wins += selection.best.family.tag == tag
    assert wins >= floor

