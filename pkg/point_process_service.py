"""Poisson-process dependence fits above a radial threshold, AIC selection and the CMEV comparison."""
import logging
from itertools import combinations
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import integrate, special

from app import run_parallel
from dependence_families import FAMILY_MODELS, extremal_coefficient, pseudo_polar
from exceptions import ConvergenceFailure, DataValidationError, TailDepError
from models import (
    FAMILY_ORDER, FAMILY_PARAM_COUNT, ComparisonRow, DependenceFamily, FamilySelection, FamilyTag,
    ModelComparison, PpFit, ReturnPanel,
)
from optimization import compute_hessian, covariance_from_hessian, minimize_with_restarts
from simulation_service import SimRandom

LOG_BOUND = 10.0
LOGIT_BOUND = 15.0
# Logit-scale grid carrying the fitted angular distribution for diagnostics
LOGIT_SPAN = 30.0
ANGULAR_GRID_SIZE = 4001
BOUNDARY_ESTIMATE = "boundary estimate"
STRENGTH_SCALE = {"independent": 0, "nearly weak": 1, "weak": 2, "fairly strong": 3, "strong": 4}

# Starting values on the natural scale, before random perturbation
FAMILY_STARTS = {
    FamilyTag.LOGISTIC: [(0.3,), (0.6,), (0.9,)],
    FamilyTag.NEG_LOGISTIC: [(0.3,), (1.0,), (3.0,)],
    FamilyTag.HUSLER_REISS: [(0.5,), (1.3,), (3.0,)],
    FamilyTag.BILOGISTIC: [(0.5, 0.5), (0.3, 0.7), (0.7, 0.3)],
    FamilyTag.NEG_BILOGISTIC: [(1.0, 1.0), (0.5, 2.0), (2.0, 0.5)],
    FamilyTag.COLES_TAWN: [(1.0, 1.0), (0.3, 0.3), (3.0, 3.0)],
}
LOGIT_FAMILIES = {FamilyTag.LOGISTIC, FamilyTag.BILOGISTIC}


def to_working(tag: FamilyTag, params: Sequence[float]) -> np.ndarray:
    p = np.asarray(params, dtype=float)
    return special.logit(p) if tag in LOGIT_FAMILIES else np.log(p)


def to_natural(tag: FamilyTag, theta: Sequence[float]) -> Tuple[float, ...]:
    t = np.asarray(theta, dtype=float)
    return tuple(float(v) for v in (special.expit(t) if tag in LOGIT_FAMILIES else np.exp(t)))


def radial_threshold(quantile_level: float, n: int) -> float:
    """x + y = 2v/n passes through the point where both 1/n-scaled margins sit at their quantile_level quantile v/n"""
    return -2.0 / np.log(quantile_level) / n


def pp_constant(points_r: np.ndarray, r0: float) -> float:
    """Parameter-free part of the Poisson-process log-likelihood"""
    return float(-2.0 / r0 + np.sum(np.log(2.0) - 2.0 * np.log(points_r)))


def pp_loglik(family: DependenceFamily, points_r: np.ndarray, points_w: np.ndarray, r0: float,
              include_constant: bool = True) -> float:
    """-Phi(K) + sum log lambda(r, w) with lambda = 2 h(w) / r^2"""
    theta_part = float(np.sum(FAMILY_MODELS[family.tag].log_h(family.params, np.asarray(points_w, dtype=float))))
    return theta_part + pp_constant(np.asarray(points_r, dtype=float), r0) if include_constant else theta_part


def format_estimate(value: Optional[float], se: Optional[float] = None) -> str:
    """Four decimals with the standard error in parentheses; Nil when the parameter is absent"""
    if value is None:
        return "Nil"
    if se is None:
        return f"{value:.4f}"
    return f"{value:.4f} ({se:.4f})" if np.isfinite(se) else f"{value:.4f} (NA)"


def pair_key(pair: Tuple[str, str]) -> str:
    return f"{pair[0]}_{pair[1]}"


def angular_grid(family: DependenceFamily) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(w, H(w), h(w)) of the fitted angular distribution on a logit-spaced grid, normalized over (0, 1)"""
    s = np.linspace(-LOGIT_SPAN, LOGIT_SPAN, ANGULAR_GRID_SIZE)
    w = special.expit(s)
    h = np.exp(FAMILY_MODELS[family.tag].log_h(family.params, w))
    cumulative = integrate.cumulative_trapezoid(h * w * (1 - w), s, initial=0.0)
    mass = cumulative[-1]
    if not mass > 0:
        raise DataValidationError(f"{family.tag.value} {family.params} has no interior angular mass")
    return w, cumulative / mass, h / mass


class PointProcessService:
    def __init__(self, min_points: int = 30, n_restarts: int = 5,
                 hr_bands: Tuple[float, float, float] = (1.0, 1.32, 1.6)):
        self.min_points = min_points
        self.n_restarts = n_restarts
        self.hr_bands = hr_bands

    def extract_points(self, x, y, quantile_level: float,
                       min_points: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray, float, int]:
        """Scale the Fréchet pairs by 1/n and keep those beyond the radial threshold"""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.shape != y.shape or x.ndim != 1:
            raise DataValidationError("Fréchet coordinates must be two vectors of equal length")
        if not 0 < quantile_level < 1:
            raise DataValidationError(f"quantile level {quantile_level} outside (0, 1)")
        n = len(x)
        r, w = pseudo_polar(x / n, y / n)
        r0 = radial_threshold(quantile_level, n)
        keep = (r > r0) & (w > 0) & (w < 1)
        floor = min_points or self.min_points
        if keep.sum() < floor:
            raise DataValidationError(f"too few points: {int(keep.sum())} beyond the radial threshold, need {floor}")
        return r[keep], w[keep], r0, n

    def fit_pp(self, x, y, tag: FamilyTag, quantile_level: float = 0.7, min_points: Optional[int] = None,
               seed: int = 0, include_constant: bool = False) -> PpFit:
        """Maximum-likelihood fit of one family to the points beyond the radial threshold.

        Only sum log h depends on the parameters; include_constant adds the
        parameter-free terms to the objective and must not move the estimate.
        """
        tag = FamilyTag(tag)
        r, w, r0, n = self.extract_points(x, y, quantile_level, min_points)
        model = FAMILY_MODELS[tag]
        constant = pp_constant(r, r0) if include_constant else 0.0

        def natural_objective(params):
            try:
                value = -float(np.sum(model.log_h(tuple(params), w)))
            except TailDepError:
                return np.inf
            return value if np.isfinite(value) else np.inf

        def objective(theta):
            return natural_objective(to_natural(tag, theta)) - constant

        k = FAMILY_PARAM_COUNT[tag]
        bound = LOGIT_BOUND if tag in LOGIT_FAMILIES else LOG_BOUND
        starts = [to_working(tag, p) for p in FAMILY_STARTS[tag]]
        rng = SimRandom(seed, stream=k)
        while len(starts) < self.n_restarts:
            starts.append(starts[0] + rng.normal(k))
        result = minimize_with_restarts(objective, starts, bounds=[(-bound, bound)] * k,
                                        label=f"{tag.value} point-process fit")

        params = to_natural(tag, result.x)
        family = DependenceFamily(tag=tag, params=params)
        flags = []
        if np.any(np.abs(result.x) >= bound - 1e-3) or (tag == FamilyTag.LOGISTIC and params[0] > 1 - 1e-4):
            flags.append(BOUNDARY_ESTIMATE)
            logging.warning(f"{tag.value} estimate {params} sits at the edge of the parameter space")

        cov = covariance_from_hessian(compute_hessian(natural_objective, np.array(params), eps=1e-5),
                                      label=f"{tag.value} point-process fit")
        se = tuple(float(np.sqrt(v)) if v >= 0 else float('nan') for v in np.diag(cov))

        loglik_theta = -natural_objective(params)
        loglik = loglik_theta + pp_constant(r, r0)
        logging.info(f"{tag.value} fit: params={tuple(round(p, 4) for p in params)} "
                     f"loglik={loglik:.2f} points={len(r)}")
        return PpFit(
            family=family,
            loglik=loglik,
            loglik_theta=loglik_theta,
            aic=2 * k - 2 * loglik,
            se=se,
            n_points=len(r),
            n_total=n,
            r0=r0,
            quantile_level=quantile_level,
            points_r=r,
            points_w=w,
            flags=tuple(flags),
        )

    def pp_diagnostics(self, fit: PpFit, n_bins: int = 20) -> Dict[str, pd.DataFrame]:
        """Angular probability, quantile and histogram plot data for the points beyond the radial threshold"""
        w = np.sort(fit.points_w)
        k = len(w)
        positions = np.arange(1, k + 1) / (k + 1)
        grid_w, grid_cdf, grid_h = angular_grid(fit.family)

        density, edges = np.histogram(w, bins=n_bins, range=(0.0, 1.0), density=True)
        centres = 0.5 * (edges[:-1] + edges[1:])

        return {
            'pp': pd.DataFrame({'x': positions, 'y': np.interp(w, grid_w, grid_cdf)}),
            'qq': pd.DataFrame({'x': np.interp(positions, grid_cdf, grid_w), 'y': w}),
            'histogram': pd.DataFrame({'x': centres, 'y': density, 'model': np.interp(centres, grid_w, grid_h)}),
        }

    def diagnostics_row(self, key: str, fit: PpFit, bundle: Dict[str, pd.DataFrame]) -> Dict[str, Any]:
        pp = bundle['pp']
        return {'pair': key, 'family': fit.family.tag.value, 'n_points': fit.n_points,
                'max_pp_deviation': f"{float(np.max(np.abs(pp['y'] - pp['x']))):.4f}"}

    def rank_fits(self, fits: Sequence[PpFit]) -> List[PpFit]:

        """Ascending AIC, then fewer parameters, then family order"""
        return sorted(fits, key=lambda f: (f.aic, f.n_params, FAMILY_ORDER.index(f.family.tag)))

    def select_family(self, x, y, pair: Tuple[str, str] = ("X", "Y"), quantile_level: float = 0.7,
                      seed: int = 0, min_points: Optional[int] = None) -> FamilySelection:
        """Fit all six families and rank them; a failed family is recorded and excluded"""
        self.extract_points(x, y, quantile_level, min_points)
        fits = []
        failures = {}
        for tag in FAMILY_ORDER:
            try:
                fits.append(self.fit_pp(x, y, tag, quantile_level, min_points, seed))
            except TailDepError as e:
                logging.warning(f"{tag.value} fit failed for {pair_key(pair)}: {str(e)}")
                failures[tag.value] = str(e)
        if not fits:
            raise ConvergenceFailure(f"all six families failed for {pair_key(pair)}")
        ranked = self.rank_fits(fits)
        logging.info(f"Best family for {pair_key(pair)}: {ranked[0].family.tag.value} (AIC {ranked[0].aic:.2f})")
        return FamilySelection(pair=pair, fits=ranked, failures=failures)

    def select_panel(self, panel: ReturnPanel, quantile_level: float = 0.7,
                     seed: int = 0) -> Dict[str, FamilySelection]:
        """Family selection for every unordered market pair of a Fréchet-scale panel"""
        if panel.scale != "frechet":
            raise DataValidationError(f"point-process fits need a Fréchet-scale panel, got '{panel.scale}'")
        pairs = list(combinations(panel.market_ids, 2))

        def select_one(pair):
            return self.select_family(panel.column(pair[0]), panel.column(pair[1]), pair, quantile_level, seed)

        selections = run_parallel(select_one, pairs)
        return {pair_key(pair): s for pair, s in zip(pairs, selections)}

    def strength_cutoffs(self, hr_bands: Optional[Tuple[float, float, float]] = None) -> np.ndarray:
        """chi = 2 - V(1, 1) of the Hüsler-Reiss model at each band edge"""
        bands = np.asarray(hr_bands or self.hr_bands, dtype=float)
        return 2.0 - 2.0 * special.ndtr(1.0 / bands)

    def classify_pp_strength(self, fit: PpFit, hr_bands: Optional[Tuple[float, float, float]] = None) -> str:
        labels = ["nearly weak", "weak", "fairly strong", "strong"]
        family = fit.family
        chi = 2.0 - extremal_coefficient(family)
        if chi <= 1e-12:
            return "independent"
        if family.tag == FamilyTag.HUSLER_REISS:
            band = int(np.searchsorted(np.asarray(hr_bands or self.hr_bands), family.alpha, side='right'))
        else:
            band = int(np.searchsorted(self.strength_cutoffs(hr_bands), chi, side='right'))
        return labels[band]

    def normalize_label(self, label: str) -> str:
        """Shared vocabulary: no sign, very weak read as nearly weak"""
        base = label.replace(" positive", "").replace(" negative", "").strip()
        return {"very weak": "nearly weak", "independence": "independent"}.get(base, base)

    def compare_models(self, cmev_labels: Dict[str, str], pp_labels: Dict[str, str]) -> ModelComparison:
        """Pairwise agreement of the two models' verbal strength labels"""
        if not cmev_labels or not pp_labels:
            raise DataValidationError("nothing to compare: empty label set")
        if set(cmev_labels) != set(pp_labels):
            raise DataValidationError(
                f"pair sets differ: {sorted(set(cmev_labels) ^ set(pp_labels))}"
            )
        rows = []
        counts = {"agree": 0, "near": 0, "disagree": 0}
        panels: Dict[Tuple[str, str], int] = {}
        for key, raw in cmev_labels.items():
            cmev_label = self.normalize_label(raw)
            pp_label = self.normalize_label(pp_labels[key])
            if cmev_label not in STRENGTH_SCALE or pp_label not in STRENGTH_SCALE:
                raise DataValidationError(f"unknown strength label for {key}: '{raw}' / '{pp_labels[key]}'")
            gap = abs(STRENGTH_SCALE[cmev_label] - STRENGTH_SCALE[pp_label])
            agreement = "agree" if gap == 0 else "near" if gap == 1 else "disagree"
            counts[agreement] += 1
            panels[(cmev_label, pp_label)] = panels.get((cmev_label, pp_label), 0) + 1
            rows.append(ComparisonRow(pair=tuple(key.split("_", 1)), cmev_label=cmev_label, pp_label=pp_label,
                                      agreement=agreement))
        return ModelComparison(rows=rows, agree=counts["agree"], near=counts["near"], disagree=counts["disagree"],
                               panels=[(c, p, n) for (c, p), n in panels.items()])

    def pair_table(self, selection: FamilySelection) -> pd.DataFrame:
        rows = []
        for fit in selection.fits:
            rows.append({
                'family': fit.family.tag.value,
                'alpha': format_estimate(fit.family.alpha, fit.se[0]),
                'beta': format_estimate(fit.family.beta, fit.se[1] if fit.n_params > 1 else None),
                'aic': f"{fit.aic:.2f}",
            })
        for tag, error in selection.failures.items():
            rows.append({'family': tag, 'alpha': "failed", 'beta': "Nil", 'aic': "NA"})
        return pd.DataFrame(rows)

    def selection_summary(self, selections: Dict[str, FamilySelection]) -> pd.DataFrame:
        rows = []
        for key, selection in selections.items():
            best = selection.best
            rows.append({'pair': key, 'family': best.family.tag.value, 'aic': f"{best.aic:.2f}",
                         'strength': self.classify_pp_strength(best), 'n_points': best.n_points})
        return pd.DataFrame(rows)

    def comparison_table(self, comparison: ModelComparison) -> pd.DataFrame:
        return pd.DataFrame([{'pair': pair_key(r.pair), 'cmev': r.cmev_label, 'point_process': r.pp_label,
                              'agreement': r.agreement} for r in comparison.rows])

    def pp_fits_to_dict(self, selections: Dict[str, FamilySelection]) -> Dict[str, Any]:
        return {
            key: {
                'pair': list(s.pair),
                'failures': s.failures,
                'fits': [
                    {
                        'family': f.family.tag.value, 'params': list(f.family.params), 'loglik': f.loglik,
                        'loglik_theta': f.loglik_theta, 'aic': f.aic, 'se': list(f.se), 'n_points': f.n_points,
                        'n_total': f.n_total, 'r0': f.r0, 'quantile_level': f.quantile_level,
                        'points_r': f.points_r.tolist(), 'points_w': f.points_w.tolist(), 'flags': list(f.flags),
                    }
                    for f in s.fits
                ],
            }
            for key, s in selections.items()
        }

    def pp_fits_from_dict(self, data: Dict[str, Any]) -> Dict[str, FamilySelection]:
        try:
            selections = {}
            for key, item in data.items():
                fits = []
                for f in item['fits']:
                    record = dict(f)
                    record['family'] = DependenceFamily(tag=FamilyTag(record['family']),
                                                        params=tuple(record.pop('params')))
                    record['se'] = tuple(record['se'])
                    record['flags'] = tuple(record['flags'])
                    fits.append(PpFit(**record))
                selections[key] = FamilySelection(pair=tuple(item['pair']), fits=fits, failures=item['failures'])
            return selections
        except (KeyError, TypeError, ValueError) as e:
            raise DataValidationError(f"malformed point-process record: {str(e)}")


point_process_service = PointProcessService()
