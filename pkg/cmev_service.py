import logging
from typing import Any, Dict, Optional, Sequence

import numpy as np
import pandas as pd
import statsmodels.api as sm
from scipy.stats import laplace

from app import run_parallel
from exceptions import DataValidationError, TailDepError
from margin_service import margin_service
from models import HtFit, HtTargetFit, MarginTransform, PredictionResult, ReturnPanel
from optimization import minimize_with_restarts
from simulation_service import SimRandom

B_BOUNDS = (-5.0, 1.0 - 1e-8)
MIN_LOG_SIGMA = np.log(1e-8)
LOG_2PI = np.log(2 * np.pi)
LOWESS_FRAC = 2.0 / 3.0
MIN_LOWESS_POINTS = 10
CURVE_LEVELS = (0.05, 0.5, 0.95)
BOUNDARY_A = "boundary solution |a| = 1"


def laplace_threshold(level: float) -> float:
    return float(laplace.ppf(level))


def classify_dependence(a: float) -> str:
    """Verbal strength of conditional extremal dependence from the slope parameter"""
    if abs(a) > 1:
        raise DataValidationError(f"dependence parameter {a} outside [-1, 1]")
    if a == 0:
        return "independence"
    size = abs(a)
    if size < 0.1:
        strength = "very weak"
    elif size < 0.3:
        strength = "weak"
    elif size < 0.6:
        strength = "fairly strong"
    else:
        strength = "strong"
    return f"{strength} {'positive' if a > 0 else 'negative'}"


def ht_negative_loglik(theta: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    """Normal working likelihood: Y ~ N(aX + mu X^b, (sigma X^b)^2) given X above the threshold"""
    a, b, mu, log_sigma = theta
    xb = x ** b
    sd = np.exp(log_sigma) * xb
    resid = (y - a * x - mu * xb) / sd
    return float(np.sum(np.log(sd) + 0.5 * resid ** 2) + 0.5 * len(x) * LOG_2PI)


def lowess_slope(quantiles: np.ndarray, smooth: np.ndarray, low: float) -> float:
    """OLS slope of a smoothed curve against the conditioning quantile rescaled to [0, 1]"""
    scaled = (quantiles - low) / (1 - low)
    if len(scaled) < 2 or np.ptp(scaled) == 0:
        return float('nan')
    return float(np.polyfit(scaled, smooth, 1)[0])


class CmevService:
    def __init__(self, min_exceedances: int = 50, n_restarts: int = 5):
        self.min_exceedances = min_exceedances
        self.n_restarts = n_restarts

    def fit_ht(self, panel: ReturnPanel, conditioning_index: str, dep_quantile: float = 0.7,
               min_exceedances: Optional[int] = None, seed: int = 0) -> HtFit:
        """Fit every target given the conditioning market above its dep_quantile Laplace quantile"""
        if panel.scale != "laplace":
            raise DataValidationError(f"conditional extremes need a Laplace-scale panel, got '{panel.scale}'")
        if not 0.5 < dep_quantile < 1:
            raise DataValidationError("dependence quantile must lie in (0.5, 1)")
        floor = min_exceedances or self.min_exceedances

        u = laplace_threshold(dep_quantile)
        x_all = panel.column(conditioning_index)
        mask = x_all > u
        if mask.sum() < floor:
            raise DataValidationError(
                f"too few exceedances: {int(mask.sum())} rows of {conditioning_index} above {dep_quantile}, need {floor}"
            )
        x = x_all[mask]
        targets = [m for m in panel.market_ids if m != conditioning_index]

        params = {}
        residuals = []
        target_values = []
        for stream, target in enumerate(targets, start=1):
            y = panel.column(target)[mask]
            fit = self._fit_target(x, y, target, SimRandom(seed, stream))
            params[target] = fit
            residuals.append((y - fit.a * x) / x ** fit.b)
            target_values.append(y)

        logging.info(f"HT fit given {conditioning_index} at {dep_quantile}: " +
                     ", ".join(f"{t} a={p.a:.4f} b={p.b:.4f}" for t, p in params.items()))
        return HtFit(
            conditioning_index=conditioning_index,
            dep_quantile=dep_quantile,
            threshold=u,
            targets=targets,
            params=params,
            conditioning_values=x,
            target_values=np.column_stack(target_values),
            residuals=np.column_stack(residuals),
        )

    def _fit_target(self, x: np.ndarray, y: np.ndarray, target: str, rng: SimRandom) -> HtTargetFit:
        def objective(theta):
            return ht_negative_loglik(theta, x, y)

        slope = float(np.clip(np.polyfit(x, y, 1)[0], -0.9, 0.9))
        spread = max(float(np.std(y - slope * x)), 1e-3)
        starts = [np.array([slope, 0.2, 0.0, np.log(spread)])]
        starts += [np.array([a0, 0.2, 0.0, np.log(max(float(np.std(y - a0 * x)), 1e-3))]) for a0 in (0.0, 0.5, 0.95)]
        while len(starts) < self.n_restarts + 3:
            jitter = rng.normal(4) * np.array([0.2, 0.2, 0.2, 0.2])
            starts.append(np.clip(starts[0] + jitter, [-1, B_BOUNDS[0], -np.inf, MIN_LOG_SIGMA],
                                  [1, B_BOUNDS[1], np.inf, np.inf]))
        bounds = [(-1.0, 1.0), B_BOUNDS, (None, None), (MIN_LOG_SIGMA, None)]
        result = minimize_with_restarts(objective, starts, bounds=bounds, label=f"HT fit for {target}")
        a, b, mu, log_sigma = result.x

        flags = []
        if abs(a) >= 1 - 1e-6:
            flags.append(BOUNDARY_A)
            logging.warning(f"HT fit for {target} hit the boundary a = {a:.6f}")
        return HtTargetFit(target=target, a=float(np.clip(a, -1, 1)), b=float(b), mu=float(mu),
                           sigma=float(np.exp(log_sigma)), loglik=float(-result.fun), flags=tuple(flags))

    def fit_all(self, panel: ReturnPanel, dep_quantile: float, seed: int = 0) -> Dict[str, HtFit]:
        """One fit per conditioning market, on the worker pool"""
        fits = run_parallel(lambda m: self.fit_ht(panel, m, dep_quantile, seed=seed), panel.market_ids)
        return dict(zip(panel.market_ids, fits))

    def _smooth(self, q: np.ndarray, y: np.ndarray) -> np.ndarray:
        if len(q) < MIN_LOWESS_POINTS:
            return np.full(len(q), np.nan)
        return sm.nonparametric.lowess(y, q, frac=LOWESS_FRAC, it=0, delta=0.01 * np.ptp(q),
                                       return_sorted=False)

    def ht_diagnostics(self, fit: HtFit) -> Dict[str, Dict[str, pd.DataFrame]]:
        """Residual-trend layers and fitted conditional quantile curves for every target"""
        x = fit.conditioning_values
        order = np.argsort(x)
        q = laplace.cdf(x[order])
        grid = np.linspace(fit.threshold, x.max(), 100)
        bundle = {}
        for target in fit.targets:
            z = fit.residual_column(target)[order]
            spread = np.abs(z - z.mean())
            p = fit.params[target]
            curves = {'x': grid}
            for level in CURVE_LEVELS:
                curves[f"q{int(round(level * 100)):02d}"] = p.a * grid + grid ** p.b * np.quantile(z, level)
            bundle[target] = {
                'residuals': pd.DataFrame({'x': q, 'y': z, 'smooth': self._smooth(q, z)}),
                'spread': pd.DataFrame({'x': q, 'y': spread, 'smooth': self._smooth(q, spread)}),
                'scatter': pd.DataFrame({'x': x[order], 'y': fit.target_values[order, fit.targets.index(target)]}),
                'quantile_curves': pd.DataFrame(curves),
            }
        return bundle

    def diagnostic_slopes(self, fit: HtFit, bundle: Optional[Dict[str, Dict[str, pd.DataFrame]]] = None) -> Dict[str, Dict[str, float]]:
        bundle = bundle or self.ht_diagnostics(fit)
        return {
            target: {
                layer: lowess_slope(layers[layer]['x'].to_numpy(), layers[layer]['smooth'].to_numpy(), fit.dep_quantile)
                for layer in ('residuals', 'spread')
            }
            for target, layers in bundle.items()
        }

    def dependence_quantile_search(self, panel: ReturnPanel, conditioning_index: str,
                                   grid: Sequence[float], seed: int = 0) -> pd.DataFrame:
        """(a, b) and residual-trend slopes across candidate dependence quantiles"""
        rows = []
        for level in grid:
            try:
                fit = self.fit_ht(panel, conditioning_index, level, seed=seed)
            except TailDepError as e:
                logging.warning(f"HT fit given {conditioning_index} failed at {level}: {str(e)}")
                rows.append({'conditioning': conditioning_index, 'dep_quantile': level, 'error': str(e)})
                continue
            slopes = self.diagnostic_slopes(fit)
            for target in fit.targets:
                rows.append({
                    'conditioning': conditioning_index, 'dep_quantile': level, 'target': target,
                    'a': fit.params[target].a, 'b': fit.params[target].b, 'n_exceed': fit.n_cond_exceed,
                    'slope_residuals': slopes[target]['residuals'], 'slope_spread': slopes[target]['spread'],
                    'error': '',
                })
        return pd.DataFrame(rows)

    def _simulate(self, fit: HtFit, pred_quantile: float, n_importance: int, seed: int, stream: int):
        if pred_quantile < fit.dep_quantile:
            raise DataValidationError(
                f"prediction quantile {pred_quantile} is below the dependence quantile {fit.dep_quantile}"
            )
        if fit.n_cond_exceed == 0 or fit.residuals.size == 0:
            raise DataValidationError("empty residual set")
        if n_importance <= 0:
            raise DataValidationError("importance sample size must be positive")
        rng = SimRandom(seed, stream)
        x = laplace_threshold(pred_quantile) + rng.exponential(n_importance)
        rows = rng.integers(fit.n_cond_exceed, n_importance)
        a = np.array([fit.params[t].a for t in fit.targets])
        b = np.array([fit.params[t].b for t in fit.targets])
        y = a * x[:, None] + x[:, None] ** b * fit.residuals[rows]
        return x, y

    def importance_sample(self, fit: HtFit, pred_quantile: float = 0.9, n_importance: int = 100_000,
                          seed: int = 0, margins: Optional[Dict[str, MarginTransform]] = None,
                          stream: int = 0) -> pd.DataFrame:
        """Simulated Laplace rows given the conditioning market above pred_quantile.

        With margins, each column is also mapped back to returns together with the
        equal-quantile reference value of every target.
        """
        x, y = self._simulate(fit, pred_quantile, n_importance, seed, stream)
        frame = pd.DataFrame(y, columns=fit.targets)
        frame.insert(0, fit.conditioning_index, x)
        if margins:
            frame[f"{fit.conditioning_index}_return"] = margin_service.from_laplace(margins[fit.conditioning_index], x)
            for j, target in enumerate(fit.targets):
                frame[f"{target}_return"] = margin_service.from_laplace(margins[target], y[:, j])
                frame[f"{target}_reference"] = margin_service.from_laplace(margins[target], x)
        return frame

    def predict_exceedance_prob(self, fit: HtFit, margins: Optional[Dict[str, MarginTransform]] = None,
                                pred_quantile: float = 0.9, n_importance: int = 100_000, seed: int = 0,
                                target_quantile: Optional[float] = None, stream: int = 0) -> PredictionResult:
        """Fraction of simulated targets above their own threshold, given the conditioning market is extreme"""
        target_quantile = fit.dep_quantile if target_quantile is None else target_quantile
        x, y = self._simulate(fit, pred_quantile, n_importance, seed, stream)
        threshold = laplace_threshold(target_quantile)

        probabilities = {}
        conditional_quantiles = {}
        for j, target in enumerate(fit.targets):
            probabilities[target] = float(np.mean(y[:, j] > threshold))
            levels = np.quantile(y[:, j], CURVE_LEVELS)
            if margins:
                levels = margin_service.from_laplace(margins[target], levels)
            conditional_quantiles[target] = {f"{q:g}": float(v) for q, v in zip(CURVE_LEVELS, levels)}

        logging.info(f"Predicted exceedance given {fit.conditioning_index} above {pred_quantile}: " +
                     ", ".join(f"{t}={p:.3f}" for t, p in probabilities.items()))
        return PredictionResult(
            conditioning_index=fit.conditioning_index,
            pred_quantile=pred_quantile,
            target_quantile=target_quantile,
            probabilities=probabilities,
            conditional_quantiles=conditional_quantiles,
            n_importance=n_importance,
            seed=seed,
        )

    def prediction_quantile_search(self, fit: HtFit, grid: Sequence[float], n_importance: int = 100_000,
                                   seed: int = 0, target_quantile: Optional[float] = None) -> pd.DataFrame:
        rows = []
        for level in grid:
            if level < fit.dep_quantile:
                logging.warning(f"Skipping prediction quantile {level} below dependence quantile {fit.dep_quantile}")
                continue
            result = self.predict_exceedance_prob(fit, pred_quantile=level, n_importance=n_importance, seed=seed,
                                                  target_quantile=target_quantile)
            for target, p in result.probabilities.items():
                rows.append({'conditioning': fit.conditioning_index, 'pred_quantile': level, 'target': target,
                             'probability': p, 'n_importance': n_importance})
        return pd.DataFrame(rows)

    def parameter_frame(self, fits: Dict[str, HtFit]) -> pd.DataFrame:
        rows = []
        for conditioning, fit in fits.items():
            for target in fit.targets:
                p = fit.params[target]
                rows.append({'conditioning': conditioning, 'target': target, 'a': p.a, 'b': p.b, 'mu': p.mu,
                             'sigma': p.sigma, 'label': classify_dependence(p.a), 'flags': ";".join(p.flags)})
        return pd.DataFrame(rows)

    def pair_labels(self, fits: Dict[str, HtFit], market_ids: Sequence[str]) -> Dict[str, str]:
        """One label per unordered pair, from the conditioning direction with the larger |a|"""
        labels = {}
        for i, first in enumerate(market_ids):
            for second in market_ids[i + 1:]:
                forward = fits[first].params[second].a
                backward = fits[second].params[first].a
                labels[f"{first}_{second}"] = classify_dependence(forward if abs(forward) >= abs(backward) else backward)
        return labels

    def ht_fits_to_dict(self, fits: Dict[str, HtFit]) -> Dict[str, Any]:
        return {
            conditioning: {
                'dep_quantile': fit.dep_quantile,
                'threshold': fit.threshold,
                'targets': fit.targets,
                'params': {t: p.model_dump() for t, p in fit.params.items()},
                'conditioning_values': fit.conditioning_values.tolist(),
                'target_values': fit.target_values.tolist(),
                'residuals': fit.residuals.tolist(),
            }
            for conditioning, fit in fits.items()
        }

    def ht_fits_from_dict(self, data: Dict[str, Any]) -> Dict[str, HtFit]:
        try:
            return {
                conditioning: HtFit(
                    conditioning_index=conditioning,
                    dep_quantile=item['dep_quantile'],
                    threshold=item['threshold'],
                    targets=item['targets'],
                    params={t: HtTargetFit(**p) for t, p in item['params'].items()},
                    conditioning_values=item['conditioning_values'],
                    target_values=item['target_values'],
                    residuals=item['residuals'],
                )
                for conditioning, item in data.items()
            }
        except (KeyError, TypeError, ValueError) as e:
            raise DataValidationError(f"malformed conditional extremes record: {str(e)}")


cmev_service = CmevService()
