import logging
import os
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import genpareto

from exceptions import DataValidationError, TailDepError
from models import GpdFit
from optimization import compute_hessian, covariance_from_hessian, minimize_with_restarts
from simulation_service import SimRandom

# Below this |xi| the exponential limit is used
XI_ZERO = 1e-8
UNRELIABLE_MLE = "unreliable MLE regime"
NO_STANDARD_ERRORS = "standard errors unavailable"


def empirical_quantile(sample: np.ndarray, level: float) -> float:
    """Linear interpolation between order statistics at plotting positions i/(n+1)"""
    return float(np.quantile(sample, level, method='weibull'))


def gpd_loglik(excesses: np.ndarray, sigma: float, xi: float) -> float:
    """Log-likelihood of GPD excesses over the threshold"""
    excesses = np.asarray(excesses, dtype=float)
    if sigma <= 0:
        return -np.inf
    if abs(xi) < XI_ZERO:
        return float(-len(excesses) * np.log(sigma) - np.sum(excesses) / sigma)
    return float(np.sum(genpareto.logpdf(excesses, c=xi, scale=sigma)))


def pwm_start(excesses: np.ndarray) -> np.ndarray:
    """Probability-weighted-moment estimate as (log sigma, xi)"""
    y = np.sort(excesses)
    n = len(y)
    a0 = y.mean()
    a1 = np.mean(y * (n - np.arange(1, n + 1)) / (n - 1))
    denom = a0 - 2 * a1
    if denom <= 0:
        return np.array([np.log(a0), 0.1])
    sigma = 2 * a0 * a1 / denom
    xi = -(a0 / denom - 2)
    return np.array([np.log(sigma), float(np.clip(xi, -0.45, 0.9))])


class GpdService:
    def __init__(self, min_exceedances: int = 30, n_restarts: int = 5):
        self.min_exceedances = min_exceedances
        self.n_restarts = n_restarts

    def fit_gpd(self, sample: Sequence[float], quantile_level: float, min_exceedances: int = None,
                seed: int = 0) -> GpdFit:
        """Maximum-likelihood GPD fit to the excesses over the empirical quantile_level quantile"""
        sample = np.asarray(sample, dtype=float)
        if not 0 < quantile_level < 1:
            raise DataValidationError(f"quantile level {quantile_level} outside (0, 1)")
        if not np.all(np.isfinite(sample)):
            raise DataValidationError("sample contains non-finite values")
        floor = min_exceedances or self.min_exceedances

        threshold = empirical_quantile(sample, quantile_level)
        excesses = sample[sample > threshold] - threshold
        if len(excesses) < floor:
            raise DataValidationError(
                f"too few exceedances: {len(excesses)} above the {quantile_level} quantile, need {floor}"
            )

        result, objective, spread = self._maximize(excesses, seed, self.n_restarts, f"GPD fit at level {quantile_level}")
        log_sigma, xi = result.x

        flags = []
        cov = covariance_from_hessian(compute_hessian(objective, result.x, eps=1e-5), label="GPD fit")
        if np.any(np.isnan(cov)):
            flags.append(NO_STANDARD_ERRORS)
        sigma = float(np.exp(log_sigma) * spread)
        se_sigma = float(sigma * np.sqrt(cov[0, 0])) if cov[0, 0] >= 0 else float('nan')
        se_xi = float(np.sqrt(cov[1, 1])) if cov[1, 1] >= 0 else float('nan')

        if xi <= -0.5:
            flags.append(UNRELIABLE_MLE)
            logging.warning(f"GPD shape {xi:.4f} at level {quantile_level} is in the unreliable MLE regime")

        fit = GpdFit(
            threshold=threshold,
            quantile_level=quantile_level,
            sigma=sigma,
            xi=float(xi),
            n_exceed=len(excesses),
            n_total=len(sample),
            loglik=float(-result.fun - len(excesses) * np.log(spread)),
            se_sigma=se_sigma,
            se_xi=se_xi,
            flags=tuple(flags),
        )
        logging.info(f"GPD fit at level {quantile_level}: u={threshold:.6g} sigma={sigma:.6g} xi={xi:.4f} "
                     f"k={len(excesses)}")
        return fit

    def _maximize(self, excesses: np.ndarray, seed: int, n_starts: int, label: str):
        """Simplex search on (log sigma, xi) for excesses divided by their spread.

        Dividing by the spread makes the fit invariant to affine maps of the data.
        """
        spread = excesses.std()
        if spread <= 0:
            raise DataValidationError("excesses are all identical")
        z = excesses / spread

        def objective(theta):
            return -gpd_loglik(z, np.exp(theta[0]), theta[1])

        start = pwm_start(z)
        rng = SimRandom(seed, stream=1)
        starts = [start] + [start + rng.normal(2) * np.array([0.2, 0.1]) for _ in range(n_starts - 1)]
        return minimize_with_restarts(objective, starts, label=label), objective, spread

    def fit_excesses(self, excesses: Sequence[float], seed: int = 0, n_starts: int = 2) -> Tuple[float, float, float]:
        """(sigma, xi, loglik) of a GPD fitted to raw excesses, without standard errors"""
        excesses = np.asarray(excesses, dtype=float)
        result, _, spread = self._maximize(excesses, seed, n_starts, "GPD excess fit")
        return float(np.exp(result.x[0]) * spread), float(result.x[1]), float(-result.fun - len(excesses) * np.log(spread))

    def fit_gpd_grid(self, sample: Sequence[float], levels: Sequence[float], seed: int = 0) -> List[Dict[str, Any]]:
        """Marginal quantile search; a failed level is recorded instead of raised"""
        results = []
        for level in levels:
            try:
                results.append({'level': level, 'success': True, 'fit': self.fit_gpd(sample, level, seed=seed)})
            except TailDepError as e:
                logging.warning(f"GPD fit failed at level {level}: {str(e)}")
                results.append({'level': level, 'success': False, 'error': str(e)})
        return results

    def grid_table(self, market_id: str, results: List[Dict[str, Any]]) -> pd.DataFrame:
        rows = []
        for item in results:
            row = {'market': market_id, 'level': item['level']}
            if item['success']:
                fit = item['fit']
                row.update(threshold=fit.threshold, sigma=fit.sigma, se_sigma=fit.se_sigma, xi=fit.xi,
                           se_xi=fit.se_xi, n_exceed=fit.n_exceed, loglik=fit.loglik, flags=";".join(fit.flags),
                           error="")
            else:
                row.update(error=item['error'])
            rows.append(row)
        return pd.DataFrame(rows)

    def gpd_cdf(self, fit: GpdFit, x, strict: bool = True) -> np.ndarray:
        """G(x) = 1 - (1 + xi (x - u) / sigma)^(-1/xi); exponential limit for |xi| < 1e-8"""
        x = np.asarray(x, dtype=float)
        z = (x - fit.threshold) / fit.sigma
        if strict:
            if np.any(z < 0):
                raise DataValidationError("x below the GPD threshold")
            if fit.xi < 0 and np.any(x > fit.upper_endpoint):
                raise DataValidationError("x outside the GPD support")
        z = np.maximum(z, 0.0)
        if abs(fit.xi) < XI_ZERO:
            return -np.expm1(-z)
        arg = np.maximum(1 + fit.xi * z, 0.0)
        with np.errstate(divide='ignore'):
            return np.where(arg > 0, -np.expm1(-np.log(arg) / fit.xi), 1.0)

    def gpd_quantile(self, fit: GpdFit, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if np.any((p < 0) | (p >= 1)):
            raise DataValidationError("p must lie in [0, 1)")
        if abs(fit.xi) < XI_ZERO:
            return fit.threshold - fit.sigma * np.log1p(-p)
        return fit.threshold + fit.sigma * np.expm1(-fit.xi * np.log1p(-p)) / fit.xi

    def gpd_density(self, fit: GpdFit, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        z = (x - fit.threshold) / fit.sigma
        if abs(fit.xi) < XI_ZERO:
            dens = np.exp(-z) / fit.sigma
        else:
            dens = genpareto.pdf(z, c=fit.xi) / fit.sigma
        return np.where(z >= 0, dens, 0.0)

    def return_level(self, fit: GpdFit, period_years, observations_per_year: int = 260) -> np.ndarray:
        """Level exceeded on average once per period: u + sigma/xi ((m zeta)^xi - 1), m in observations"""
        m_zeta = np.asarray(period_years, dtype=float) * observations_per_year * fit.exceedance_rate
        if np.any(m_zeta <= 1):
            raise DataValidationError("return period shorter than the mean waiting time between exceedances")
        if abs(fit.xi) < XI_ZERO:
            return fit.threshold + fit.sigma * np.log(m_zeta)
        return fit.threshold + fit.sigma * np.expm1(fit.xi * np.log(m_zeta)) / fit.xi

    def gpd_diagnostics(self, fit: GpdFit, sample: Sequence[float], n_bins: int = 20,
                        observations_per_year: int = 260) -> Dict[str, pd.DataFrame]:
        """Probability, quantile, return-level and histogram plot data for a fitted tail"""
        sample = np.asarray(sample, dtype=float)
        exceed = np.sort(sample[sample > fit.threshold])
        k = len(exceed)
        if k < n_bins:
            raise DataValidationError(f"{n_bins} histogram bins requested for {k} exceedances")
        positions = np.arange(1, k + 1) / (k + 1)

        model_levels = self.gpd_cdf(fit, exceed, strict=False)
        model_quantiles = self.gpd_quantile(fit, positions)

        # Empirical return periods of the ordered exceedances, in years
        periods = 1.0 / ((1 - positions) * fit.exceedance_rate * observations_per_year)
        levels = self.return_level(fit, periods, observations_per_year)

        density, edges = np.histogram(exceed, bins=n_bins, density=True)
        centres = 0.5 * (edges[:-1] + edges[1:])

        return {
            'pp': pd.DataFrame({'x': positions, 'y': model_levels}),
            'qq': pd.DataFrame({'x': model_quantiles, 'y': exceed}),
            'return_level': pd.DataFrame({'x': periods, 'y': levels, 'empirical': exceed}),
            'histogram': pd.DataFrame({'x': centres, 'y': density, 'model': self.gpd_density(fit, centres)}),
        }

    def write_diagnostics(self, bundle: Dict[str, pd.DataFrame], out_dir: str, market_id: str) -> List[str]:
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        for name, frame in bundle.items():
            path = os.path.join(out_dir, f"{market_id}_{name}.csv")
            frame.to_csv(path, index=False, float_format='%.10g')
            paths.append(path)
        return paths


gpd_service = GpdService()
