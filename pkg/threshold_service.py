"""Kernel-density bulk with GPD tail: an objective threshold estimate with a standard error."""
import logging
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import statsmodels.api as sm
from scipy import special
from scipy.optimize import minimize_scalar

from app import run_parallel
from exceptions import ConvergenceFailure, DataValidationError, TailDepError
from gpd_service import empirical_quantile, gpd_loglik, gpd_service
from models import GpdFit, MixtureFit, TailMode

MIN_SAMPLE = 200
BAND = (0.5, 0.99)
N_CANDIDATES = 50
MIN_TAIL_POINTS = 10
FFT_GRIDSIZE = 2 ** 14
# Relative tolerance of the golden-section refinement on the level scale
GOLDEN_XTOL = 1e-4
PHI_ZERO = 1.0 / np.sqrt(2 * np.pi)
BAND_EDGE = "threshold at band edge"
FLAT_PROFILE = "flat profile likelihood"


def _fft_kde(sample: np.ndarray, bandwidth: float) -> sm.nonparametric.KDEUnivariate:
    kde = sm.nonparametric.KDEUnivariate(sample)
    kde.fit(kernel='gau', bw=bandwidth, fft=True, gridsize=FFT_GRIDSIZE)
    return kde


def _kde_pdf(sample: np.ndarray, bandwidth: float, x) -> np.ndarray:
    """Gaussian-kernel density from the FFT-binned estimate, zero off its support"""
    kde = _fft_kde(sample, bandwidth)
    density = np.interp(np.atleast_1d(np.asarray(x, dtype=float)), kde.support, kde.density, left=0.0, right=0.0)
    return np.maximum(density, 0.0)


def _kde_cdf(sample: np.ndarray, bandwidth: float, x) -> np.ndarray:
    """H(x | X, gamma) as an exact sum of normal CDFs.

    The binned estimate only carries the density on a grid, and phi_u = 1 - H(u) must hold to rounding.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.empty_like(x)
    step = max(1, 2_000_000 // len(sample))
    for start in range(0, len(x), step):
        out[start:start + step] = np.mean(special.ndtr((x[start:start + step, None] - sample) / bandwidth), axis=1)
    return out


def _loo_log_density(sample: np.ndarray, bandwidth: float, points: np.ndarray) -> np.ndarray:
    """Leave-one-out log density at sample points, from an FFT-binned estimate"""
    n = len(sample)
    full = _kde_pdf(sample, bandwidth, points)
    loo = (n * full - PHI_ZERO / bandwidth) / (n - 1)
    return np.log(np.maximum(loo, 1e-300))


class ThresholdService:
    def __init__(self, n_candidates: int = N_CANDIDATES, band: Tuple[float, float] = BAND):
        self.n_candidates = n_candidates
        self.band = band

    def _check_sample(self, sample) -> np.ndarray:
        sample = np.sort(np.asarray(sample, dtype=float))
        if len(sample) < MIN_SAMPLE:
            raise DataValidationError(f"mixture fit needs at least {MIN_SAMPLE} points, got {len(sample)}")
        if not np.all(np.isfinite(sample)):
            raise DataValidationError("sample contains non-finite values")
        if sample[-1] - sample[0] <= 0:
            raise DataValidationError("constant sample: degenerate kernel bulk")
        return sample

    def _bulk_loglik(self, sample, bandwidth, u, tail_mode, phi_u=None) -> float:
        """Bulk part plus the tail-fraction term; the GPD part is added separately"""
        below = sample[sample <= u]
        k = len(sample) - len(below)
        h_u = float(_kde_cdf(sample, bandwidth, u)[0])
        log_h = _loo_log_density(sample, bandwidth, below)
        if tail_mode == TailMode.BULK_BASED:
            return float(np.sum(log_h) + k * np.log(max(1 - h_u, 1e-300)))
        phi = k / len(sample) if phi_u is None else phi_u
        return float(np.sum(log_h) - len(below) * np.log(h_u) + k * np.log(phi) + len(below) * np.log1p(-phi))

    def mixture_loglik(self, sample: Sequence[float], bandwidth: float, u: float, sigma: float, xi: float,
                       tail_mode: TailMode, phi_u: Optional[float] = None) -> float:
        """Log-likelihood at given parameters; bulk points use the leave-one-out kernel density"""
        sample = np.sort(np.asarray(sample, dtype=float))
        excesses = sample[sample > u] - u
        return self._bulk_loglik(sample, bandwidth, u, tail_mode, phi_u) + gpd_loglik(excesses, sigma, xi)

    def _profile_point(self, sample: np.ndarray, level: float, tail_mode: TailMode, seed: int) -> dict:
        """Maximized likelihood at one threshold: bandwidth search plus a GPD fit to the excesses"""
        u = empirical_quantile(sample, level)
        excesses = sample[sample > u] - u
        if len(excesses) < MIN_TAIL_POINTS:
            return {'level': level, 'u': u, 'loglik': -np.inf}
        try:
            sigma, xi, tail_ll = gpd_service.fit_excesses(excesses, seed=seed)
        except TailDepError as e:
            logging.debug(f"Tail fit failed at level {level}: {str(e)}")
            return {'level': level, 'u': u, 'loglik': -np.inf}

        reference = 1.06 * sample.std() * len(sample) ** -0.2
        res = minimize_scalar(
            lambda log_bw: -self._bulk_loglik(sample, np.exp(log_bw), u, tail_mode),
            bounds=(np.log(reference / 20), np.log(reference * 5)), method='bounded',
            options={'xatol': 1e-4},
        )
        return {'level': level, 'u': u, 'loglik': float(-res.fun + tail_ll), 'bandwidth': float(np.exp(res.x)),
                'sigma': sigma, 'xi': xi}

    def fit_mixture(self, sample: Sequence[float], tail_mode: TailMode = TailMode.BULK_BASED,
                    seed: int = 0) -> MixtureFit:
        """Profile the likelihood over candidate thresholds, then refine between neighbouring candidates"""
        sample = self._check_sample(sample)
        tail_mode = TailMode(tail_mode)
        levels = np.linspace(self.band[0], self.band[1], self.n_candidates)

        profile = run_parallel(lambda level: self._profile_point(sample, float(level), tail_mode, seed), levels)
        lls = np.array([p['loglik'] for p in profile])
        if not np.any(np.isfinite(lls)):
            raise ConvergenceFailure("mixture likelihood is not finite at any candidate threshold")
        best = int(np.nanargmax(np.where(np.isfinite(lls), lls, -np.inf)))

        point = profile[best]
        inner = 0 < best < len(levels) - 1
        if inner and lls[best] > lls[best - 1] and lls[best] > lls[best + 1]:
            # golden-section search inside the bracketing neighbours
            refined = minimize_scalar(lambda lv: -self._profile_point(sample, float(lv), tail_mode, seed)['loglik'],
                                      bracket=(levels[best - 1], levels[best], levels[best + 1]),
                                      method='golden', options={'xtol': GOLDEN_XTOL})
            level = float(np.clip(refined.x, levels[best - 1], levels[best + 1]))
            candidate = self._profile_point(sample, level, tail_mode, seed)
            if candidate['loglik'] >= point['loglik']:
                point = candidate

        flags = []
        step = levels[1] - levels[0]
        if point['level'] <= self.band[0] + step or point['level'] >= self.band[1] - step:
            flags.append(BAND_EDGE)
            logging.warning(f"Mixture threshold at level {point['level']:.4f} sits at the edge of the search band")

        se_u = self._curvature_se(np.array([p['u'] for p in profile]), lls, best)
        if not np.isfinite(se_u):
            flags.append(FLAT_PROFILE)

        u = point['u']
        k = int(np.sum(sample > u))
        if tail_mode == TailMode.BULK_BASED:
            phi_u = 1 - float(_kde_cdf(sample, point['bandwidth'], u)[0])
        else:
            phi_u = k / len(sample)

        fit = MixtureFit(
            bandwidth=point['bandwidth'],
            u=u,
            quantile_level=point['level'],
            sigma_u=point['sigma'],
            xi=point['xi'],
            phi_u=phi_u,
            tail_mode=tail_mode,
            loglik=point['loglik'],
            se_u=se_u,
            sample=sample,
            profile=tuple((p['level'], p['loglik']) for p in profile),
            flags=tuple(flags),
        )
        logging.info(f"Mixture threshold u={u:.6g} (level {point['level']:.4f}, se {se_u:.4g}) "
                     f"bandwidth={fit.bandwidth:.4g} xi={fit.xi:.4f}")
        return fit

    def _curvature_se(self, us: np.ndarray, lls: np.ndarray, best: int, half_width: int = 3) -> float:
        """Standard error from a parabola fitted to the profile around its maximum"""
        window = slice(max(best - half_width, 0), min(best + half_width + 1, len(us)))
        x, y = us[window], lls[window]
        keep = np.isfinite(y)
        if keep.sum() < 3:
            return float('nan')
        curvature = np.polyfit(x[keep], y[keep], 2)[0]
        return float(np.sqrt(-1 / (2 * curvature))) if curvature < 0 else float('nan')

    def _tail_fit(self, fit: MixtureFit) -> GpdFit:
        return GpdFit(threshold=fit.u, quantile_level=min(max(fit.quantile_level, 1e-9), 1 - 1e-9),
                      sigma=fit.sigma_u, xi=fit.xi, n_exceed=max(int(np.sum(fit.sample > fit.u)), 1),
                      n_total=len(fit.sample), loglik=fit.loglik, se_sigma=float('nan'), se_xi=float('nan'))

    def _bulk_scale(self, fit: MixtureFit) -> float:
        if fit.tail_mode == TailMode.BULK_BASED:
            return 1.0
        return (1 - fit.phi_u) / float(_kde_cdf(fit.sample, fit.bandwidth, fit.u)[0])

    def mixture_cdf(self, fit: MixtureFit, x) -> np.ndarray:
        """Kernel bulk below u, (1 - phi_u) + phi_u G above"""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        bulk = self._bulk_scale(fit) * _kde_cdf(fit.sample, fit.bandwidth, np.minimum(x, fit.u))
        tail = (1 - fit.phi_u) + fit.phi_u * gpd_service.gpd_cdf(self._tail_fit(fit), np.maximum(x, fit.u),
                                                                  strict=False)
        return np.where(x < fit.u, bulk, tail)

    def mixture_density(self, fit: MixtureFit, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        bulk = self._bulk_scale(fit) * _kde_pdf(fit.sample, fit.bandwidth, x)
        tail = fit.phi_u * gpd_service.gpd_density(self._tail_fit(fit), x)
        return np.where(x < fit.u, bulk, tail)

    def suggest_threshold(self, sample: Sequence[float], tail_mode: TailMode = TailMode.BULK_BASED,
                          seed: int = 0) -> Tuple[float, float]:
        """Quantile level of the fitted threshold and its standard error on the level scale"""
        fit = self.fit_mixture(sample, tail_mode, seed)
        density_at_u = float(self.mixture_density(fit, [fit.u])[0])
        return fit.quantile_level, fit.se_u * density_at_u

    def profile_trace(self, fit: MixtureFit) -> pd.DataFrame:
        return pd.DataFrame(list(fit.profile), columns=['quantile_level', 'loglik'])

    def summary_row(self, market_id: str, fit: MixtureFit) -> dict:
        return {'market': market_id, 'tail_mode': fit.tail_mode.value, 'quantile_level': fit.quantile_level,
                'u': fit.u, 'se_u': fit.se_u, 'bandwidth': fit.bandwidth, 'sigma_u': fit.sigma_u, 'xi': fit.xi,
                'phi_u': fit.phi_u, 'loglik': fit.loglik, 'flags': ";".join(fit.flags)}


threshold_service = ThresholdService()
