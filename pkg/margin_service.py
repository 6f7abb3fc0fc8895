import logging
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from app import run_parallel
from exceptions import DataValidationError
from gpd_service import XI_ZERO, gpd_service
from models import GpdFit, MarginScale, MarginTransform, ReturnPanel

TINY = np.finfo(float).tiny
# Order statistics used to set the decay of the lower extension below the sample minimum
LOWER_SPACING_POINTS = 10


def _bulk_grid(sample: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Distinct sample values and their averaged-rank plotting positions rank/(n+1)"""
    ranks = rankdata(sample, method='average')
    values, first = np.unique(sample, return_index=True)
    return values, ranks[first] / (len(sample) + 1)


def _lower_spacing(sample: np.ndarray) -> float:
    low = sample[:min(LOWER_SPACING_POINTS, len(sample))]
    spacing = (low[-1] - low[0]) / max(len(low) - 1, 1)
    return spacing if spacing > 0 else max(float(sample.std()), 1.0)


class MarginService:
    """Empirical bulk below the GPD threshold, fitted GPD tail above it"""

    def build_margin(self, sample: Sequence[float], quantile_level: float,
                     target: MarginScale = MarginScale.LAPLACE, gpd: Optional[GpdFit] = None,
                     seed: int = 0) -> MarginTransform:
        fit = gpd or gpd_service.fit_gpd(sample, quantile_level, seed=seed)
        if abs(fit.quantile_level - quantile_level) > 1e-12:
            raise DataValidationError("GPD fit was made at a different quantile level")
        return MarginTransform(sample=sample, gpd=fit, target=target)

    def _log_pair(self, t: MarginTransform, x) -> Tuple[np.ndarray, np.ndarray]:
        """(log p, log(1 - p)), each side computed without cancellation or underflow"""
        x = np.asarray(x, dtype=float)
        fit = t.gpd
        q = fit.quantile_level
        values, positions = _bulk_grid(t.sample)
        at_u = float(np.interp(fit.threshold, values, positions))

        bulk = q * np.interp(x, values, positions) / at_u
        log_bulk = np.log(bulk)
        below_min = x < values[0]
        if np.any(below_min):
            log_p_min = np.log(q * positions[0] / at_u)
            log_bulk = np.where(below_min, log_p_min + (x - values[0]) / _lower_spacing(t.sample), log_bulk)
            bulk = np.exp(log_bulk)

        z = np.maximum((x - fit.threshold) / fit.sigma, 0.0)
        if abs(fit.xi) < XI_ZERO:
            log_tail_surv = -z
        else:
            arg = np.maximum(1 + fit.xi * z, 0.0)
            with np.errstate(divide='ignore'):
                log_tail_surv = -np.log(arg) / fit.xi
        log_surv = np.maximum(np.log(1 - q) + log_tail_surv, np.log(TINY))

        in_tail = x >= fit.threshold
        log_p = np.where(in_tail, np.log1p(-np.exp(log_surv)), log_bulk)
        with np.errstate(invalid='ignore', divide='ignore'):
            log_bulk_surv = np.log1p(-bulk)
        return log_p, np.where(in_tail, log_surv, log_bulk_surv)

    def _cdf_pair(self, t: MarginTransform, x) -> Tuple[np.ndarray, np.ndarray]:
        """(p, 1 - p), both kept at or above the smallest positive float"""
        log_p, log_surv = self._log_pair(t, x)
        return np.maximum(np.exp(log_p), TINY), np.maximum(np.exp(log_surv), TINY)

    def _quantile_pair(self, t: MarginTransform, log_p, log_surv) -> np.ndarray:
        """Inverse of the semiparametric CDF given log p and log(1 - p)"""
        log_p = np.asarray(log_p, dtype=float)
        log_surv = np.asarray(log_surv, dtype=float)
        fit = t.gpd
        q = fit.quantile_level
        values, positions = _bulk_grid(t.sample)
        at_u = float(np.interp(fit.threshold, values, positions))
        log_p_min = np.log(q * positions[0] / at_u)

        bulk = np.interp(np.exp(log_p) * at_u / q, positions, values)
        lower = values[0] + _lower_spacing(t.sample) * (log_p - log_p_min)
        log_tail_surv = log_surv - np.log(1 - q)
        if abs(fit.xi) < XI_ZERO:
            tail = fit.threshold - fit.sigma * log_tail_surv
        else:
            tail = fit.threshold + fit.sigma * np.expm1(-fit.xi * log_tail_surv) / fit.xi
        return np.where(log_tail_surv <= 0, tail, np.where(log_p < log_p_min, lower, bulk))

    def semiparametric_cdf(self, t: MarginTransform, x) -> np.ndarray:
        return self._cdf_pair(t, x)[0]

    def semiparametric_quantile(self, t: MarginTransform, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if np.any((p <= 0) | (p >= 1)):
            raise DataValidationError("p must lie in (0, 1)")
        return self._quantile_pair(t, np.log(p), np.log1p(-p))

    def to_laplace(self, t: MarginTransform, x) -> np.ndarray:
        """y = log(2p) for p <= 1/2, -log(2(1 - p)) above"""
        log_p, log_surv = self._log_pair(t, x)
        return np.where(log_p <= -np.log(2), np.log(2) + log_p, -np.log(2) - log_surv)

    def from_laplace(self, t: MarginTransform, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        lower = np.minimum(y, 0)
        upper = np.maximum(y, 0)
        log_p = np.where(y <= 0, np.log(0.5) + lower, np.log1p(-0.5 * np.exp(-upper)))
        log_surv = np.where(y <= 0, np.log1p(-0.5 * np.exp(lower)), np.log(0.5) - upper)
        return self._quantile_pair(t, log_p, log_surv)

    def to_frechet(self, t: MarginTransform, x) -> np.ndarray:
        """z = -1 / log p"""
        log_p, log_surv = self._log_pair(t, x)
        return -1 / np.minimum(log_p, -TINY)

    def from_frechet(self, t: MarginTransform, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if np.any(z <= 0):
            raise DataValidationError("Fréchet values must be positive")
        return self._quantile_pair(t, -1 / z, np.log(-np.expm1(-1 / z)))


    def forward(self, t: MarginTransform, x, target: MarginScale) -> np.ndarray:
        return self.to_laplace(t, x) if target == MarginScale.LAPLACE else self.to_frechet(t, x)

    def inverse(self, t: MarginTransform, y, scale: MarginScale) -> np.ndarray:
        return self.from_laplace(t, y) if scale == MarginScale.LAPLACE else self.from_frechet(t, y)

    def fit_panel_margins(self, panel: ReturnPanel, levels: Dict[str, float], seed: int = 0,
                          target: MarginScale = MarginScale.LAPLACE) -> Dict[str, MarginTransform]:
        """One margin per market, fitted on the worker pool"""
        def fit_one(market_id):
            return self.build_margin(panel.column(market_id), levels[market_id], target, seed=seed)

        fitted = run_parallel(fit_one, panel.market_ids)
        return dict(zip(panel.market_ids, fitted))

    def transform_panel(self, panel: ReturnPanel, margins: Dict[str, MarginTransform],
                        target: MarginScale) -> ReturnPanel:
        missing = [m for m in panel.market_ids if m not in margins]
        if missing:
            raise DataValidationError(f"no margin fitted for {missing}")
        columns = [self.forward(margins[m], panel.column(m), target) for m in panel.market_ids]
        logging.info(f"Transformed {len(columns)} markets to the {target.value} scale")
        return ReturnPanel(market_ids=panel.market_ids, dates=panel.dates,
                           returns=np.column_stack(columns), scale=target.value)

    def back_transform_panel(self, panel: ReturnPanel, margins: Dict[str, MarginTransform]) -> ReturnPanel:
        if panel.scale not in {s.value for s in MarginScale}:
            raise DataValidationError(f"panel scale '{panel.scale}' cannot be back-transformed")
        scale = MarginScale(panel.scale)
        columns = [self.inverse(margins[m], panel.column(m), scale) for m in panel.market_ids]
        return ReturnPanel(market_ids=panel.market_ids, dates=panel.dates, returns=np.column_stack(columns))

    def margins_to_dict(self, margins: Dict[str, MarginTransform]) -> Dict[str, Any]:
        return {
            market_id: {
                'target': t.target.value,
                'gpd': t.gpd.model_dump(),
                'sample': t.sample.tolist(),
            }
            for market_id, t in margins.items()
        }

    def margins_from_dict(self, data: Dict[str, Any]) -> Dict[str, MarginTransform]:
        try:
            return {
                market_id: MarginTransform(sample=item['sample'], gpd=GpdFit(**item['gpd']),
                                           target=MarginScale(item['target']))
                for market_id, item in data.items()
            }
        except (KeyError, TypeError, ValueError) as e:
            raise DataValidationError(f"malformed margin record: {str(e)}")


margin_service = MarginService()
