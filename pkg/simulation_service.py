import configparser
import logging
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import special, stats

from dependence_families import conditional_cdf
from exceptions import ConvergenceFailure, DataIOError, DataValidationError
from market_data_service import market_data_service
from models import (
    DEFAULT_MARKETS, DependenceFamily, FamilyTag, PriceSeries, ReturnPanel, SimConfig, SimGenerator,
)

TWO_POW_53 = float(2 ** 53)

# Demo profile: one fairly dependent pair, most pairs weak
DEMO_START = "2010-01-05"
DEMO_N_PRICES = 2127
DEMO_DAILY_VOL = {"IBOV": 0.018, "IMOEX": 0.020, "NIFTY": 0.012, "SHCOMP": 0.015, "JALSH": 0.012}
DEMO_CORRELATIONS = {
    ("IBOV", "IMOEX"): 0.5,
    ("IBOV", "SHCOMP"): 0.3,
    ("NIFTY", "JALSH"): 0.3,
    ("IMOEX", "SHCOMP"): 0.2,
    ("IBOV", "NIFTY"): 0.05,
    ("IBOV", "JALSH"): 0.05,
}
DEMO_DEFAULT_CORRELATION = 0.1
DEMO_T_DF = 4


class SimRandom:
    """Counter-based random stream (Philox-4x64) keyed by (seed, stream).

    Every variate is derived from the raw 64-bit outputs through fixed formulas,
    so a (seed, stream) pair yields the same numbers across numpy versions.
    """

    def __init__(self, seed: int, stream: int = 0):
        if not 0 <= seed < 2 ** 64 or not 0 <= stream < 2 ** 64:
            raise DataValidationError("seed and stream must be unsigned 64-bit integers")
        self.seed = seed
        self.stream = stream
        self._bitgen = np.random.Philox(key=(stream << 64) | seed)

    def spawn(self, stream: int) -> "SimRandom":
        return SimRandom(self.seed, stream)

    def uniform(self, size) -> np.ndarray:
        """Uniforms on the open interval (0, 1) from the top 53 bits of each raw draw"""
        count = int(np.prod(size))
        raw = self._bitgen.random_raw(count) >> np.uint64(11)
        return ((raw.astype(np.float64) + 0.5) / TWO_POW_53).reshape(size)

    def exponential(self, size) -> np.ndarray:
        return -np.log(self.uniform(size))

    def normal(self, size) -> np.ndarray:
        return special.ndtri(self.uniform(size))

    def integers(self, m: int, size) -> np.ndarray:
        """Indices in [0, m)"""
        return np.minimum(np.floor(self.uniform(size) * m).astype(np.int64), m - 1)


def _check_correlation(corr: np.ndarray) -> np.ndarray:
    corr = np.asarray(corr, dtype=float)
    if corr.ndim != 2 or corr.shape[0] != corr.shape[1]:
        raise DataValidationError("correlation matrix must be square")
    if not np.allclose(corr, corr.T, atol=1e-12):
        raise DataValidationError("correlation matrix must be symmetric")
    try:
        return np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        raise DataValidationError("correlation matrix is not positive definite")


def _gaussian_to_scale(z: np.ndarray, scale: str) -> np.ndarray:
    """Map standard normal draws to the requested margin without rounding p to 1"""
    if scale == "gaussian":
        return z
    if scale == "uniform":
        return special.ndtr(z)
    if scale == "laplace":
        return np.where(z > 0, -(np.log(2) + special.log_ndtr(-z)), np.log(2) + special.log_ndtr(z))
    if scale == "frechet":
        return -1 / special.log_ndtr(z)
    raise DataValidationError(f"unknown margin scale '{scale}'")


class SimulationService:
    def sim_gpd(self, sigma: float, xi: float, n: int, seed: int, stream: int = 0) -> np.ndarray:
        """Inverse-CDF GPD excesses: sigma (U^-xi - 1) / xi"""
        if sigma <= 0:
            raise DataValidationError("sigma must be positive")
        if n <= 0:
            raise DataValidationError("n must be positive")
        log_u = np.log(SimRandom(seed, stream).uniform(n))
        if abs(xi) < 1e-8:
            return -sigma * log_u
        return sigma * np.expm1(-xi * log_u) / xi

    def sim_bvevd(self, family: DependenceFamily, n: int, seed: int, stream: int = 0) -> np.ndarray:
        """n x 2 array of unit-Fréchet pairs with exponent function of the given family"""
        if n <= 0:
            raise DataValidationError("n must be positive")
        rng = SimRandom(seed, stream)
        if family.tag == FamilyTag.LOGISTIC:
            return self._sim_logistic(family.alpha, n, rng)

        x = -1 / np.log(rng.uniform(n))
        target = rng.uniform(n)
        lo = np.full(n, -30.0)
        hi = np.full(n, 45.0)
        if np.any(conditional_cdf(family, x, np.exp(lo)) > target + 1e-12) or \
                np.any(conditional_cdf(family, x, np.exp(hi)) < target - 1e-12):
            raise ConvergenceFailure(f"conditional inversion bracket failed for {family.tag.value}")
        for _ in range(64):
            mid = 0.5 * (lo + hi)
            below = conditional_cdf(family, x, np.exp(mid)) < target
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        if np.max(hi - lo) > 1e-10:
            raise ConvergenceFailure(f"conditional inversion did not converge for {family.tag.value}")
        logging.debug(f"Simulated {n} {family.tag.value} pairs by conditional inversion")
        return np.column_stack([x, np.exp(0.5 * (lo + hi))])

    def _sim_logistic(self, alpha: float, n: int, rng: SimRandom) -> np.ndarray:
        # Positive-stable mixture: X_i = (S / W_i)^alpha with S stable of index alpha
        u = np.pi * rng.uniform(n)
        e = rng.exponential(n)
        w = rng.exponential((n, 2))
        if alpha < 1:
            log_s = (np.log(np.sin(alpha * u)) - np.log(np.sin(u)) / alpha
                     + (1 - alpha) / alpha * (np.log(np.sin((1 - alpha) * u)) - np.log(e)))
        else:
            log_s = np.zeros(n)
        return np.exp(alpha * (log_s[:, None] - np.log(w)))

    def sim_gauss_copula_panel(self, corr, n: int, seed: int, scale: str = "uniform",
                               market_ids: Optional[List[str]] = None, stream: int = 0) -> ReturnPanel:
        """Gaussian-copula panel with margins on the requested scale"""
        chol = _check_correlation(corr)
        d = chol.shape[0]
        market_ids = market_ids or [f"M{i + 1}" for i in range(d)]
        if len(market_ids) != d:
            raise DataValidationError("one market label per correlation row is required")
        z = SimRandom(seed, stream).normal((n, d)) @ chol.T
        dates = pd.bdate_range(DEMO_START, periods=n).to_numpy().astype('datetime64[D]')
        return ReturnPanel(market_ids=market_ids, dates=dates, returns=_gaussian_to_scale(z, scale), scale=scale)

    def sim_spliced(self, n: int, splice_level: float = 0.9, xi: float = 0.3, seed: int = 0,
                    stream: int = 0) -> np.ndarray:
        """Standard normal bulk below its splice_level quantile, GPD tail above, continuous density"""
        if not 0 < splice_level < 1:
            raise DataValidationError("splice level must lie in (0, 1)")
        u = special.ndtri(splice_level)
        sigma = (1 - splice_level) / stats.norm.pdf(u)
        p = SimRandom(seed, stream).uniform(n)
        tail_p = np.clip((p - splice_level) / (1 - splice_level), 0, None)
        if abs(xi) < 1e-8:
            tail = u - sigma * np.log1p(-tail_p)
        else:
            tail = u + sigma * np.expm1(-xi * np.log1p(-tail_p)) / xi
        return np.where(p < splice_level, special.ndtri(p), tail)

    def demo_correlation(self, market_ids: Sequence[str] = DEFAULT_MARKETS) -> np.ndarray:
        d = len(market_ids)
        corr = np.full((d, d), DEMO_DEFAULT_CORRELATION)
        np.fill_diagonal(corr, 1.0)
        for (a, b), rho in DEMO_CORRELATIONS.items():
            i, j = market_ids.index(a), market_ids.index(b)
            corr[i, j] = corr[j, i] = rho
        return corr

    def demo_prices(self, seed: int) -> List[PriceSeries]:
        """Bundled five-market demo: Student-t margins tied by the demo Gaussian copula"""
        markets = list(DEFAULT_MARKETS)
        chol = _check_correlation(self.demo_correlation(markets))
        n_returns = DEMO_N_PRICES - 1
        z = SimRandom(seed).normal((n_returns, len(markets))) @ chol.T
        # Symmetric evaluation keeps the far tails finite
        t_draws = np.where(z > 0, -stats.t.ppf(special.ndtr(-z), DEMO_T_DF), stats.t.ppf(special.ndtr(z), DEMO_T_DF))
        t_scale = np.array([DEMO_DAILY_VOL[m] for m in markets]) / np.sqrt(DEMO_T_DF / (DEMO_T_DF - 2))
        returns = t_draws * t_scale

        dates = pd.bdate_range(DEMO_START, periods=DEMO_N_PRICES).to_numpy().astype('datetime64[D]')
        prices = 1000.0 * np.exp(np.vstack([np.zeros(len(markets)), np.cumsum(returns, axis=0)]))
        logging.info(f"Generated demo prices for {len(markets)} markets, {DEMO_N_PRICES} days, seed {seed}")
        return [PriceSeries(market_id=m, dates=dates, prices=prices[:, i]) for i, m in enumerate(markets)]

    def demo_panel(self, seed: int) -> ReturnPanel:
        series = [market_data_service.log_returns(s) for s in self.demo_prices(seed)]
        return market_data_service.align(series)

    def block_maxima_extremal_coefficient(self, pairs: np.ndarray, block: int = 100) -> float:
        """Estimate V(1, 1) from componentwise block maxima of unit-Fréchet pairs"""
        pairs = np.asarray(pairs, dtype=float)
        n_blocks = len(pairs) // block
        if n_blocks < 1:
            raise DataValidationError("need at least one full block")
        maxima = pairs[:n_blocks * block].reshape(n_blocks, block, 2).max(axis=1) / block
        return float(1.0 / np.mean(1.0 / maxima.max(axis=1)))

    def simulate(self, config: SimConfig) -> Union[np.ndarray, ReturnPanel]:
        """Run the generator a SimConfig names"""
        params = config.params
        try:
            if config.generator == SimGenerator.GPD:
                return self.sim_gpd(float(params.get("sigma", 1.0)), float(params.get("xi", 0.0)),
                                    config.n, config.seed)
            if config.generator == SimGenerator.BVEVD:
                family = DependenceFamily(
                    tag=FamilyTag(params.get("family", "logistic")),
                    params=tuple(float(v) for v in params.get("params", "0.5").split(",")),
                )
                return self.sim_bvevd(family, config.n, config.seed)
            if config.generator == SimGenerator.GAUSS_COPULA:
                rho = float(params.get("rho", 0.5))
                return self.sim_gauss_copula_panel(np.array([[1.0, rho], [rho, 1.0]]), config.n, config.seed,
                                                   scale=params.get("scale", "laplace"))
            if config.generator == SimGenerator.SPLICED:
                return self.sim_spliced(config.n, float(params.get("splice_level", 0.9)),
                                        float(params.get("xi", 0.3)), config.seed)
            return self.demo_panel(config.seed)
        except ValueError as e:
            raise DataValidationError(f"bad simulator parameters {dict(params)}: {str(e)}")

    def write_sim_config(self, config: SimConfig, path: str) -> None:
        parser = configparser.ConfigParser()
        parser["simulation"] = {"seed": str(config.seed), "n": str(config.n), "generator": config.generator.value}
        parser["simulation.params"] = dict(config.params)
        with open(path, "w") as handle:
            parser.write(handle)

    def read_sim_config(self, path: str) -> SimConfig:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise DataIOError(f"cannot read simulation config {path}")
        if "simulation" not in parser:
            raise DataIOError(f"{path} has no [simulation] section")
        section = parser["simulation"]
        params: Dict[str, str] = dict(parser["simulation.params"]) if "simulation.params" in parser else {}
        try:
            return SimConfig(seed=int(section["seed"]), n=int(section["n"]),
                             generator=SimGenerator(section["generator"]), params=params)
        except (KeyError, ValueError) as e:
            raise DataValidationError(f"invalid simulation config {path}: {str(e)}")


simulation_service = SimulationService()
