import enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from exceptions import DataValidationError


def _readonly(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


# Enums for the model fields
class TailMode(enum.Enum):
    BULK_BASED = "bulk_based"
    PARAMETERISED = "parameterised"


class MarginScale(enum.Enum):
    LAPLACE = "laplace"
    FRECHET = "frechet"


class FamilyTag(enum.Enum):
    LOGISTIC = "logistic"
    NEG_LOGISTIC = "neg_logistic"
    HUSLER_REISS = "husler_reiss"
    BILOGISTIC = "bilogistic"
    NEG_BILOGISTIC = "neg_bilogistic"
    COLES_TAWN = "coles_tawn"


# Enum order doubles as the final tie-break in family ranking
FAMILY_ORDER = list(FamilyTag)

FAMILY_PARAM_COUNT = {
    FamilyTag.LOGISTIC: 1,
    FamilyTag.NEG_LOGISTIC: 1,
    FamilyTag.HUSLER_REISS: 1,
    FamilyTag.BILOGISTIC: 2,
    FamilyTag.NEG_BILOGISTIC: 2,
    FamilyTag.COLES_TAWN: 2,
}


class SimGenerator(enum.Enum):
    GPD = "gpd"
    BVEVD = "bvevd"
    GAUSS_COPULA = "gauss_copula"
    SPLICED = "spliced"
    DEMO = "demo"


class ArrayModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)


# Market data
class PriceSeries(ArrayModel):
    market_id: str = Field(..., min_length=1)
    dates: np.ndarray
    prices: np.ndarray

    @field_validator('dates', mode='before')
    @classmethod
    def _coerce_dates(cls, v):
        return _readonly(np.asarray(v, dtype='datetime64[D]'), dtype='datetime64[D]')

    @field_validator('prices', mode='before')
    @classmethod
    def _coerce_prices(cls, v):
        return _readonly(v)

    @model_validator(mode='after')
    def _check(self):
        if len(self.prices) == 0:
            raise DataValidationError(f"empty series for market {self.market_id}")
        if len(self.dates) != len(self.prices):
            raise DataValidationError(f"dates and prices differ in length for {self.market_id}")
        if np.any(np.diff(self.dates).astype(int) <= 0):
            raise DataValidationError(f"non-monotone dates for market {self.market_id}")
        if not np.all(np.isfinite(self.prices)) or np.any(self.prices <= 0):
            raise DataValidationError(f"non-positive price in market {self.market_id}")
        return self


class ReturnSeries(ArrayModel):
    market_id: str
    dates: np.ndarray
    returns: np.ndarray

    @field_validator('dates', mode='before')
    @classmethod
    def _coerce_dates(cls, v):
        return _readonly(np.asarray(v, dtype='datetime64[D]'), dtype='datetime64[D]')

    @field_validator('returns', mode='before')
    @classmethod
    def _coerce_returns(cls, v):
        return _readonly(v)

    @model_validator(mode='after')
    def _check(self):
        if len(self.dates) != len(self.returns):
            raise DataValidationError(f"dates and returns differ in length for {self.market_id}")
        return self


class ReturnPanel(ArrayModel):
    """Aligned multi-market matrix, one column per market"""
    market_ids: List[str]
    dates: np.ndarray
    returns: np.ndarray
    scale: Optional[str] = None

    @field_validator('dates', mode='before')
    @classmethod
    def _coerce_dates(cls, v):
        return _readonly(np.asarray(v, dtype='datetime64[D]'), dtype='datetime64[D]')

    @field_validator('returns', mode='before')
    @classmethod
    def _coerce_returns(cls, v):
        return _readonly(np.atleast_2d(np.asarray(v, dtype=float)))

    @model_validator(mode='after')
    def _check(self):
        n_rows, n_cols = self.returns.shape
        if n_cols != len(self.market_ids):
            raise DataValidationError("column count does not match market labels")
        if n_rows != len(self.dates):
            raise DataValidationError("row count does not match date count")
        if len(set(self.market_ids)) != len(self.market_ids):
            raise DataValidationError("duplicate market labels")
        if not np.all(np.isfinite(self.returns)):
            raise DataValidationError("panel contains missing cells")
        return self

    @property
    def n_rows(self) -> int:
        return self.returns.shape[0]

    def column(self, market_id: str) -> np.ndarray:
        if market_id not in self.market_ids:
            raise DataValidationError(f"unknown market '{market_id}'")
        return self.returns[:, self.market_ids.index(market_id)]

    def to_series(self) -> List[ReturnSeries]:
        return [
            ReturnSeries(market_id=m, dates=self.dates, returns=self.returns[:, i])
            for i, m in enumerate(self.market_ids)
        ]


# Marginal models
class GpdFit(ArrayModel):
    threshold: float
    quantile_level: float = Field(..., gt=0, lt=1)
    sigma: float = Field(..., gt=0)
    xi: float
    n_exceed: int = Field(..., ge=1)
    n_total: int = Field(..., ge=1)
    loglik: float
    se_sigma: float
    se_xi: float
    flags: Tuple[str, ...] = ()

    @property
    def exceedance_rate(self) -> float:
        return self.n_exceed / self.n_total

    @property
    def upper_endpoint(self) -> float:
        return self.threshold - self.sigma / self.xi if self.xi < 0 else np.inf


class MixtureFit(ArrayModel):
    bandwidth: float = Field(..., gt=0)
    u: float
    quantile_level: float
    sigma_u: float = Field(..., gt=0)
    xi: float
    phi_u: float = Field(..., gt=0, lt=1)
    tail_mode: TailMode
    loglik: float
    se_u: float
    sample: np.ndarray
    profile: Tuple[Tuple[float, float], ...] = ()
    flags: Tuple[str, ...] = ()

    @field_validator('sample', mode='before')
    @classmethod
    def _sorted_sample(cls, v):
        return _readonly(np.sort(np.asarray(v, dtype=float)))


class MarginTransform(ArrayModel):
    sample: np.ndarray
    gpd: GpdFit
    target: MarginScale

    @field_validator('sample', mode='before')
    @classmethod
    def _sorted_sample(cls, v):
        return _readonly(np.sort(np.asarray(v, dtype=float)))


# Conditional extremes
class HtTargetFit(BaseModel):
    model_config = ConfigDict(frozen=True)

    target: str
    a: float = Field(..., ge=-1, le=1)
    b: float = Field(..., lt=1)
    mu: float
    sigma: float = Field(..., gt=0)
    loglik: float
    flags: Tuple[str, ...] = ()


class HtFit(ArrayModel):
    conditioning_index: str
    dep_quantile: float = Field(..., gt=0.5, lt=1)
    threshold: float
    targets: List[str]
    params: Dict[str, HtTargetFit]
    conditioning_values: np.ndarray
    target_values: np.ndarray
    residuals: np.ndarray

    @field_validator('conditioning_values', mode='before')
    @classmethod
    def _coerce_values(cls, v):
        return _readonly(v)

    @field_validator('target_values', 'residuals', mode='before')
    @classmethod
    def _coerce_matrix(cls, v):
        return _readonly(np.asarray(v, dtype=float).reshape(len(v), -1))

    @model_validator(mode='after')
    def _check(self):
        n = len(self.conditioning_values)
        if self.residuals.shape != (n, len(self.targets)):
            raise DataValidationError("residual rows must match conditioning exceedances for every target")
        if set(self.params) != set(self.targets):
            raise DataValidationError("parameters missing for some targets")
        return self

    @property
    def n_cond_exceed(self) -> int:
        return len(self.conditioning_values)

    def residual_column(self, target: str) -> np.ndarray:
        return self.residuals[:, self.targets.index(target)]


class PredictionResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    conditioning_index: str
    pred_quantile: float = Field(0.9, gt=0, lt=1)
    target_quantile: float = Field(..., gt=0, lt=1)
    probabilities: Dict[str, float]
    conditional_quantiles: Dict[str, Dict[str, float]] = {}
    n_importance: int = Field(..., gt=0)
    seed: int

    @field_validator('probabilities')
    @classmethod
    def _check_probabilities(cls, v):
        if any(not 0.0 <= p <= 1.0 for p in v.values()):
            raise DataValidationError("probabilities must lie in [0, 1]")
        return v


# Bivariate point process
class DependenceFamily(BaseModel):
    model_config = ConfigDict(frozen=True)

    tag: FamilyTag
    params: Tuple[float, ...]

    @model_validator(mode='after')
    def _check_domain(self):
        k = FAMILY_PARAM_COUNT[self.tag]
        if len(self.params) != k:
            raise DataValidationError(f"{self.tag.value} takes {k} parameter(s), got {len(self.params)}")
        p = np.asarray(self.params)
        if not np.all(np.isfinite(p)):
            raise DataValidationError(f"{self.tag.value} parameters must be finite")
        if self.tag == FamilyTag.LOGISTIC:
            ok = 0 < p[0] <= 1
        elif self.tag == FamilyTag.BILOGISTIC:
            ok = np.all((p > 0) & (p < 1))
        else:
            ok = np.all(p > 0)
        if not ok:
            raise DataValidationError(f"{self.tag.value} parameters {self.params} out of domain")
        return self

    @property
    def alpha(self) -> float:
        return self.params[0]

    @property
    def beta(self) -> Optional[float]:
        return self.params[1] if len(self.params) > 1 else None


class PpFit(ArrayModel):
    family: DependenceFamily
    loglik: float
    loglik_theta: float
    aic: float
    se: Tuple[float, ...]
    n_points: int = Field(..., ge=1)
    n_total: int
    r0: float = Field(..., gt=0)
    quantile_level: float
    points_r: np.ndarray
    points_w: np.ndarray
    flags: Tuple[str, ...] = ()

    @field_validator('points_r', 'points_w', mode='before')
    @classmethod
    def _coerce_points(cls, v):
        return _readonly(v)

    @model_validator(mode='after')
    def _check(self):
        if len(self.points_r) != self.n_points or len(self.points_w) != self.n_points:
            raise DataValidationError("n_points must equal the number of stored points")
        if np.any(self.points_r <= self.r0):
            raise DataValidationError("every stored point must lie beyond the radial threshold")
        if np.any((self.points_w <= 0) | (self.points_w >= 1)):
            raise DataValidationError("angular components must lie in (0, 1)")
        k = len(self.family.params)
        if not np.isclose(self.aic, 2 * k - 2 * self.loglik, rtol=0, atol=1e-8):
            raise DataValidationError("aic must equal 2k - 2 loglik")
        return self

    @property
    def n_params(self) -> int:
        return len(self.family.params)


class FamilySelection(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    pair: Tuple[str, str]
    fits: List[PpFit]
    failures: Dict[str, str] = {}

    @property
    def best(self) -> PpFit:
        return self.fits[0]


class ComparisonRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    pair: Tuple[str, str]
    cmev_label: str
    pp_label: str
    agreement: str


class ModelComparison(BaseModel):
    model_config = ConfigDict(frozen=True)

    rows: List[ComparisonRow]
    agree: int
    near: int
    disagree: int
    panels: List[Tuple[str, str, int]]


# Simulation
class SimConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    seed: int = Field(..., ge=0)
    n: int = Field(..., gt=0)
    generator: SimGenerator
    params: Dict[str, str] = {}


# Pipeline
DEFAULT_MARKETS = ["IBOV", "IMOEX", "NIFTY", "SHCOMP", "JALSH"]


class PipelineConfig(BaseModel):
    """Every knob of the end-to-end run; validated on construction"""
    model_config = ConfigDict(frozen=True)

    input_path: Optional[str] = Field(None, description="Price file; None uses the bundled demo simulator")
    delimiter: str = ","
    return_scale: float = Field(1.0, gt=0, description="Multiplier applied to log returns")
    marginal_grid: Tuple[float, ...] = (0.70, 0.75, 0.80, 0.85, 0.90, 0.95)
    marginal_default: float = 0.70
    marginal_overrides: Dict[str, float] = {}
    dependence_quantile: float = 0.70
    dependence_grid: Tuple[float, ...] = (0.70, 0.75, 0.80, 0.85, 0.90, 0.95)
    prediction_quantile: float = 0.90
    prediction_grid: Tuple[float, ...] = (0.80, 0.90, 0.95, 0.99)
    target_quantile: Optional[float] = Field(None, description="Threshold targets must exceed; defaults to the dependence quantile")
    n_importance: int = Field(100_000, gt=0)
    pp_quantile: float = 0.70
    hr_bands: Tuple[float, float, float] = (1.0, 1.32, 1.6)
    min_gpd_exceedances: int = Field(30, ge=1)
    min_ht_exceedances: int = Field(50, ge=1)
    min_pp_points: int = Field(30, ge=1)
    n_restarts: int = Field(5, ge=1)
    histogram_bins: int = Field(20, ge=1)
    observations_per_year: int = Field(260, gt=0)
    seed: int = Field(20100105, ge=0)
    output_dir: str = "output"

    @model_validator(mode='after')
    def _check_quantiles(self):
        levels = list(self.marginal_grid) + list(self.dependence_grid) + list(self.prediction_grid)
        levels += [self.marginal_default, self.dependence_quantile, self.prediction_quantile, self.pp_quantile]
        levels += list(self.marginal_overrides.values())
        if self.target_quantile is not None:
            levels.append(self.target_quantile)
        if any(not 0 < q < 1 for q in levels):
            raise DataValidationError("all quantile levels must lie in (0, 1)")
        if self.dependence_quantile <= 0.5:
            raise DataValidationError("dependence quantile must exceed 0.5 (positive Laplace threshold)")
        if self.prediction_quantile < self.dependence_quantile:
            raise DataValidationError(
                f"prediction quantile {self.prediction_quantile} is below dependence quantile {self.dependence_quantile}"
            )
        if not self.hr_bands[0] < self.hr_bands[1] < self.hr_bands[2]:
            raise DataValidationError("hr_bands must be strictly increasing")
        return self

    def marginal_level(self, market_id: str) -> float:
        return self.marginal_overrides.get(market_id, self.marginal_default)

    @property
    def effective_target_quantile(self) -> float:
        return self.target_quantile if self.target_quantile is not None else self.dependence_quantile
