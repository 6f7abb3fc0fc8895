"""Exponent functions and spectral densities of the six bivariate extreme-value families.

All functions take unit-Fréchet coordinates. V is homogeneous of order -1 and
the spectral density h is normalised so that H has total mass 1 and mean 1/2,
with h(w) = -V_xy(w, 1 - w) / 2.
"""
from abc import ABC, abstractmethod
from typing import Callable, Dict, Tuple

import numpy as np
from scipy import special

from exceptions import ConvergenceFailure, DataValidationError
from models import DependenceFamily, FamilyTag

LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)
ROOT_TOLERANCE = 1e-12
MAX_NEWTON_STEPS = 20
# Relative step of the mixed-derivative stencil used to check closed-form densities
FD_RELATIVE_STEP = 1e-2


def _positive(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0)):
        raise DataValidationError(f"{name} must be strictly positive")
    return arr


def _logit_root(func: Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]],
                half_width: np.ndarray, label: str) -> np.ndarray:
    """Root in s = logit(q) of an increasing function, by bisection then Newton polish.

    func returns (value, derivative) and must change sign inside [-half_width, half_width].
    """
    lo = -np.asarray(half_width, dtype=float)
    hi = np.asarray(half_width, dtype=float).copy()
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        value, _ = func(mid)
        below = value < 0
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= 1e-10 * np.maximum(1.0, np.abs(mid))):
            break
    s = 0.5 * (lo + hi)
    for _ in range(MAX_NEWTON_STEPS):
        value, slope = func(s)
        step = np.where(value == 0, 0.0, value / slope)
        s = s - step
        # dq = q (1 - q) ds
        log_q, log_1mq = _log_q_pair(s)
        dq = np.abs(step) * np.exp(log_q + log_1mq)
        if np.all(dq <= ROOT_TOLERANCE):
            break
    if np.any(~np.isfinite(s)) or np.any(~(dq <= ROOT_TOLERANCE)):
        raise ConvergenceFailure(f"{label}: root finder did not converge")
    return s


def _log_q_pair(s: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """log q and log(1 - q) for q = expit(s) without cancellation"""
    return -np.logaddexp(0.0, -s), -np.logaddexp(0.0, s)


class FamilyModel(ABC):
    """Closed forms of one parametric family"""

    @abstractmethod
    def log_v(self, p: Tuple[float, ...], x: np.ndarray, y: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def v_x(self, p: Tuple[float, ...], x: np.ndarray, y: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def log_h(self, p: Tuple[float, ...], w: np.ndarray) -> np.ndarray:
        pass


class Logistic(FamilyModel):
    # V = (x^{-1/a} + y^{-1/a})^a

    def _log_s(self, a, x, y):
        return np.logaddexp(-np.log(x) / a, -np.log(y) / a)

    def log_v(self, p, x, y):
        a = p[0]
        return a * self._log_s(a, x, y)

    def v_x(self, p, x, y):
        a = p[0]
        return -np.exp((a - 1) * self._log_s(a, x, y) - (1 / a + 1) * np.log(x))

    def log_h(self, p, w):
        a = p[0]
        if a >= 1:
            return np.full_like(w, -np.inf)
        log_s = self._log_s(a, w, 1 - w)
        return (np.log((1 - a) / (2 * a)) + (a - 2) * log_s
                - (1 / a + 1) * (np.log(w) + np.log1p(-w)))


class NegativeLogistic(FamilyModel):
    # V = 1/x + 1/y - (x^a + y^a)^{-1/a}

    def log_v(self, p, x, y):
        a = p[0]
        log_t = np.logaddexp(a * np.log(x), a * np.log(y))
        v = 1 / x + 1 / y - np.exp(-log_t / a)
        return np.log(v)

    def v_x(self, p, x, y):
        a = p[0]
        log_t = np.logaddexp(a * np.log(x), a * np.log(y))
        return -1 / x ** 2 + np.exp((-1 / a - 1) * log_t + (a - 1) * np.log(x))

    def log_h(self, p, w):
        a = p[0]
        log_t = np.logaddexp(a * np.log(w), a * np.log1p(-w))
        return np.log((1 + a) / 2) + (-1 / a - 2) * log_t + (a - 1) * (np.log(w) + np.log1p(-w))


class HuslerReiss(FamilyModel):
    # V = Phi(1/a + a/2 log(y/x)) / x + Phi(1/a + a/2 log(x/y)) / y

    def log_v(self, p, x, y):
        a = p[0]
        ratio = np.log(y) - np.log(x)
        v = special.ndtr(1 / a + a / 2 * ratio) / x + special.ndtr(1 / a - a / 2 * ratio) / y
        return np.log(v)

    def v_x(self, p, x, y):
        a = p[0]
        return -special.ndtr(1 / a + a / 2 * (np.log(y) - np.log(x))) / x ** 2

    def log_h(self, p, w):
        a = p[0]
        z = 1 / a + a / 2 * (np.log1p(-w) - np.log(w))
        return np.log(a / 4) - 0.5 * z ** 2 - LOG_SQRT_2PI - 2 * np.log(w) - np.log1p(-w)


class Bilogistic(FamilyModel):
    """V = q^{1-a}/x + (1-q)^{1-b}/y with q the root of (1-a) y (1-q)^b = (1-b) x q^a"""

    def root(self, p, x, y) -> np.ndarray:
        a, b = p
        c = np.log((1 - a) * y) - np.log((1 - b) * x)

        def func(s):
            log_q, log_1mq = _log_q_pair(s)
            q = np.exp(log_q)
            # written as increasing in s
            return a * log_q - b * log_1mq - c, a * (1 - q) + b * q

        half_width = (np.abs(c) + 50.0) / min(a, b)
        return _logit_root(func, np.broadcast_to(half_width, np.broadcast(x, y).shape), "bilogistic")

    def log_v(self, p, x, y):
        a, b = p
        log_q, log_1mq = _log_q_pair(self.root(p, x, y))
        return np.logaddexp((1 - a) * log_q - np.log(x), (1 - b) * log_1mq - np.log(y))

    def v_x(self, p, x, y):
        a = p[0]
        log_q, _ = _log_q_pair(self.root(p, x, y))
        return -np.exp((1 - a) * log_q) / x ** 2

    def log_h(self, p, w):
        a, b = p
        log_q, log_1mq = _log_q_pair(self.root(p, w, 1 - w))
        q = np.exp(log_q)
        return (np.log(1 - a) + (1 - a) * log_q + log_1mq - np.log(2) - 2 * np.log(w) - np.log1p(-w)
                - np.log(a * (1 - q) + b * q))


class NegativeBilogistic(FamilyModel):
    """V = 1/x + 1/y - q^{1+a}/x - (1-q)^{1+b}/y with q the root of (1+a) y q^a = (1+b) x (1-q)^b"""

    def root(self, p, x, y) -> np.ndarray:
        a, b = p
        c = np.log((1 + b) * x) - np.log((1 + a) * y)

        def func(s):
            log_q, log_1mq = _log_q_pair(s)
            q = np.exp(log_q)
            return a * log_q - b * log_1mq - c, a * (1 - q) + b * q

        half_width = (np.abs(c) + 50.0) / min(a, b)
        return _logit_root(func, np.broadcast_to(half_width, np.broadcast(x, y).shape), "negative bilogistic")

    def log_v(self, p, x, y):
        a, b = p
        log_q, log_1mq = _log_q_pair(self.root(p, x, y))
        v = 1 / x + 1 / y - np.exp((1 + a) * log_q) / x - np.exp((1 + b) * log_1mq) / y
        return np.log(v)

    def v_x(self, p, x, y):
        a = p[0]
        log_q, _ = _log_q_pair(self.root(p, x, y))
        return (np.exp((1 + a) * log_q) - 1) / x ** 2

    def log_h(self, p, w):
        a, b = p
        log_q, log_1mq = _log_q_pair(self.root(p, w, 1 - w))
        q = np.exp(log_q)
        return (np.log1p(a) + (1 + a) * log_q + log_1mq - np.log(2) - 2 * np.log(w) - np.log1p(-w)
                - np.log(a * (1 - q) + b * q))


class ColesTawn(FamilyModel):
    """Dirichlet spectral density; V through regularized incomplete beta functions"""

    def _t0(self, p, x, y):
        a, b = p
        return a * x / (a * x + b * y)

    def log_v(self, p, x, y):
        a, b = p
        t0 = self._t0(p, x, y)
        v = special.betaincc(a + 1, b, t0) / x + special.betainc(a, b + 1, t0) / y
        return np.log(v)

    def v_x(self, p, x, y):
        a, b = p
        return -special.betaincc(a + 1, b, self._t0(p, x, y)) / x ** 2

    def log_h(self, p, w):
        a, b = p
        log_const = (np.log(a) + np.log(b) + special.gammaln(a + b + 1)
                     - np.log(2) - special.gammaln(a) - special.gammaln(b))
        return (log_const + (a - 1) * np.log(a * w) + (b - 1) * np.log(b * (1 - w))
                - (a + b + 1) * np.log(a * w + b * (1 - w)))


FAMILY_MODELS: Dict[FamilyTag, FamilyModel] = {
    FamilyTag.LOGISTIC: Logistic(),
    FamilyTag.NEG_LOGISTIC: NegativeLogistic(),
    FamilyTag.HUSLER_REISS: HuslerReiss(),
    FamilyTag.BILOGISTIC: Bilogistic(),
    FamilyTag.NEG_BILOGISTIC: NegativeBilogistic(),
    FamilyTag.COLES_TAWN: ColesTawn(),
}


def pseudo_polar(x, y) -> Tuple[np.ndarray, np.ndarray]:
    """(x, y) -> (r, w) = (x + y, x / (x + y))"""
    x = _positive(x, "x")
    y = _positive(y, "y")
    r = x + y
    return r, x / r


def from_pseudo_polar(r, w) -> Tuple[np.ndarray, np.ndarray]:
    r = _positive(r, "r")
    w = np.asarray(w, dtype=float)
    if np.any((w <= 0) | (w >= 1)):
        raise DataValidationError("w must lie in (0, 1)")
    return r * w, r * (1 - w)


def exponent_v(family: DependenceFamily, x, y) -> np.ndarray:
    x = _positive(x, "x")
    y = _positive(y, "y")
    return np.exp(FAMILY_MODELS[family.tag].log_v(family.params, x, y))


def exponent_dx(family: DependenceFamily, x, y) -> np.ndarray:
    """Partial derivative of V in its first argument (always negative)"""
    x = _positive(x, "x")
    y = _positive(y, "y")
    return FAMILY_MODELS[family.tag].v_x(family.params, x, y)


def log_spectral_density(family: DependenceFamily, w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if np.any((w <= 0) | (w >= 1)):
        raise DataValidationError("w must lie in (0, 1)")
    return FAMILY_MODELS[family.tag].log_h(family.params, w)


def spectral_density_h(family: DependenceFamily, w) -> np.ndarray:
    return np.exp(log_spectral_density(family, w))


def spectral_density_fd(family: DependenceFamily, w, relative_step: float = FD_RELATIVE_STEP) -> np.ndarray:
    """-V_xy / 2 at (w, 1 - w) by a fourth-order mixed central difference of V"""
    w = np.asarray(w, dtype=float)
    x, y = w, 1 - w
    step = relative_step * np.minimum(w, 1 - w)
    weights = {-2: 1.0, -1: -8.0, 1: 8.0, 2: -1.0}
    total = np.zeros_like(w)
    for i, ci in weights.items():
        for j, cj in weights.items():
            total += ci * cj * exponent_v(family, x + i * step, y + j * step)
    return -0.5 * total / (144 * step ** 2)


def conditional_cdf(family: DependenceFamily, x, y) -> np.ndarray:
    """P(Y <= y | X = x) for unit-Fréchet margins: x^2 (-V_x) exp(1/x - V)"""
    x = _positive(x, "x")
    y = _positive(y, "y")
    model = FAMILY_MODELS[family.tag]
    log_v = model.log_v(family.params, x, y)
    v_x = model.v_x(family.params, x, y)
    return np.clip(x ** 2 * -v_x * np.exp(1 / x - np.exp(log_v)), 0.0, 1.0)


def extremal_coefficient(family: DependenceFamily) -> float:
    """V(1, 1): 1 under complete dependence, 2 under independence"""
    return float(exponent_v(family, 1.0, 1.0))


def chi(family: DependenceFamily) -> float:
    return 2.0 - extremal_coefficient(family)

