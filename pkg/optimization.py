"""Restarted Nelder-Mead search and finite-difference derivatives shared by the fitters."""
import logging
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import OptimizeResult, minimize

from exceptions import ConvergenceFailure

SIMPLEX_OPTIONS = {'xatol': 1e-10, 'fatol': 1e-11, 'maxiter': 20000, 'maxfev': 40000}


def minimize_with_restarts(objective: Callable[[np.ndarray], float],
                           starts: Sequence[np.ndarray],
                           bounds: Optional[List[Tuple[float, float]]] = None,
                           label: str = "objective") -> OptimizeResult:
    """Run a simplex search from every start, polish the best one, return it.

    The objective is minimized; non-finite values count as +inf.
    """
    def safe_objective(x):
        value = objective(x)
        return value if np.isfinite(value) else np.inf

    best = None
    for x0 in starts:
        x0 = np.asarray(x0, dtype=float)
        if not np.isfinite(safe_objective(x0)):
            continue
        res = minimize(safe_objective, x0, method='Nelder-Mead', bounds=bounds, options=SIMPLEX_OPTIONS)
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res

    if best is None:
        raise ConvergenceFailure(f"no finite starting value for {label}")

    # Restarting from the optimum re-inflates a collapsed simplex
    polished = minimize(safe_objective, best.x, method='Nelder-Mead', bounds=bounds, options=SIMPLEX_OPTIONS)
    if polished.fun <= best.fun:
        best = polished
    if not np.isfinite(best.fun):
        raise ConvergenceFailure(f"{label}: optimizer did not reach a finite optimum")
    if not best.success:
        logging.warning(f"{label}: simplex search stopped early ({best.message})")
    return best


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient"""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for i in range(len(x)):
        step = np.zeros_like(x)
        step[i] = eps
        grad[i] = (f(x + step) - f(x - step)) / (2 * eps)
    return grad


def compute_hessian(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Compute Hessian matrix using central finite differences."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    hessian = np.zeros((n, n))
    f0 = f(x)

    for i in range(n):
        x_plus_i = x.copy()
        x_plus_i[i] += eps
        x_minus_i = x.copy()
        x_minus_i[i] -= eps
        hessian[i, i] = (f(x_plus_i) - 2 * f0 + f(x_minus_i)) / eps**2

        for j in range(i + 1, n):
            x_pp = x.copy()
            x_pp[i] += eps
            x_pp[j] += eps
            x_pm = x.copy()
            x_pm[i] += eps
            x_pm[j] -= eps
            x_mp = x.copy()
            x_mp[i] -= eps
            x_mp[j] += eps
            x_mm = x.copy()
            x_mm[i] -= eps
            x_mm[j] -= eps
            hessian[i, j] = (f(x_pp) - f(x_pm) - f(x_mp) + f(x_mm)) / (4 * eps**2)
            hessian[j, i] = hessian[i, j]

    return hessian


def covariance_from_hessian(hessian: np.ndarray, label: str = "fit") -> np.ndarray:
    """Invert the Hessian of a negative log-likelihood; NaN matrix when not positive definite"""
    try:
        if not np.all(np.isfinite(hessian)):
            raise np.linalg.LinAlgError("non-finite curvature")
        np.linalg.cholesky(hessian)
        return np.linalg.inv(hessian)
    except np.linalg.LinAlgError:
        logging.warning(f"{label}: observed information is not positive definite, standard errors unavailable")
        return np.full_like(hessian, np.nan)
