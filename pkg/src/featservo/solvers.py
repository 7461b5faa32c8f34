"""Small least-squares solvers used by fitted Q-iteration.

``nonneg_ridge`` minimises

    (1/N) ||X theta + b - t||^2 + nu ||theta||^2,   theta >= 0, b free

by eliminating ``b`` (centering) and solving the resulting non-negative
least-squares problem. The default path is an active-set NNLS solve
(``scipy.optimize.nnls``) followed by a KKT check; an accelerated projected
gradient solver is available as a fallback and for cross-checking.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

log = logging.getLogger(__name__)

KKT_TOL = 1e-8
MAX_ITER = 10000


class SolverError(RuntimeError):
    """Raised when a solver fails to reach its tolerance within the cap."""


@dataclass(frozen=True)
class RidgeFit:
    theta: np.ndarray
    b: float
    objective: float
    kkt_residual: float
    iterations: int
    method: str


def ridge_objective(X, t, theta, b, nu) -> float:
    r = X @ theta + b - t
    return float(r @ r / len(t) + nu * theta @ theta)


def _centered(X, t):
    xm = X.mean(axis=0)
    tm = float(t.mean())
    return X - xm, t - tm, xm, tm


def kkt_residual(X, t, theta, nu) -> float:
    """Largest violation of the optimality conditions of the centered problem.

    Active coordinates (``theta_k = 0``) only count a negative gradient; free
    coordinates count the gradient magnitude.
    """
    Xc, tc, _, _ = _centered(X, t)
    grad = 2.0 * (Xc.T @ (Xc @ theta - tc)) / len(t) + 2.0 * nu * theta
    viol = np.where(theta > 0, np.abs(grad), np.maximum(-grad, 0.0))
    return float(viol.max()) if viol.size else 0.0


def _check(X, t, nu):
    X = np.asarray(X, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if X.ndim != 2 or X.shape[0] != t.shape[0]:
        raise ValueError(f"design {X.shape} does not match {t.shape[0]} targets")
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if nu < 0:
        raise ValueError("ridge coefficient must be non-negative")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(t))):
        raise ValueError("non-finite regression data")
    return X, t


def _active_set(Xc, tc, nu):
    n, p = Xc.shape
    scale = 1.0 / np.sqrt(n)
    A = np.vstack([Xc * scale, np.sqrt(nu) * np.eye(p)]) if nu > 0 else Xc * scale
    rhs = np.concatenate([tc * scale, np.zeros(p)]) if nu > 0 else tc * scale
    theta, _ = nnls(A, rhs, maxiter=50 * max(p, 1))
    return theta


def _refine(Xc, tc, nu, theta):
    # one exact solve on the positive set tightens the active-set answer
    free = theta > 0
    if not np.any(free):
        return theta
    n = len(tc)
    Xf = Xc[:, free]
    G = Xf.T @ Xf / n + nu * np.eye(int(free.sum()))
    rhs = Xf.T @ tc / n
    try:
        sol = np.linalg.solve(G, rhs)
    except np.linalg.LinAlgError:
        return theta
    if np.all(sol > 0):
        out = np.zeros_like(theta)
        out[free] = sol
        return out
    return theta


def _projected_gradient(Xc, tc, nu, theta0, tol, max_iter):
    """FISTA with backtracking and adaptive restart on the centered problem."""
    n = len(tc)
    G = Xc.T @ Xc / n + nu * np.eye(Xc.shape[1])
    h = Xc.T @ tc / n

    def f(th):
        return float(th @ G @ th - 2.0 * h @ th)

    def grad(th):
        return 2.0 * (G @ th - h)

    L = 2.0 * max(np.linalg.norm(G, 2), 1e-12)
    x = np.maximum(theta0, 0.0)
    y = x.copy()
    tk = 1.0
    for it in range(1, max_iter + 1):
        g = grad(y)
        fy = f(y)
        while True:
            xn = np.maximum(y - g / L, 0.0)
            d = xn - y
            if f(xn) <= fy + g @ d + 0.5 * L * d @ d + 1e-15 * abs(fy):
                break
            L *= 2.0
        tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk))
        if (xn - x) @ (y - xn) > 0:  # restart when momentum points uphill
            tn = 1.0
            y = xn.copy()
        else:
            y = xn + ((tk - 1.0) / tn) * (xn - x)
        x, tk = xn, tn
        gx = grad(x)
        viol = np.where(x > 0, np.abs(gx), np.maximum(-gx, 0.0))
        if viol.max(initial=0.0) <= tol:
            return x, it
    return x, max_iter


def nonneg_ridge(X, t, nu: float, tol: float = KKT_TOL, max_iter: int = MAX_ITER, method: str = "active-set") -> RidgeFit:
    """Non-negative ridge regression with a free intercept.

    Parameters
    ----------
    X : (N, P) design matrix.
    t : (N,) targets.
    nu : ridge coefficient on ``theta`` (not on ``b``).
    tol : KKT tolerance on the returned solution.
    method : ``"active-set"`` (with projected-gradient fallback) or
        ``"projected-gradient"``.

    Raises
    ------
    SolverError
        If the KKT residual is still above ``tol`` after the iteration cap.
    """
    X, t = _check(X, t, nu)
    Xc, tc, xm, tm = _centered(X, t)
    iterations = 0
    if method == "active-set":
        theta = _refine(Xc, tc, nu, _active_set(Xc, tc, nu))
        res = kkt_residual(X, t, theta, nu)
        if res > tol:
            log.debug("active-set KKT residual %.3g above tol; polishing", res)
            theta, iterations = _projected_gradient(Xc, tc, nu, theta, tol, max_iter)
            method = "active-set+projected-gradient"
    elif method == "projected-gradient":
        theta, iterations = _projected_gradient(Xc, tc, nu, np.zeros(X.shape[1]), tol, max_iter)
    else:
        raise ValueError(f"unknown method {method!r}")
    res = kkt_residual(X, t, theta, nu)
    if res > tol:
        raise SolverError(f"non-negative ridge did not converge: KKT residual {res:.3g} after {iterations} iterations")
    b = tm - float(xm @ theta)
    return RidgeFit(theta, b, ridge_objective(X, t, theta, b, nu), res, iterations, method)


@dataclass(frozen=True)
class ScaleBiasFit:
    alpha: float
    b: float
    objective: float


def scale_bias_objective(d, e, c, alpha, b, reg) -> float:
    r = alpha * d + b * e - c
    return float(r @ r / len(c) + reg * alpha * alpha)


def scale_bias(d, e, c, reg: float) -> ScaleBiasFit:
    """Minimise ``(1/N) sum (alpha d_i + b e_i - c_i)^2 + reg alpha^2`` with ``alpha >= 0``.

    When the unconstrained ``alpha`` is negative, ``b`` is refit with
    ``alpha = 0``. If ``alpha`` is undetermined (all ``d`` zero and no
    regularisation) it is set to 1 with a warning.
    """
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    e = np.asarray(e, dtype=np.float64).reshape(-1)
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    n = len(c)
    if n == 0:
        raise ValueError("empty batch")
    if not (len(d) == len(e) == n):
        raise ValueError("d, e and c must have equal length")
    if reg < 0:
        raise ValueError("regularisation must be non-negative")
    See = float(e @ e) / n
    if See <= 0:
        raise ValueError("bias coefficients are all zero")
    Sdd = float(d @ d) / n + reg
    Sde = float(d @ e) / n
    Sdc = float(d @ c) / n
    Sec = float(e @ c) / n

    det = Sdd * See - Sde * Sde
    if Sdd == 0.0 or det <= 1e-15 * Sdd * See:
        # no signal, or d proportional to e: alpha and b are not separable
        warnings.warn("scale is undetermined; using alpha = 1", RuntimeWarning, stacklevel=2)
        alpha = 1.0
        b = (Sec - Sde * alpha) / See
    else:
        alpha = (Sdc * See - Sde * Sec) / det
        b = (Sdd * Sec - Sde * Sdc) / det
        if alpha < 0:
            alpha, b = 0.0, Sec / See
    return ScaleBiasFit(float(alpha), float(b), scale_bias_objective(d, e, c, alpha, b, reg))
