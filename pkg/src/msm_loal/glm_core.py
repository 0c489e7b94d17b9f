"""Unpenalized weighted linear and logistic regression."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numba
import numpy as np
from scipy import linalg
from scipy.special import expit

logger = logging.getLogger(__name__)

MAX_ITER = 100
TOL = 1e-8
SEPARATION_CAP = 30.0


class SingularDesignError(np.linalg.LinAlgError):
    """Design matrix is rank deficient."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class SeparationError(RuntimeError):
    """Logistic coefficients diverge while the likelihood keeps improving."""


@dataclass(frozen=True, eq=False)
class GlmFit:
    coefficients: np.ndarray
    converged: bool
    iterations: int
    log_likelihood: float
    fixed_zero_mask: np.ndarray
    family: str = "gaussian"


def _names(columns, idx):
    if columns is None:
        return [f"x{j}" for j in idx]
    return [columns[j] for j in idx]


def _offending(A, free, columns):
    d = np.sqrt(np.maximum(np.diag(A), 0.0))
    zero = np.flatnonzero(d <= 1e-300)
    if zero.size:
        return _names(columns, free[zero])
    R = A / np.outer(d, d)
    vals, vecs = np.linalg.eigh(R)
    v = np.abs(vecs[:, 0])
    return _names(columns, free[np.flatnonzero(v > 0.1 * v.max())])


def solve_normal(A, b, free=None, columns=None):
    """Solve ``A x = b`` for a symmetric PSD ``A``.

    Adds a ridge of 1e-10 * trace / P when ``A`` is numerically singular and
    raises ``SingularDesignError`` when the columns are exactly dependent.
    """
    P = A.shape[0]
    if P == 0:
        return np.zeros(0)
    if free is None:
        free = np.arange(P)
    try:
        c, low = linalg.cho_factor(A, check_finite=False)
        ratio = np.diag(c) ** 2 / np.maximum(np.diag(A), 1e-300)
        if ratio.min() > 1e-10:
            return linalg.cho_solve((c, low), b, check_finite=False)
    except linalg.LinAlgError:
        pass
    d = np.sqrt(np.maximum(np.diag(A), 0.0))
    if np.any(d <= 1e-300):
        raise SingularDesignError(
            "design has all-zero columns: " + ", ".join(_offending(A, free, columns)),
            _offending(A, free, columns),
        )
    R = A / np.outer(d, d)
    if np.linalg.eigvalsh(R)[0] < 1e-13:
        cols = _offending(A, free, columns)
        raise SingularDesignError("collinear design columns: " + ", ".join(cols), cols)
    jitter = 1e-10 * np.trace(A) / P
    return np.linalg.solve(A + jitter * np.eye(P), b)


def _free(P, fixed_zero_mask):
    if fixed_zero_mask is None:
        mask = np.zeros(P, bool)
    else:
        mask = np.asarray(fixed_zero_mask, bool)
    return mask, np.flatnonzero(~mask)


def fit_linear_wls(X, y, w=None, fixed_zero_mask=None, columns=None) -> GlmFit:
    """Weighted least squares via the normal equations."""
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    n, P = X.shape
    w = np.ones(n) if w is None else np.asarray(w, float)
    if y.shape[0] != n or w.shape[0] != n:
        raise ValueError("X, y and w have inconsistent lengths")
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be nonnegative with positive sum")
    mask, free = _free(P, fixed_zero_mask)
    Xf = X[:, free]
    Xw = Xf * w[:, None]
    coef = np.zeros(P)
    coef[free] = solve_normal(Xw.T @ Xf, Xw.T @ y, free, columns)
    r = y - X @ coef
    ll = -0.5 * float(np.sum(w * r * r))
    return GlmFit(coef, True, 1, ll, mask, "gaussian")


def logistic_loglik(eta, y, w):
    # y*eta - log(1 + e^eta), written to stay finite for large |eta|
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


@numba.njit(cache=True)
def _loglik(eta, y, w):
    s = 0.0
    for i in range(eta.shape[0]):
        e = eta[i]
        if e > 0:
            sp = e + np.log1p(np.exp(-e))
        else:
            sp = np.log1p(np.exp(e))
        s += w[i] * (y[i] * e - sp)
    return s


@numba.njit(cache=True)
def _chol_solve(A, b):
    # returns (x, ok); ok is False when a pivot is tiny relative to its diagonal
    P = A.shape[0]
    L = np.zeros((P, P))
    for j in range(P):
        d = A[j, j]
        for k in range(j):
            d -= L[j, k] * L[j, k]
        if not d > 1e-10 * max(A[j, j], 1e-300):
            return b.copy(), False
        L[j, j] = np.sqrt(d)
        for i in range(j + 1, P):
            v = A[i, j]
            for k in range(j):
                v -= L[i, k] * L[j, k]
            L[i, j] = v / L[j, j]
    z = np.empty(P)
    for i in range(P):
        v = b[i]
        for k in range(i):
            v -= L[i, k] * z[k]
        z[i] = v / L[i, i]
    x = np.empty(P)
    for i in range(P - 1, -1, -1):
        v = z[i]
        for k in range(i + 1, P):
            v -= L[k, i] * x[k]
        x[i] = v / L[i, i]
    return x, True


@numba.njit(cache=True)
def _irls(X, y, w, beta, scale, max_iter, tol, cap):
    # status: 0 finished, 1 separation at column `flag`, 2 ill-conditioned Hessian
    N, P = X.shape
    eta = X @ beta
    ll = _loglik(eta, y, w)
    converged = False
    it = 0
    H = np.empty((P, P))
    grad = np.empty(P)
    for it in range(1, max_iter + 1):
        H[:] = 0.0
        grad[:] = 0.0
        for i in range(N):
            p = 1.0 / (1.0 + np.exp(-eta[i]))
            hi = w[i] * p * (1.0 - p)
            ri = w[i] * (y[i] - p)
            for j in range(P):
                xj = X[i, j]
                grad[j] += xj * ri
                hx = hi * xj
                for k in range(j + 1):
                    H[j, k] += hx * X[i, k]
        for j in range(P):
            for k in range(j):
                H[k, j] = H[j, k]
        step, ok = _chol_solve(H, grad)
        if not ok:
            return beta, ll, converged, it, 2, -1
        t = 1.0
        accepted = False
        for _ in range(40):
            cand = beta + t * step
            eta_c = X @ cand
            ll_c = _loglik(eta_c, y, w)
            if ll_c >= ll - 1e-12 * max(1.0, abs(ll)):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        gain = ll_c - ll
        beta = cand
        eta = eta_c
        ll = ll_c
        big = 0.0
        arg = -1
        for j in range(P):
            v = abs(beta[j]) * scale[j]
            if v > big:
                big = v
                arg = j
        if big > cap and gain > tol * max(1.0, abs(ll)):
            return beta, ll, converged, it, 1, arg
        if abs(gain) <= tol * max(abs(ll), 1e-10):
            converged = True
            break
    return beta, ll, converged, it, 0, -1


def fit_logistic(X, y, w=None, fixed_zero_mask=None, start=None, columns=None,
                 max_iter=MAX_ITER, tol=TOL, separation_cap=SEPARATION_CAP) -> GlmFit:
    """Weighted Bernoulli maximum likelihood by IRLS with step halving.

    ``y`` may be fractional in [0, 1] (quasi-likelihood). Raises
    ``SeparationError`` if a coefficient on the standardized scale exceeds
    ``separation_cap`` while the likelihood is still improving.
    """
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    n, P = X.shape
    w = np.ones(n) if w is None else np.asarray(w, float)
    if y.shape[0] != n or w.shape[0] != n:
        raise ValueError("X, y and w have inconsistent lengths")
    if np.any((y < 0) | (y > 1)):
        raise ValueError("logistic response must lie in [0, 1]")
    mask, free = _free(P, fixed_zero_mask)
    Xf = X[:, free]
    beta = np.zeros(free.size) if start is None else np.asarray(start, float)[free].copy()
    sw = w.sum()
    mu = (w @ Xf) / sw
    sd = np.sqrt(np.maximum((w @ (Xf * Xf)) / sw - mu * mu, 0.0))
    scale = np.where(sd > 1e-12, sd, 1.0)
    if free.size:
        b, ll, conv, it, status, arg = _irls(np.ascontiguousarray(Xf), np.ascontiguousarray(y),
                                             np.ascontiguousarray(w), np.ascontiguousarray(beta),
                                             scale, max_iter, tol, separation_cap)
        if status == 1:
            raise SeparationError("coefficient diverging for " + ", ".join(_names(columns, free[arg][None])))
        if status == 0:
            coef = np.zeros(P)
            coef[free] = b
            if not conv:
                logger.debug("logistic IRLS stopped after %d iterations without converging", it)
            return GlmFit(coef, bool(conv), int(it), float(ll), mask, "binomial")
    # near-singular Hessian: slower path with ridge handling and column diagnostics
    eta = Xf @ beta
    ll = logistic_loglik(eta, y, w)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(eta)
        h = w * p * (1.0 - p)
        grad = Xf.T @ (w * (y - p))
        H = (Xf * h[:, None]).T @ Xf
        step = solve_normal(H, grad, free, columns)
        t = 1.0
        for _ in range(40):
            cand = beta + t * step
            eta_c = Xf @ cand
            ll_c = logistic_loglik(eta_c, y, w)
            if ll_c >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            t *= 0.5
        else:
            break
        gain = ll_c - ll
        beta, eta, ll = cand, eta_c, ll_c
        if np.max(np.abs(beta) * scale, initial=0.0) > separation_cap and gain > tol * max(1.0, abs(ll)):
            raise SeparationError(
                "coefficient diverging for " + ", ".join(_names(columns, free[np.argmax(np.abs(beta) * scale)][None]))
            )
        if abs(gain) <= tol * max(abs(ll), 1e-10):
            converged = True
            break
    coef = np.zeros(P)
    coef[free] = beta
    if not converged:
        logger.debug("logistic IRLS stopped after %d iterations without converging", it)
    return GlmFit(coef, converged, it, ll, mask, "binomial")


def predict(fit: GlmFit, X):
    eta = np.asarray(X, float) @ fit.coefficients
    return expit(eta) if fit.family == "binomial" else eta


def sandwich_se(X, y, w, fit: GlmFit, cluster=None, return_cov=False):
    """HC0 sandwich standard errors, clustered when ``cluster`` labels are given.

    Fixed-zero columns get SE 0.
    """
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    w = np.ones(X.shape[0]) if w is None else np.asarray(w, float)
    free = np.flatnonzero(~np.asarray(fit.fixed_zero_mask, bool))
    Xf = X[:, free]
    eta = X @ fit.coefficients
    if fit.family == "binomial":
        mu = expit(eta)
        h = w * mu * (1 - mu)
    else:
        mu = eta
        h = w
    A = (Xf * h[:, None]).T @ Xf
    S = Xf * (w * (y - mu))[:, None]
    if cluster is not None:
        _, inv = np.unique(np.asarray(cluster), return_inverse=True)
        G = np.zeros((inv.max() + 1, S.shape[1]))
        np.add.at(G, inv, S)
        S = G
    B = S.T @ S
    try:
        Ainv = np.linalg.inv(A)
    except np.linalg.LinAlgError as exc:
        raise SingularDesignError("singular bread matrix in sandwich estimator") from exc
    V = Ainv @ B @ Ainv
    cov = np.zeros((X.shape[1], X.shape[1]))
    cov[np.ix_(free, free)] = V
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    return (se, cov) if return_cov else se


def ols_model_se(X, y, w, fit: GlmFit):
    """Model-based standard errors sigma^2 (X'WX)^-1 with sigma^2 = RSS / (n - p)."""
    X = np.asarray(X, float)
    w = np.ones(X.shape[0]) if w is None else np.asarray(w, float)
    free = np.flatnonzero(~np.asarray(fit.fixed_zero_mask, bool))
    Xf = X[:, free]
    r = np.asarray(y, float) - X @ fit.coefficients
    dof = max(int(np.count_nonzero(w > 0)) - free.size, 1)
    s2 = float(np.sum(w * r * r)) / dof
    A = (Xf * w[:, None]).T @ Xf
    se = np.zeros(X.shape[1])
    se[free] = np.sqrt(np.maximum(np.diag(np.linalg.pinv(A)) * s2, 0.0))
    return se
