"""Small dense linear algebra and GLM solvers.

Everything here is a pure function of its arguments. The symmetric solver
uses LAPACK's pivoted Cholesky (``dpstrf``) so that rank deficiency is
reported instead of silently producing a huge solution.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular
from scipy.linalg.lapack import dpstrf

from .exceptions import NotConverged, Separation, SingularMatrix

SINGULAR_RTOL = 1e-12
SYMMETRY_RTOL = 1e-9
# |eta| beyond this puts expit within machine epsilon of 0 or 1
PINNED_ETA = 35.0
# a class whose every residual is below this is fitted perfectly
PINNED_RESID = 1e-6


def expit(x):
    """Logistic function, evaluated on the branch that cannot overflow."""
    arr = np.asarray(x, dtype=float)
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    e = np.exp(arr[~pos])
    out[~pos] = e / (1.0 + e)
    if out.ndim == 0:
        return float(out)
    return out


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def check_symmetric(A: np.ndarray) -> None:
    scale = np.max(np.abs(A)) if A.size else 0.0
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"matrix must be square, got {A.shape}")
    if np.max(np.abs(A - A.T), initial=0.0) > SYMMETRY_RTOL * scale:
        raise ValueError("matrix is not symmetric")


def solve_spd(A, b) -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive semidefinite ``A``.

    ``b`` may be a vector or a matrix of right-hand sides. Raises
    :class:`SingularMatrix` when a pivot drops to 1e-12 times the largest
    diagonal entry.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2 or A.shape[0] < 1:
        raise ValueError("A must be a non-empty square matrix")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite entries in linear system")
    check_symmetric(A)
    p = A.shape[0]
    max_diag = float(np.max(np.diag(A)))
    if max_diag <= 0.0:
        raise SingularMatrix("matrix has no positive diagonal entry")
    c, piv, rank, info = dpstrf(A, tol=SINGULAR_RTOL * max_diag, lower=0)
    if info < 0:
        raise ValueError(f"dpstrf argument error {info}")
    if rank < p:
        raise SingularMatrix(f"rank {rank} < {p} at pivot threshold {SINGULAR_RTOL:g}·max diag")
    U = np.triu(c)
    perm = piv - 1
    rhs = b[perm]
    tmp = solve_triangular(U, rhs, trans="T", lower=False)
    y = solve_triangular(U, tmp, lower=False)
    x = np.empty_like(y)
    x[perm] = y
    return x


def cross_products(design, y, w):
    """Return ``(XᵀWX, XᵀWy)`` with the first term exactly symmetric."""
    X = np.asarray(design, dtype=float)
    wX = X * np.asarray(w, dtype=float)[:, None]
    xtwx = X.T @ wX
    xtwx = 0.5 * (xtwx + xtwx.T)
    xtwy = wX.T @ np.asarray(y, dtype=float)
    return xtwx, xtwy


def _check_glm_inputs(design, y, w):
    X = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2:
        raise ValueError("design must be two-dimensional")
    n = X.shape[0]
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    if y.shape != (n,) or w.shape != (n,):
        raise ValueError("design, y and w disagree in length")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y)) and np.all(np.isfinite(w))):
        raise ValueError("non-finite input")
    return X, y, w


def wls(design, y, w=None) -> np.ndarray:
    """Weighted least squares via the normal equations."""
    X, y, w = _check_glm_inputs(design, y, w)
    if np.count_nonzero(w > 0) < X.shape[1]:
        raise SingularMatrix("fewer positively weighted rows than columns")
    xtwx, xtwy = cross_products(X, y, w)
    return solve_spd(xtwx, xtwy)


def logistic_loglik(design, y, w, theta) -> float:
    eta = design @ theta
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def logistic_score(design, y, w, theta) -> np.ndarray:
    return design.T @ (w * (y - expit(design @ theta)))


def irls_logistic(design, y, w=None, tol: float = 1e-8, max_iter: int = 50, start=None):
    """Weighted logistic regression by Newton-Raphson.

    Returns ``(theta, converged)``. ``converged`` is set only when the
    sup-norm of the weighted score is at most ``tol``. Steps that lower the
    weighted log-likelihood are halved up to ten times.
    """
    X, y, w = _check_glm_inputs(design, y, w)
    if np.any((y != 0) & (y != 1)):
        raise ValueError("logistic outcome must be 0/1")
    active = w > 0
    ya = y[active]
    if ya.size == 0 or np.all(ya == 0) or np.all(ya == 1):
        raise Separation("only one outcome class among positively weighted rows")
    p = X.shape[1]
    theta = np.zeros(p) if start is None else np.array(start, dtype=float)
    ll = logistic_loglik(X, y, w, theta)
    for it in range(max_iter + 1):
        eta = X @ theta
        if np.max(np.abs(eta[active])) > PINNED_ETA:
            raise Separation("fitted probabilities pinned at 0 or 1")
        mu = expit(eta)
        resid = np.abs(y - mu)[active]
        if it > 0 and (np.all(resid[ya == 1] < PINNED_RESID) or np.all(resid[ya == 0] < PINNED_RESID)):
            raise Separation("fitted probabilities pinned at 0 or 1 for one outcome class")
        score = X.T @ (w * (y - mu))
        if np.max(np.abs(score)) <= tol:
            return theta, True
        if it == max_iter:
            break
        hess = X.T @ (X * (w * mu * (1.0 - mu))[:, None])
        hess = 0.5 * (hess + hess.T)
        step = solve_spd(hess, score)
        slack = 1e-12 * (1.0 + abs(ll))
        for _ in range(11):
            cand = theta + step
            ll_new = logistic_loglik(X, y, w, cand)
            if ll_new >= ll - slack:
                break
            step = 0.5 * step
        else:
            raise NotConverged("step-halving failed to increase the likelihood", theta)
        theta, ll = cand, ll_new
    return theta, False
