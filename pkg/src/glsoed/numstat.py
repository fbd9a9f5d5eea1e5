"""Scalar statistics and dense factorizations shared by the other modules.

The t-distribution quantile is computed from the regularized incomplete beta
function, so no statistics package is needed at runtime.  The LDL^T routines
work on dense symmetric positive-definite matrices and are blocked so that
the bulk of the work happens in matrix-matrix products.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PIVOT_TOL = 1e-13
_BLOCK = 64


class DomainError(ValueError):
    """Argument outside the domain of a statistical function."""


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when an LDL^T pivot falls below the pivot tolerance."""

    def __init__(self, index: int, pivot: float):
        self.index = index
        self.pivot = pivot
        super().__init__(f"matrix is not positive definite (pivot {pivot:.3e} at index {index})")


# ---------------------------------------------------------------------------
# t-distribution
# ---------------------------------------------------------------------------

def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 100000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h


def betainc_reg(a: float, b: float, x: float, x_complement: float | None = None) -> float:
    """Regularized incomplete beta function I_x(a, b).

    ``x_complement`` may carry an accurately computed ``1 - x``; it is used
    when the symmetry relation is applied.
    """
    if x_complement is None:
        x_complement = 1.0 - x
    if x <= 0.0:
        return 0.0
    if x_complement <= 0.0:
        return 1.0
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log(x_complement)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, x_complement) / b


def _t_upper_tail(t: float, dof: float) -> float:
    """P(T > t) for t >= 0."""
    t2 = t * t
    x = dof / (dof + t2)
    xc = t2 / (dof + t2)
    return 0.5 * betainc_reg(0.5 * dof, 0.5, x, xc)


def t_cdf(t: float, dof: float) -> float:
    """Cumulative distribution function of Student's t."""
    if t >= 0:
        return 1.0 - _t_upper_tail(t, dof)
    return _t_upper_tail(-t, dof)


def t_pdf(t: float, dof: float) -> float:
    log_norm = math.lgamma(0.5 * (dof + 1.0)) - math.lgamma(0.5 * dof) - 0.5 * math.log(dof * math.pi)
    return math.exp(log_norm - 0.5 * (dof + 1.0) * math.log1p(t * t / dof))


def t_quantile(beta: float, dof: int) -> float:
    """Return q with P(T <= q) = beta for T ~ t(dof).

    Inverts the upper tail with a safeguarded Newton iteration: Newton steps
    are taken while they stay inside the current bracket, bisection otherwise.
    """
    if not 0.0 < beta < 1.0:
        raise DomainError(f"beta must lie in (0, 1), got {beta!r}")
    if dof < 1:
        raise DomainError(f"degrees of freedom must be >= 1, got {dof!r}")
    if beta == 0.5:
        return 0.0
    if beta < 0.5:
        return -t_quantile(1.0 - beta, dof)

    target = 1.0 - beta
    lo, hi = 0.0, 1.0
    while _t_upper_tail(hi, dof) > target:
        lo, hi = hi, 2.0 * hi
    t = 0.5 * (lo + hi)
    for _ in range(200):
        resid = _t_upper_tail(t, dof) - target
        if resid > 0:
            lo = t
        else:
            hi = t
        step = resid / t_pdf(t, dof)
        t_new = t + step
        if not lo < t_new < hi:
            t_new = 0.5 * (lo + hi)
        if abs(t_new - t) <= 1e-15 * max(1.0, abs(t)):
            t = t_new
            break
        t = t_new
    return t


# ---------------------------------------------------------------------------
# LDL^T
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LdlFactorization:
    """B = L diag(D) L^T with unit lower-triangular L and positive D."""

    L: np.ndarray
    D: np.ndarray

    @property
    def dim(self) -> int:
        return self.D.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.L * self.D) @ self.L.T

    def whiten(self, b: np.ndarray) -> np.ndarray:
        """Return D^{-1/2} L^{-1} b (vector or column block)."""
        x = forward_substitute(self.L, b)
        scale = 1.0 / np.sqrt(self.D)
        return x * scale if x.ndim == 1 else x * scale[:, None]

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Return B^{-1} b."""
        x = forward_substitute(self.L, b)
        x = x / self.D if x.ndim == 1 else x / self.D[:, None]
        return backward_substitute(self.L, x)


def _check_symmetric(B: np.ndarray, rtol: float = 1e-12) -> None:
    if B.ndim != 2 or B.shape[0] != B.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {B.shape}")
    scale = np.max(np.abs(B)) if B.size else 0.0
    if B.size and np.max(np.abs(B - B.T)) > rtol * max(scale, np.finfo(float).tiny):
        raise ValueError("matrix is not symmetric")


def ldl_factorize(B: np.ndarray, pivot_tol: float = PIVOT_TOL) -> LdlFactorization:
    """Factor a symmetric positive-definite matrix as L diag(D) L^T.

    Right-looking blocked elimination without pivoting.  A pivot below
    ``pivot_tol * max|B|`` raises :class:`NotPositiveDefinite`.
    """
    B = np.asarray(B, dtype=float)
    _check_symmetric(B)
    n = B.shape[0]
    if n == 0:
        raise ValueError("cannot factor an empty matrix")
    W = np.tril(B)
    W = W + np.tril(W, -1).T
    L = np.eye(n)
    d = np.empty(n)
    thresh = pivot_tol * np.max(np.abs(B))

    for k0 in range(0, n, _BLOCK):
        k1 = min(n, k0 + _BLOCK)
        for j in range(k0, k1):
            dj = W[j, j]
            if not dj > thresh:
                raise NotPositiveDefinite(j, float(dj))
            d[j] = dj
            w = W[j + 1:, j].copy()
            L[j + 1:, j] = w / dj
            if j + 1 < k1:
                W[j + 1:, j + 1:k1] -= np.outer(L[j + 1:, j], w[: k1 - j - 1])
        if k1 < n:
            panel = L[k1:, k0:k1]
            W[k1:, k1:] -= (panel * d[k0:k1]) @ panel.T
    return LdlFactorization(L=L, D=d)


def forward_substitute(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve L x = b for unit lower-triangular L.

    ``b`` may be a vector or an (n, k) block of right-hand sides.
    """
    L = np.asarray(L, dtype=float)
    x = np.array(b, dtype=float, copy=True)
    n = L.shape[0]
    if L.shape != (n, n) or x.shape[0] != n:
        raise ValueError(f"dimension mismatch: L {L.shape}, b {x.shape}")
    for k0 in range(0, n, _BLOCK):
        k1 = min(n, k0 + _BLOCK)
        for i in range(k0 + 1, k1):
            x[i] -= L[i, k0:i] @ x[k0:i]
        if k1 < n:
            x[k1:] -= L[k1:, k0:k1] @ x[k0:k1]
    return x


def backward_substitute(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve L^T x = b for unit lower-triangular L."""
    L = np.asarray(L, dtype=float)
    x = np.array(b, dtype=float, copy=True)
    n = L.shape[0]
    if L.shape != (n, n) or x.shape[0] != n:
        raise ValueError(f"dimension mismatch: L {L.shape}, b {x.shape}")
    for k1 in range(n, 0, -_BLOCK):
        k0 = max(0, k1 - _BLOCK)
        for i in range(k1 - 2, k0 - 1, -1):
            x[i] -= L[i + 1:k1, i] @ x[i + 1:k1]
        if k0 > 0:
            x[:k0] -= L[k0:k1, :k0].T @ x[k0:k1]
    return x


def spd_inverse(M: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric positive-definite matrix through LDL^T."""
    fact = ldl_factorize(M)
    X = forward_substitute(fact.L, np.eye(fact.dim))
    inv = (X.T / fact.D) @ X
    return 0.5 * (inv + inv.T)
