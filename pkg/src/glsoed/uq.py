"""Uncertainty of the estimate and of model outputs.

With ``F = J^T C^{-1} J`` (Fisher information) and ``H`` the Hessian of
``phi / 2`` at the estimate, three approximations of the estimator
covariance are available::

    V_F  = sigma^2 F^{-1}
    V_H  = sigma^2 H^{-1}
    V_FH = sigma^2 H^{-1} F H^{-1}

They coincide for linear models; the last one stays valid when the
assumed covariance of the measurement errors is wrong.  Confidence
intervals use t quantiles with ``n - m`` degrees of freedom.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .numstat import NotPositiveDefinite, ldl_factorize, spd_inverse, t_quantile
from .parameters import PARAMETER_NAMES

KINDS = ("F", "H", "FH")
FULL_W_LIMIT = 2000
RANK_TOL = 1e-13


class RankDeficient(np.linalg.LinAlgError):
    """F is singular to working precision; ``pair`` names two entangled parameters."""

    def __init__(self, message: str, index: int | None = None, pair: tuple | None = None):
        self.index = index
        self.pair = pair
        super().__init__(message)


class NegativeVariance(ValueError):
    """A covariance approximation has a negative diagonal entry."""


class ZeroVariance(ValueError):
    """A variance is zero, so correlations are undefined."""


@dataclass
class FisherBundle:
    J: np.ndarray
    F: np.ndarray
    H: np.ndarray | None
    residual: np.ndarray
    sigma2_hat: float
    n: int
    m: int
    phi: float = float("nan")
    theta_hat: np.ndarray | None = None

    @property
    def dof(self) -> int:
        return self.n - self.m


@dataclass
class CovarianceApprox:
    kind: str
    V: np.ndarray
    sigma2: float
    sigma2_source: str = "estimated"
    usable: bool = True


@dataclass
class ConfidenceIntervals:
    centers: np.ndarray
    half_widths: np.ndarray
    gamma: float
    dof: int
    multiplier: float

    @property
    def lower(self) -> np.ndarray:
        return self.centers - self.half_widths

    @property
    def upper(self) -> np.ndarray:
        return self.centers + self.half_widths

    def contains(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=float)
        return (v >= self.lower) & (v <= self.upper)


def _names(m):
    return PARAMETER_NAMES if m == len(PARAMETER_NAMES) else tuple(f"theta_{i}" for i in range(m))


def _dependent_pair(F: np.ndarray, index: int) -> tuple:
    """Parameter most strongly tied to ``index`` in the null direction of F."""
    w, v = np.linalg.eigh(F)
    vec = np.abs(v[:, 0])
    order = np.argsort(vec)[::-1]
    other = int(order[0]) if int(order[0]) != index else int(order[1])
    return tuple(sorted((index, other)))


def fisher_bundle(J, covariance_model, residual, phi_value: float, n: int | None = None, m: int | None = None,
                  H=None, theta_hat=None) -> FisherBundle:
    """Assemble F through the whitened Jacobian and set ``sigma2_hat = phi / n``."""
    J = np.atleast_2d(np.asarray(J, dtype=float))
    n = J.shape[0] if n is None else int(n)
    m = J.shape[1] if m is None else int(m)
    if J.shape != (n, m):
        raise ValueError(f"Jacobian has shape {J.shape}, expected ({n}, {m})")
    if n <= m:
        raise ValueError("need more measurements than parameters")
    Jw = covariance_model.whiten(J)
    F = Jw.T @ Jw
    F = 0.5 * (F + F.T)
    # identifiability check on the column-equilibrated matrix
    scale = np.sqrt(np.diag(F))
    zero = np.nonzero(scale == 0)[0]
    names = _names(m)
    if zero.size:
        i = int(zero[0])
        raise RankDeficient(f"parameter {names[i]} has no influence on the outputs", i, (i, i))
    try:
        ldl_factorize(F / np.outer(scale, scale), pivot_tol=RANK_TOL)
    except NotPositiveDefinite as exc:
        i, j = _dependent_pair(F / np.outer(scale, scale), exc.index)
        raise RankDeficient(f"Fisher matrix is rank deficient: parameters {names[i]} and {names[j]} "
                            "are not separately identifiable", exc.index, (i, j)) from exc
    residual = np.asarray(residual, dtype=float)
    return FisherBundle(J=J, F=F, H=None if H is None else np.asarray(H, dtype=float), residual=residual,
                        sigma2_hat=float(phi_value) / n, n=n, m=m, phi=float(phi_value),
                        theta_hat=None if theta_hat is None else np.asarray(theta_hat, dtype=float))


def covariance(kind: str, bundle: FisherBundle, sigma2: float | None = None) -> CovarianceApprox:
    """One of the three covariance approximations.

    ``sigma2`` overrides the estimated ``sigma2_hat``.  H-based kinds raise
    NotPositiveDefinite when H is not positive definite.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    s2 = bundle.sigma2_hat if sigma2 is None else float(sigma2)
    source = "estimated" if sigma2 is None else "known"
    if kind == "F":
        try:
            Finv = spd_inverse(bundle.F)
        except NotPositiveDefinite as exc:
            raise RankDeficient(f"Fisher matrix not invertible (pivot {exc.index})", exc.index) from exc
        return CovarianceApprox("F", s2 * Finv, s2, source)
    if bundle.H is None:
        raise ValueError("bundle has no Hessian")
    Hinv = spd_inverse(bundle.H)
    if kind == "H":
        V = s2 * Hinv
    else:
        V = s2 * (Hinv @ bundle.F @ Hinv)
    return CovarianceApprox(kind, 0.5 * (V + V.T), s2, source)


def all_covariances(bundle: FisherBundle, sigma2: float | None = None) -> dict:
    """Every kind that can be formed; H-based kinds flagged unusable if H is not PD."""
    out = {"F": covariance("F", bundle, sigma2)}
    if bundle.H is not None:
        for kind in ("H", "FH"):
            try:
                out[kind] = covariance(kind, bundle, sigma2)
            except NotPositiveDefinite:
                s2 = bundle.sigma2_hat if sigma2 is None else sigma2
                out[kind] = CovarianceApprox(kind, np.full((bundle.m, bundle.m), np.nan), s2,
                                             "estimated" if sigma2 is None else "known", usable=False)
    return out


def _intervals(centers, variances, gamma, n, m) -> ConfidenceIntervals:
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    if n <= m:
        raise ValueError("need n > m for confidence intervals")
    variances = np.asarray(variances, dtype=float)
    if np.any(variances < -1e-12):
        bad = int(np.argmin(variances))
        raise NegativeVariance(f"variance {bad} is negative ({variances[bad]:.3e})")
    q = t_quantile((1.0 + gamma) / 2.0, n - m)
    hw = q * np.sqrt(np.maximum(variances, 0.0))
    return ConfidenceIntervals(np.asarray(centers, dtype=float), hw, gamma, n - m, q)


def parameter_cis(theta_hat, V, gamma: float, n: int, m: int) -> ConfidenceIntervals:
    """Half-widths ``t_{(1+gamma)/2, n-m} * sqrt(V_ii)``."""
    return _intervals(theta_hat, np.diag(np.asarray(V, dtype=float)), gamma, n, m)


def estimator_correlation(V) -> np.ndarray:
    V = np.asarray(V, dtype=float)
    d = np.diag(V)
    if np.any(d <= 0):
        raise ZeroVariance(f"variance {int(np.argmin(d))} is not positive")
    s = np.sqrt(d)
    R = V / np.outer(s, s)
    R = np.clip(0.5 * (R + R.T), -1.0, 1.0)
    np.fill_diagonal(R, 1.0)
    return R


def output_covariance(J_ftilde, V, full: bool | None = None, block: int = 4096):
    """``W = J V J^T``; only its diagonal for more than 2000 outputs.

    ``full`` forces either form.  The diagonal is accumulated over row
    blocks of the Jacobian.
    """
    J = np.atleast_2d(np.asarray(J_ftilde, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    if J.shape[1] != V.shape[0] or V.shape[0] != V.shape[1]:
        raise ValueError(f"dimension mismatch: J {J.shape}, V {V.shape}")
    if full is None:
        full = J.shape[0] <= FULL_W_LIMIT
    if full:
        W = J @ V @ J.T
        return 0.5 * (W + W.T)
    diag = np.empty(J.shape[0])
    for start in range(0, J.shape[0], block):
        Jb = J[start:start + block]
        diag[start:start + block] = np.einsum("ij,jk,ik->i", Jb, V, Jb)
    return diag


def output_cis(ftilde_values, W_diag, gamma: float, n: int, m: int) -> ConfidenceIntervals:
    W_diag = np.asarray(W_diag, dtype=float)
    if W_diag.ndim == 2:
        W_diag = np.diag(W_diag)
    return _intervals(ftilde_values, W_diag, gamma, n, m)


# -- reports ------------------------------------------------------------------

def uq_report(theta_hat, approx: CovarianceApprox, cis: ConfidenceIntervals, extra: dict | None = None) -> dict:
    V = approx.V
    try:
        R = estimator_correlation(V).tolist()
    except ZeroVariance:
        R = None
    out = {
        "theta_hat": [float(v) for v in theta_hat],
        "parameter_names": list(_names(len(theta_hat))),
        "sigma2_hat": float(approx.sigma2),
        "sigma2_source": approx.sigma2_source,
        "kind": approx.kind,
        "usable": bool(approx.usable),
        "V": V.tolist(),
        "correlation": R,
        "cis": {"gamma": cis.gamma, "dof": int(cis.dof), "multiplier": float(cis.multiplier),
                "half_widths": [float(h) for h in cis.half_widths],
                "relative_half_widths": [float(h / abs(c)) if c != 0 else None
                                         for h, c in zip(cis.half_widths, cis.centers)]},
    }
    if extra:
        out.update(extra)
    return out


def write_output_cis(path, points, cis: ConfidenceIntervals) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tracer", "x", "y", "z", "month", "center", "half_width"])
        for (tr, x, y, z, mo), c, h in zip(points, cis.centers, cis.half_widths):
            w.writerow([tr, x, y, z, mo, repr(float(c)), repr(float(h))])


def dump_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=False)
        fh.write("\n")
