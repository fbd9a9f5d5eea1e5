"""Finite-difference derivatives of model outputs and of the objective.

First derivatives use central differences with step ``eps**(1/3)`` times
the typical parameter magnitude, second derivatives the three-point and
four-point cross stencils with step ``eps**(1/4)`` times the magnitude.
Steps are adjusted so that ``theta + h`` is exactly representable.

Perturbed model spin-ups start from the periodic state of the unperturbed
parameters (warm start), which makes a derivative far cheaper than a
cold spin-up.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

EPS = np.finfo(float).eps
H_FIRST = EPS ** (1.0 / 3.0)
H_SECOND = EPS ** (1.0 / 4.0)
MAGNITUDE_FLOOR = 1e-3
WARM_MAX_YEARS = 500


class ModelFailure(RuntimeError):
    """A model evaluation failed; carries the parameters and, for derivatives, the index."""

    def __init__(self, message: str, theta=None, index: int | None = None):
        self.theta = None if theta is None else np.asarray(theta, dtype=float)
        self.index = index
        super().__init__(message)


@dataclass(frozen=True)
class FdScheme:
    order: str = "first_central"

    def __post_init__(self):
        if self.order not in ("first_central", "second"):
            raise ValueError(f"unknown finite-difference scheme {self.order!r}")

    @property
    def constant(self) -> float:
        return H_FIRST if self.order == "first_central" else H_SECOND


FIRST = FdScheme("first_central")
SECOND = FdScheme("second")


def typical_magnitude(theta, lower=None, floor: float = MAGNITUDE_FLOOR) -> np.ndarray:
    """max(|theta_i|, |lower_i|, floor) per component."""
    mag = np.abs(np.asarray(theta, dtype=float))
    if lower is not None:
        mag = np.maximum(mag, np.abs(np.asarray(lower, dtype=float)))
    return np.maximum(mag, floor)


def fd_step(theta_i: float, typical_magnitude: float, scheme: FdScheme = FIRST) -> float:
    """Step ``constant * typical_magnitude`` rounded so (theta_i + h) - theta_i == h."""
    if typical_magnitude <= 0:
        raise ValueError("typical magnitude must be positive")
    h = scheme.constant * typical_magnitude
    temp = theta_i + h
    return temp - theta_i


def _safe_eval(fun, x, index=None):
    try:
        out = np.asarray(fun(x), dtype=float)
    except ModelFailure:
        raise
    except Exception as exc:  # surfaced with the offending parameters
        raise ModelFailure(f"model evaluation failed: {exc}", theta=x, index=index) from exc
    if not np.all(np.isfinite(out)):
        raise ModelFailure("model returned non-finite values", theta=x, index=index)
    return out


def jacobian(fun, theta, lower=None, upper=None, steps=None, center=None, full_output=False, map_fn=None):
    """Central-difference Jacobian of ``fun`` at ``theta``.

    Column ``i`` is ``(f(theta + h_i e_i) - f(theta - h_i e_i)) / (2 h_i)``.
    If a perturbation would leave the box ``[lower, upper]`` the column falls
    back to a one-sided quotient (first-order accurate); such columns are
    reported in ``info["one_sided"]`` when ``full_output`` is set.
    ``center`` may pass an already known ``fun(theta)``.  ``map_fn(g, items)``
    may replace the builtin ``map`` for the perturbed evaluations, e.g. a
    thread pool's ``map``; results must come back in order.
    """
    theta = np.asarray(theta, dtype=float)
    m = theta.size
    if steps is None:
        mag = typical_magnitude(theta, lower)
        steps = np.array([fd_step(theta[i], mag[i]) for i in range(m)])
    steps = np.asarray(steps, dtype=float)
    f0 = None if center is None else np.asarray(center, dtype=float)
    plan = []  # (i, up or None, dn or None)
    for i in range(m):
        h = steps[i]
        up = theta.copy()
        up[i] += h
        dn = theta.copy()
        dn[i] -= h
        hi_ok = upper is None or up[i] <= upper[i]
        lo_ok = lower is None or dn[i] >= lower[i]
        if hi_ok and lo_ok:
            plan.append((i, up, dn))
        elif hi_ok:
            plan.append((i, up, None))
        else:
            plan.append((i, None, dn))
    one_sided = [up is None or dn is None for _, up, dn in plan]
    n_evals = 0
    if f0 is None and any(one_sided):
        f0 = _safe_eval(fun, theta)
        n_evals += 1
    points = [(x, i) for i, up, dn in plan for x in (up, dn) if x is not None]
    values = list((map_fn or map)(lambda item: _safe_eval(fun, item[0], item[1]), points))
    n_evals += len(points)
    columns = []
    k = 0
    for i, up, dn in plan:
        fp = fm = None
        if up is not None:
            fp = values[k]
            k += 1
        if dn is not None:
            fm = values[k]
            k += 1
        if fp is not None and fm is not None:
            columns.append((fp - fm) / (up[i] - dn[i]))
        elif fp is not None:
            columns.append((fp - f0) / (up[i] - theta[i]))
        else:
            columns.append((f0 - fm) / (theta[i] - dn[i]))
    J = np.column_stack(columns) if columns else np.zeros((0, 0))
    if J.ndim == 1:
        J = J[:, None]
    if full_output:
        return J, {"one_sided": one_sided, "steps": steps, "n_evals": n_evals}
    return J


def gradient(fun, theta, lower=None, upper=None, steps=None, full_output=False):
    """Central-difference gradient of a scalar function."""
    res = jacobian(lambda x: np.atleast_1d(fun(x)), theta, lower, upper, steps, full_output=full_output)
    if full_output:
        J, info = res
        return J[0], info
    return res[0]


def hessian(fun, theta, lower=None, upper=None, steps=None, full_output=False):
    """Second-order finite-difference Hessian of a scalar function.

    Diagonal entries use ``(f(x+h) - 2 f(x) + f(x-h)) / h^2``, off-diagonal
    entries the four-point cross stencil with the same steps, so the budget
    is ``1 + 2m + 2m(m-1)`` evaluations.  A coordinate closer than ``2h``
    to a bound has its stencil center shifted inward.  The result is
    symmetrized.
    """
    theta = np.asarray(theta, dtype=float)
    m = theta.size
    if steps is None:
        mag = typical_magnitude(theta, lower)
        steps = np.array([fd_step(theta[i], mag[i], SECOND) for i in range(m)])
    steps = np.asarray(steps, dtype=float)
    x0 = theta.copy()
    shifted = np.zeros(m, dtype=bool)
    for i in range(m):
        lo = None if lower is None else lower[i] + 2 * steps[i]
        hi = None if upper is None else upper[i] - 2 * steps[i]
        if lo is not None and x0[i] < lo:
            x0[i] = lo
            shifted[i] = True
        if hi is not None and x0[i] > hi:
            x0[i] = hi
            shifted[i] = True

    def f(x):
        val = _safe_eval(lambda z: np.atleast_1d(fun(z)), x)
        return float(val[0])

    f0 = f(x0)
    n_evals = 1
    plus = np.empty(m)
    minus = np.empty(m)
    for i in range(m):
        e = np.zeros(m)
        e[i] = steps[i]
        plus[i] = f(x0 + e)
        minus[i] = f(x0 - e)
        n_evals += 2
    H = np.empty((m, m))
    for i in range(m):
        H[i, i] = (plus[i] - 2.0 * f0 + minus[i]) / steps[i] ** 2
        for j in range(i + 1, m):
            ei = np.zeros(m)
            ei[i] = steps[i]
            ej = np.zeros(m)
            ej[j] = steps[j]
            fpp = f(x0 + ei + ej)
            fpm = f(x0 + ei - ej)
            fmp = f(x0 - ei + ej)
            fmm = f(x0 - ei - ej)
            n_evals += 4
            H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * steps[i] * steps[j])
    H = 0.5 * (H + H.T)
    if full_output:
        return H, {"shifted": shifted.tolist(), "steps": steps, "n_evals": n_evals, "center": x0}
    return H


def hessian_phi(phi, theta, lower=None, upper=None, steps=None, full_output=False):
    """Hessian of ``phi / 2``, the matrix entering the covariance approximations."""
    res = hessian(phi, theta, lower, upper, steps, full_output=full_output)
    if full_output:
        return 0.5 * res[0], res[1]
    return 0.5 * res


@dataclass
class WarmStartResult:
    outputs: np.ndarray
    run: object
    not_periodic: bool


def warm_started_evaluate(model, theta, base_run, selector=None, max_years: int = WARM_MAX_YEARS,
                          tol: float | None = None, rtol: float | None = None) -> WarmStartResult:
    """Spin ``model`` up at ``theta`` starting from the periodic ``base_run`` state.

    The start state is shifted to the volume mean ``theta[p_mean]`` first.
    Hitting ``max_years`` is not fatal: the outputs are returned with
    ``not_periodic`` set and a warning logged.
    """
    theta = np.asarray(theta, dtype=float)
    start = model.rescale_to_mean(base_run.state, theta[7])
    try:
        run = model.spin_up(theta, initial=start, tol=tol, max_years=max_years,
                            raise_on_fail=False, rtol=rtol)
    except Exception as exc:
        raise ModelFailure(f"warm-started spin-up failed: {exc}", theta=theta) from exc
    if not run.converged:
        log.warning("warm-started spin-up hit %d-year cap (residual %.3e)", max_years, run.residual)
    outputs = run.monthly if selector is None else _select(run.monthly, selector)
    return WarmStartResult(outputs=outputs, run=run, not_periodic=not run.converged)


def _select(monthly, selector):
    from .biogeomodel.model import model_outputs

    return model_outputs(monthly, selector)
