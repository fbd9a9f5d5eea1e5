"""Generalized least squares objective with parameter and value scaling.

``phi(theta) = r^T C^{-1} r`` with ``r = y - f(theta)`` is evaluated as
``psi^T psi`` where ``psi = D^{-1/2} L^{-1} S^{-1} r``; the factorization of
the correlation matrix is done once when the covariance model is built.
Optimizers see parameters mapped affinely onto [-1, 1] and the objective
divided by its value at the initial guess.
"""
from __future__ import annotations

import numpy as np

from . import derivatives
from .derivatives import ModelFailure
from .measurements import CovarianceModel
from .parameters import DEFAULT_BOUNDS, PARAMETER_NAMES, OutOfBounds, ParameterBounds

__all__ = [
    "ScaledObjective", "ModelFailure", "OutOfBounds", "ParameterBounds", "PARAMETER_NAMES",
    "scale_parameters", "unscale_parameters", "evaluate_phi",
]


def scale_parameters(theta, bounds: ParameterBounds) -> np.ndarray:
    """Map ``theta`` in ``[lower, upper]`` to ``[-1, 1]``."""
    theta = np.asarray(theta, dtype=float)
    if not bounds.contains(theta):
        raise OutOfBounds(f"theta outside bounds: {theta.tolist()}")
    return 2.0 * (theta - bounds.lower) / (bounds.upper - bounds.lower) - 1.0


def unscale_parameters(s, bounds: ParameterBounds) -> np.ndarray:
    """Inverse of :func:`scale_parameters`; the result is clipped into the box."""
    s = np.asarray(s, dtype=float)
    theta = bounds.lower + 0.5 * (s + 1.0) * (bounds.upper - bounds.lower)
    return np.clip(theta, bounds.lower, bounds.upper)


def evaluate_phi(residual, covariance: CovarianceModel) -> float:
    """``r^T C^{-1} r`` through the whitened residual."""
    return covariance.quadratic_form(residual)


class ScaledObjective:
    """phi for fixed data and covariance, with a model provider ``f(theta)``.

    The provider is a callable returning the model outputs at the
    measurement points.  If it also has ``jacobian(theta, lower, upper)``
    returning ``(outputs, J)``, gradients use it; otherwise central
    differences of the provider are taken.
    """

    def __init__(self, covariance: CovarianceModel, data, model, bounds: ParameterBounds = DEFAULT_BOUNDS,
                 theta0=None):
        self.covariance = covariance
        self.data = np.asarray(data, dtype=float)
        if self.data.shape != (covariance.n,):
            raise ValueError("data length does not match the covariance model")
        self.model = model
        self.bounds = bounds
        self.theta0 = bounds.initial if theta0 is None else np.asarray(theta0, dtype=float)
        self.n_evals = 0
        self.n_gradients = 0
        self._last_jacobian = None
        self.phi0 = self.evaluate_phi(self.theta0)
        if not self.phi0 > 0:
            raise ValueError("objective is zero at the initial guess; cannot scale by it")

    @property
    def n(self) -> int:
        return self.data.size

    @property
    def m(self) -> int:
        return self.bounds.m

    def outputs(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if not self.bounds.contains(theta, atol=1e-12):
            raise OutOfBounds(f"theta outside bounds: {theta.tolist()}")
        try:
            f = np.asarray(self.model(theta), dtype=float)
        except ModelFailure:
            raise
        except Exception as exc:
            raise ModelFailure(f"model evaluation failed: {exc}", theta=theta) from exc
        if f.shape != self.data.shape:
            raise ValueError(f"model returned {f.shape[0]} outputs for {self.n} measurements")
        return f

    def residual(self, theta) -> np.ndarray:
        return self.data - self.outputs(theta)

    def evaluate_phi(self, theta) -> float:
        self.n_evals += 1
        return evaluate_phi(self.residual(theta), self.covariance)

    def scaled_value(self, theta) -> float:
        return self.evaluate_phi(theta) / self.phi0

    def per_measurement(self, phi: float) -> float:
        """phi / n, the normalization used for reporting."""
        return phi / self.n

    def jacobian(self, theta):
        """(outputs, J) of the model at ``theta``."""
        theta = np.asarray(theta, dtype=float)
        key = theta.tobytes()
        if self._last_jacobian is not None and self._last_jacobian[0] == key:
            return self._last_jacobian[1], self._last_jacobian[2]
        self.n_gradients += 1
        if hasattr(self.model, "jacobian"):
            f, J = self.model.jacobian(theta, self.bounds.lower, self.bounds.upper)
            f, J = np.asarray(f, dtype=float), np.asarray(J, dtype=float)
        else:
            f = self.outputs(theta)
            J = derivatives.jacobian(self.outputs, theta, self.bounds.lower, self.bounds.upper, center=f)
        self._last_jacobian = (key, f, J)
        return f, J

    def value_and_gradient(self, theta):
        """phi and its gradient ``-2 J^T C^{-1} (y - f)``."""
        f, J = self.jacobian(theta)
        r = self.data - f
        psi = self.covariance.whiten(r)
        Jw = self.covariance.whiten(J)
        return float(psi @ psi), -2.0 * (Jw.T @ psi), J

    # scaled-space wrappers used by the optimizer
    def _theta(self, s):
        return unscale_parameters(s, self.bounds)

    def scaled_fun(self, s) -> float:
        return self.evaluate_phi(self._theta(s)) / self.phi0

    def scaled_grad(self, s):
        """Value and gradient of phi / phi0 with respect to scaled parameters."""
        phi, g, _ = self.value_and_gradient(self._theta(s))
        half_width = 0.5 * (self.bounds.upper - self.bounds.lower)
        return phi / self.phi0, g * half_width / self.phi0

    def gauss_newton_scaled(self, s) -> np.ndarray:
        """Gauss-Newton Hessian ``2 J^T C^{-1} J`` in scaled coordinates."""
        _, J = self.jacobian(self._theta(s))
        Jw = self.covariance.whiten(J) * (0.5 * (self.bounds.upper - self.bounds.lower))
        return 2.0 * (Jw.T @ Jw) / self.phi0
