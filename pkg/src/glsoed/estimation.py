"""Glue between measurements, objective, optimizer and uncertainty analysis."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import derivatives, uq
from .measurements import CovarianceModel, MeasurementSet
from .objective import ScaledObjective
from .optimizer import DEFAULT_CONFIG, AllSolvesFailed, minimize_objective, multistart_minimize
from .parameters import DEFAULT_BOUNDS, ParameterBounds

log = logging.getLogger(__name__)


@dataclass
class EstimationProblem:
    """Everything needed to fit parameters to a measurement set.

    ``make_provider(points)`` returns a model-output provider for the given
    (tracer, x, y, z, month) points.
    """

    make_provider: object
    bounds: ParameterBounds = DEFAULT_BOUNDS
    estimator: str = "gls"
    optimizer: dict = field(default_factory=lambda: dict(DEFAULT_CONFIG))
    covariance: CovarianceModel | None = None

    def covariance_for(self, mset: MeasurementSet) -> CovarianceModel:
        if self.covariance is not None and self.covariance.n == mset.n:
            return self.covariance
        return CovarianceModel.from_measurements(mset, self.estimator)

    def objective(self, mset: MeasurementSet, theta0=None, covariance=None) -> ScaledObjective:
        cov = covariance or self.covariance_for(mset)
        provider = self.make_provider(mset.points())
        return ScaledObjective(cov, mset.values, provider, self.bounds, theta0)


@dataclass
class EstimateResult:
    theta_hat: np.ndarray
    phi: float
    phi_per_n: float
    n: int
    minima: list
    n_evals: int
    n_gradients: int
    converged: bool
    state: object = None


def estimate(problem: EstimationProblem, mset: MeasurementSet, start=None, multistart: bool = True,
             objective: ScaledObjective | None = None) -> EstimateResult:
    """Minimize phi over the parameter box.

    With ``multistart`` the multistart driver runs with the problem's
    optimizer config; otherwise a single local solve starts at ``start``.
    """
    obj = objective or problem.objective(mset, theta0=start)
    cfg = dict(DEFAULT_CONFIG)
    cfg.update(problem.optimizer or {})
    if multistart:
        state = multistart_minimize(problem.bounds, obj, cfg)
        best = state.best
        minima = state.found_minima
    else:
        state = None
        try:
            best = minimize_objective(obj, obj.theta0 if start is None else start,
                                      max_iter=int(cfg["max_local_iters"]),
                                      gauss_newton=bool(cfg.get("gauss_newton")), raise_on_max_iter=False)
        except derivatives.ModelFailure as exc:
            raise AllSolvesFailed(f"local solve failed: {exc}") from exc
        minima = [best]
    return EstimateResult(theta_hat=np.asarray(best.theta_star), phi=float(best.phi_star),
                          phi_per_n=float(best.phi_star) / obj.n, n=obj.n, minima=minima,
                          n_evals=obj.n_evals, n_gradients=obj.n_gradients, converged=bool(best.converged),
                          state=state)


def build_bundle(objective: ScaledObjective, theta_hat, with_hessian: bool = True) -> uq.FisherBundle:
    """Fisher bundle at ``theta_hat``; H is the FD Hessian of phi / 2."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    f, J = objective.jacobian(theta_hat)
    r = objective.data - f
    phi = objective.covariance.quadratic_form(r)
    H = None
    if with_hessian:
        H = derivatives.hessian_phi(objective.evaluate_phi, theta_hat, objective.bounds.lower,
                                    objective.bounds.upper)
    return uq.fisher_bundle(J, objective.covariance, r, phi, H=H, theta_hat=theta_hat)
