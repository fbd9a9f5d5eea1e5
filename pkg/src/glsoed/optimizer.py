"""Bound-constrained minimization: projected BFGS plus multistart.

The local solver works on a box, follows quasi-Newton directions on the
free variables, projects trial points back into the box and accepts them
by an Armijo test along the projected path.  The multistart driver samples
start points by Latin hypercube, discards those with poor objective values
or lying close to minima already found, and runs local solves from the
rest in order of merit.

Both work in the scaled coordinates of the objective, where every
parameter ranges over [-1, 1].
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .derivatives import ModelFailure
from .numstat import NotPositiveDefinite, spd_inverse

log = logging.getLogger(__name__)

GTOL = 1e-6
XTOL = 1e-10
MAX_ITER = 200
ARMIJO_C1 = 1e-4
CURVATURE_MIN = 1e-10
MAX_BACKTRACKS = 40
SAME_MINIMUM = 1e-4

DEFAULT_CONFIG = {"n_start": 40, "filter_radius": 0.1, "max_local_iters": MAX_ITER, "seed": 12345,
                  "merit_quantile": 0.5, "include_initial": True, "max_local_solves": None}


class MaxIterations(RuntimeError):
    """Iteration budget exhausted; ``result`` holds the best point reached."""

    def __init__(self, result):
        self.result = result
        super().__init__(f"no convergence within {result.iterations} iterations "
                         f"(projected gradient {result.gradient_norm:.3e})")


@dataclass
class LocalSolveResult:
    theta_star: np.ndarray
    phi_star: float
    iterations: int
    converged: bool
    gradient_norm: float
    start: np.ndarray | None = None
    phi_start: float = float("nan")
    n_evals: int = 0
    n_gradients: int = 0
    reason: str = ""
    history: list = field(default_factory=list)


def projected_gradient(x, g, lower, upper):
    return x - np.clip(x - g, lower, upper)


def local_minimize(start, fun, fun_grad, lower, upper, max_iter: int = MAX_ITER, gtol: float = GTOL,
                   xtol: float = XTOL, hessian0=None, raise_on_max_iter: bool = True) -> LocalSolveResult:
    """Projected BFGS on the box ``[lower, upper]``.

    ``fun(x)`` returns the objective, ``fun_grad(x)`` returns ``(f, g)``.
    ``hessian0`` optionally seeds the quasi-Newton matrix (otherwise the
    identity, rescaled after the first step).  Converged when the
    infinity norm of the projected gradient is at most ``gtol`` or an
    accepted step is at most ``xtol``.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    x = np.clip(np.asarray(start, dtype=float), lower, upper)
    m = x.size
    n_evals = 0
    f, g = fun_grad(x)
    n_grads = 1
    f_start = f
    # the Hessian approximation itself is kept (not its inverse) so that the
    # step on the free variables solves the free block exactly
    B = np.eye(m)
    rescale = True
    if hessian0 is not None:
        B0 = np.asarray(hessian0, dtype=float)
        B0 = 0.5 * (B0 + B0.T) + 1e-8 * max(float(np.max(np.diag(B0))), 1e-300) * np.eye(m)
        try:
            spd_inverse(B0)
            B = B0
            rescale = False
        except NotPositiveDefinite:
            log.info("initial Hessian not positive definite, starting from identity")
    history = [float(f)]
    reason = "max_iter"
    converged = False
    it = 0
    bound_eps = 1e-12
    while True:
        pg = projected_gradient(x, g, lower, upper)
        gnorm = float(np.max(np.abs(pg))) if m else 0.0
        if gnorm <= gtol:
            converged, reason = True, "gradient"
            break
        if it >= max_iter:
            break
        it += 1
        active = ((x <= lower + bound_eps) & (g > 0)) | ((x >= upper - bound_eps) & (g < 0))
        free = ~active
        d = np.zeros(m)
        steepest = False
        try:
            d[free] = -spd_inverse(B[np.ix_(free, free)]) @ g[free]
        except NotPositiveDefinite:
            d[free] = -g[free]
            steepest = True
        if not g @ d < 0:
            d = np.where(free, -g, 0.0)
            steepest = True
        # Armijo backtracking along the projected path
        alpha = 1.0
        accepted = False
        x_new = x
        f_new = f
        for _ in range(MAX_BACKTRACKS):
            trial = np.clip(x + alpha * d, lower, upper)
            step = trial - x
            if np.max(np.abs(step)) <= xtol:
                break
            try:
                f_trial = fun(trial)
                n_evals += 1
            except ModelFailure as exc:
                log.info("model failure in line search (%s), halving step", exc)
                alpha *= 0.5
                continue
            if np.isfinite(f_trial) and f_trial <= f + ARMIJO_C1 * (g @ step):
                accepted = True
                x_new, f_new = trial, f_trial
                break
            alpha *= 0.5
        if not accepted:
            if not steepest and not np.array_equal(B, np.eye(m)):
                # quasi-Newton direction failed; restart from steepest descent
                log.debug("iteration %d: line search failed, resetting quasi-Newton matrix", it)
                B = np.eye(m)
                rescale = True
                continue
            converged, reason = True, "step"
            break
        s = x_new - x
        try:
            _, g_new = fun_grad(x_new)
            n_grads += 1
        except ModelFailure as exc:
            log.warning("gradient failed at accepted point: %s", exc)
            reason = "model_failure"
            break
        y = g_new - g
        sy = float(s @ y)
        if sy > CURVATURE_MIN:
            if rescale:
                B = (float(y @ y) / sy) * np.eye(m)
                rescale = False
            Bs = B @ s
            B = B + np.outer(y, y) / sy - np.outer(Bs, Bs) / float(s @ Bs)
            B = 0.5 * (B + B.T)
        x, f, g = x_new, f_new, g_new
        history.append(float(f))
        log.debug("iteration %d: f=%.10g |pg|=%.3g step=%.3g", it, f, gnorm, float(np.max(np.abs(s))))
        if np.max(np.abs(s)) <= xtol:
            converged, reason = True, "step"
            break
    pg = projected_gradient(x, g, lower, upper)
    result = LocalSolveResult(theta_star=x, phi_star=float(f), iterations=it, converged=converged,
                              gradient_norm=float(np.max(np.abs(pg))) if m else 0.0,
                              start=np.asarray(start, dtype=float), phi_start=float(f_start),
                              n_evals=n_evals, n_gradients=n_grads, reason=reason, history=history)
    if not converged and raise_on_max_iter and reason == "max_iter":
        raise MaxIterations(result)
    return result


# -- objectives in scaled coordinates ----------------------------------------

class FunctionObjective:
    """Adapter giving a plain function the scaled interface the optimizers use.

    ``fun(theta)`` is minimized over ``[lower, upper]``; without ``grad``
    the gradient is taken by central differences.
    """

    def __init__(self, fun, lower, upper, grad=None, initial=None):
        self.fun = fun
        self.grad = grad
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.initial = None if initial is None else np.asarray(initial, dtype=float)
        self.phi0 = 1.0
        self.n_evals = 0
        self.n_gradients = 0

    @property
    def half_width(self):
        return 0.5 * (self.upper - self.lower)

    def to_theta(self, s):
        return np.clip(self.lower + (np.asarray(s) + 1.0) * self.half_width, self.lower, self.upper)

    def to_scaled(self, theta):
        return (np.asarray(theta, dtype=float) - self.lower) / self.half_width - 1.0

    def scaled_fun(self, s):
        self.n_evals += 1
        return float(self.fun(self.to_theta(s)))

    def scaled_grad(self, s):
        from .derivatives import gradient

        theta = self.to_theta(s)
        self.n_evals += 1
        self.n_gradients += 1
        f = float(self.fun(theta))
        if self.grad is not None:
            g = np.asarray(self.grad(theta), dtype=float)
        else:
            g = gradient(self.fun, theta, self.lower, self.upper)
        return f, g * self.half_width


def _objective_interface(objective):
    """(m, to_theta, to_scaled, initial_scaled) for either objective flavor."""
    from .objective import ScaledObjective, scale_parameters, unscale_parameters

    if isinstance(objective, ScaledObjective):
        b = objective.bounds
        return (b.m, lambda s: unscale_parameters(s, b), lambda t: scale_parameters(t, b),
                scale_parameters(objective.theta0, b))
    init = None if objective.initial is None else objective.to_scaled(objective.initial)
    return objective.lower.size, objective.to_theta, objective.to_scaled, init


def minimize_objective(objective, start_theta, max_iter: int = MAX_ITER, gauss_newton: bool = False,
                       raise_on_max_iter: bool = True) -> LocalSolveResult:
    """Local solve on an objective exposing ``scaled_fun``/``scaled_grad``.

    The result reports ``theta_star`` in parameter units and ``phi_star``
    unscaled.
    """
    m, to_theta, to_scaled, _ = _objective_interface(objective)
    s0 = to_scaled(start_theta)
    H0 = objective.gauss_newton_scaled(s0) if gauss_newton and hasattr(objective, "gauss_newton_scaled") else None
    res = local_minimize(s0, objective.scaled_fun, objective.scaled_grad, -np.ones(m), np.ones(m),
                         max_iter=max_iter, hessian0=H0, raise_on_max_iter=False)
    res = _to_units(res, to_theta, objective.phi0)
    if raise_on_max_iter and res.reason == "max_iter":
        raise MaxIterations(res)
    return res


def _to_units(res: LocalSolveResult, to_theta, phi0) -> LocalSolveResult:
    res.scaled_star = res.theta_star
    res.theta_star = to_theta(res.theta_star)
    res.start = to_theta(res.start)
    res.phi_star *= phi0
    res.phi_start *= phi0
    res.history = [h * phi0 for h in res.history]
    return res


# -- multistart ---------------------------------------------------------------

@dataclass
class MultistartState:
    start_points: list
    found_minima: list = field(default_factory=list)
    removed: int = 0
    removed_merit: int = 0
    removed_distance: int = 0
    removed_budget: int = 0
    failed: int = 0
    start_values: list = field(default_factory=list)
    n_start_evals: int = 0
    found_minima_all: list = field(default_factory=list)

    @property
    def best(self) -> LocalSolveResult:
        if not self.found_minima:
            raise RuntimeError("no local minimum found")
        return self.found_minima[0]

    @property
    def n_evals(self) -> int:
        return self.n_start_evals + sum(r.n_evals + r.n_gradients for r in self.found_minima_all)


class AllSolvesFailed(RuntimeError):
    """Every local solve of a multistart run failed."""


def latin_hypercube(n: int, m: int, seed: int) -> np.ndarray:
    """``n`` Latin hypercube points in [-1, 1]^m."""
    sample = qmc.LatinHypercube(d=m, seed=np.random.default_rng(seed)).random(n)
    return 2.0 * sample - 1.0


def multistart_minimize(bounds, objective, config: dict | None = None) -> MultistartState:
    """Multistart search over the scaled box.

    ``bounds`` is accepted for interface symmetry; the box is the one the
    objective scales by.  Start points are the initial guess (when
    ``include_initial``) followed by ``n_start`` Latin hypercube points.
    Sampled points above the ``merit_quantile`` of sampled values are
    dropped (the initial guess is exempt); the rest are solved in order of
    increasing value, skipping any within ``filter_radius`` of a minimum
    found earlier.  Minima closer than 1e-4 are merged.
    """
    cfg = dict(DEFAULT_CONFIG)
    cfg.update(config or {})
    m, to_theta, to_scaled, init = _objective_interface(objective)
    phi0 = objective.phi0
    pts = latin_hypercube(int(cfg["n_start"]), m, int(cfg["seed"])) if cfg["n_start"] > 0 else np.zeros((0, m))
    starts = list(pts)
    if cfg["include_initial"] and init is not None:
        starts.insert(0, np.asarray(init, dtype=float))
    state = MultistartState(start_points=[to_theta(p) for p in starts])
    values = []
    for p in starts:
        try:
            values.append(objective.scaled_fun(p))
        except ModelFailure as exc:
            log.info("start point evaluation failed: %s", exc)
            values.append(np.inf)
        state.n_start_evals += 1
    values = np.asarray(values)
    state.start_values = [float(v * phi0) for v in values]
    exempt = 1 if (cfg["include_initial"] and init is not None) else 0
    sampled = values[exempt:]
    finite = sampled[np.isfinite(sampled)]
    threshold = np.quantile(finite, cfg["merit_quantile"]) if finite.size else np.inf
    order = [0] if exempt else []
    keep = [exempt + k for k in np.argsort(sampled, kind="stable") if sampled[k] <= threshold]
    state.removed_merit = len(sampled) - len(keep)
    order += keep
    lower, upper = -np.ones(m), np.ones(m)
    found: list[LocalSolveResult] = []
    radius = float(cfg["filter_radius"])
    max_solves = cfg.get("max_local_solves")
    n_solves = 0
    for k in order:
        p = starts[k]
        if any(np.linalg.norm(p - r.scaled_star) <= radius for r in found):
            state.removed_distance += 1
            continue
        if max_solves is not None and n_solves >= max_solves:
            state.removed_budget += 1
            continue
        n_solves += 1
        H0 = None
        if cfg.get("gauss_newton") and hasattr(objective, "gauss_newton_scaled"):
            try:
                H0 = objective.gauss_newton_scaled(p)
            except ModelFailure:
                H0 = None
        try:
            res = local_minimize(p, objective.scaled_fun, objective.scaled_grad, lower, upper,
                                 max_iter=int(cfg["max_local_iters"]), hessian0=H0,
                                 raise_on_max_iter=False)
        except ModelFailure as exc:
            log.warning("local solve from start %d failed: %s", k, exc)
            state.failed += 1
            continue
        res = _to_units(res, to_theta, phi0)
        state.found_minima_all.append(res)
        log.info("local solve %d: phi=%.6g after %d iterations (%s)", k, res.phi_star, res.iterations, res.reason)
        dup = next((r for r in found if np.linalg.norm(r.scaled_star - res.scaled_star) <= SAME_MINIMUM), None)
        if dup is None:
            found.append(res)
        elif res.phi_star < dup.phi_star:
            found[found.index(dup)] = res
    state.removed = state.removed_merit + state.removed_distance + state.removed_budget
    if not found:
        raise AllSolvesFailed("every local solve failed")
    state.found_minima = sorted(found, key=lambda r: r.phi_star)
    return state
