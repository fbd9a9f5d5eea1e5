"""Model-output provider f(theta) for estimation and uncertainty work.

Spin-ups are warm-started from the most recently computed periodic state,
shifted to the requested mean phosphorus concentration.  Finite-difference
perturbations spin up from the periodic state of the unperturbed
parameters.  Derivative work needs a much tighter periodicity tolerance
than plain simulation: a perturbation of relative size 1e-5 changes the
periodic state by about that much, so the spin-up error must stay well
below it.
"""
from __future__ import annotations

import logging
import threading
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .. import derivatives
from ..derivatives import ModelFailure
from .model import BiogeoModel, NotPeriodic, NonFinite, OutputSelector, SpinUpResult, model_outputs

log = logging.getLogger(__name__)

FD_TOL = 1e-11


class BiogeoProvider:
    """Callable ``theta -> outputs at the selector points`` with a Jacobian method."""

    def __init__(self, model: BiogeoModel, selector: OutputSelector, tol: float = FD_TOL,
                 warm_max_years: int | None = None, cache_size: int = 4, threads: int = 1):
        self.model = model
        self.selector = selector
        self.tol = tol
        self.warm_max_years = model.config.warm_max_years if warm_max_years is None else warm_max_years
        self.cache_size = cache_size
        # perturbed spin-ups of one Jacobian are independent; the kernel releases the GIL
        self.threads = max(1, int(threads))
        self._lock = threading.Lock()
        self._cache: OrderedDict = OrderedDict()
        self.years_simulated = 0
        self.n_spinups = 0
        self.last_jacobian_info: dict = {}

    def run(self, theta) -> SpinUpResult:
        """Periodic solution at ``theta``, warm-started from the latest cached one."""
        theta = np.asarray(theta, dtype=float)
        key = theta.tobytes()
        if key in self._cache:
            self._cache.move_to_end(key)
            return self._cache[key]
        initial = None
        if self._cache:
            latest = next(reversed(self._cache.values()))
            initial = self.model.rescale_to_mean(latest.state, theta[7])
        try:
            result = self.model.spin_up(theta, initial=initial, tol=self.tol)
        except (NotPeriodic, NonFinite) as exc:
            raise ModelFailure(f"spin-up failed: {exc}", theta=theta) from exc
        self.years_simulated += result.years
        self.n_spinups += 1
        self._cache[key] = result
        while len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return result

    def __call__(self, theta) -> np.ndarray:
        return model_outputs(self.run(theta).monthly, self.selector)

    def jacobian(self, theta, lower=None, upper=None):
        """(outputs, J) by central differences with warm-started perturbed spin-ups."""
        theta = np.asarray(theta, dtype=float)
        base = self.run(theta)
        flags = []
        years = []

        def perturbed(x):
            res = derivatives.warm_started_evaluate(self.model, x, base, self.selector,
                                                    max_years=self.warm_max_years, tol=self.tol)
            with self._lock:
                self.years_simulated += res.run.years
                self.n_spinups += 1
                flags.append(res.not_periodic)
                years.append(res.run.years)
            return res.outputs

        f0 = model_outputs(base.monthly, self.selector)
        if self.threads > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                J, info = derivatives.jacobian(perturbed, theta, lower, upper, center=f0, full_output=True,
                                               map_fn=pool.map)
        else:
            J, info = derivatives.jacobian(perturbed, theta, lower, upper, center=f0, full_output=True)
        info.update(not_periodic=any(flags), warm_years=years)
        self.last_jacobian_info = info
        return f0, J
