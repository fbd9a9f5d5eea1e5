"""Spin-up of the PO4/DOP model to an annually periodic state."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import sms
from .forcing import Forcing, make_forcing
from .grid import Grid, OutOfGrid, default_grid
from .kernel import run_year
from .transport import MONTHS, TransportSet, synth_transports

log = logging.getLogger(__name__)

TRACERS = ("PO4", "DOP")
TRACER_INDEX = {name: k for k, name in enumerate(TRACERS)}


class NotPeriodic(RuntimeError):
    """Spin-up hit its year cap before the periodicity tolerance."""

    def __init__(self, residual: float, years: int, run=None):
        self.residual = residual
        self.years = years
        self.run = run
        super().__init__(f"not periodic after {years} years (residual {residual:.3e})")


class NonFinite(FloatingPointError):
    """A concentration became NaN or infinite during stepping."""


@dataclass(frozen=True)
class TracerState:
    """PO4 and DOP concentrations (mmol m^-3) over the wet cells."""

    values: np.ndarray  # (2, n_wet)

    @property
    def po4(self) -> np.ndarray:
        return self.values[0]

    @property
    def dop(self) -> np.ndarray:
        return self.values[1]

    def total_mean(self, volume: np.ndarray) -> float:
        """Volume-weighted mean of PO4 + DOP."""
        return float(np.sum((self.values[0] + self.values[1]) * volume) / np.sum(volume))


@dataclass
class SpinUpResult:
    state: TracerState
    monthly: np.ndarray  # (12, 2, n_wet) month means of the last simulated year
    years: int
    residuals: list = field(default_factory=list)
    converged: bool = True

    @property
    def residual(self) -> float:
        return self.residuals[-1] if self.residuals else float("nan")


@dataclass(frozen=True)
class ModelConfig:
    dt: float = 1.0 / 2880.0
    tol: float = 1e-7
    max_years: int = 3000
    warm_max_years: int = 500
    seed: int = 0
    diffusivity: float = 1.0
    circulation_strength: float = 10.0
    q_sw_peak: float = 1000.0

    @property
    def steps_per_year(self) -> int:
        return int(round(1.0 / self.dt))

    @classmethod
    def from_dict(cls, d: dict | None) -> "ModelConfig":
        d = dict(d or {})
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


class BiogeoModel:
    """Grid, transports and forcing bundled with stepping and spin-up.

    The grid, transports and forcing are read-only once built; every spin-up
    owns its state, so one instance can serve many evaluations.
    """

    def __init__(self, grid: Grid, transports: TransportSet, forcing: Forcing,
                 config: ModelConfig | None = None):
        self.grid = grid
        self.transports = transports
        self.forcing = forcing
        self.config = config or ModelConfig()
        if transports.n != grid.n_wet:
            raise ValueError("transport matrices do not match the grid")
        if forcing.q_sw.shape != (self.config.steps_per_year, grid.n_columns):
            raise ValueError("forcing table does not match grid and time step")
        if self.config.steps_per_year % MONTHS:
            raise ValueError("steps per year must be a multiple of 12")
        if not np.allclose(transports.midpoints, (np.arange(MONTHS) + 0.5) / MONTHS):
            raise ValueError("transport month midpoints must be the month centers")
        self.volume = grid.volume
        self._e, self._i = transports.kernel_arrays()
        self._col_start = grid.column_start
        self._dz = grid.dz
        self._zc = grid.z_center

    @classmethod
    def default(cls, config: ModelConfig | None = None, grid: Grid | None = None) -> "BiogeoModel":
        config = config or ModelConfig()
        grid = grid or default_grid()
        transports = synth_transports(grid, seed=config.seed, diffusivity=config.diffusivity,
                                      circulation_strength=config.circulation_strength, dt=config.dt)
        forcing = make_forcing(grid, peak=config.q_sw_peak, steps_per_year=config.steps_per_year)
        return cls(grid, transports, forcing, config)

    # -- states ------------------------------------------------------------
    def initial_state(self, p_mean: float) -> TracerState:
        """Spatially constant state, all phosphorus as PO4."""
        values = np.zeros((2, self.grid.n_wet))
        values[0] = p_mean
        return TracerState(values)

    def rescale_to_mean(self, state: TracerState, p_mean: float) -> TracerState:
        """Shift PO4 uniformly so that the total volume mean equals ``p_mean``."""
        values = state.values.copy()
        values[0] += p_mean - state.total_mean(self.volume)
        return TracerState(values)

    # -- stepping ----------------------------------------------------------
    def sms(self, state: TracerState, theta, step: int):
        """Reference (non-compiled) SMS terms for the whole state at ``step``."""
        theta = np.asarray(theta, dtype=float)
        out = np.zeros_like(state.values)
        start = self._col_start
        for c in range(self.grid.n_columns):
            s, e = start[c], start[c + 1]
            light = sms.light(self.forcing.q_sw[step, c], self.forcing.f_par, theta[5], self._zc[: e - s])
            out[0, s:e], out[1, s:e] = sms.sms_terms(
                state.values[0, s:e], state.values[1, s:e], theta, light, self.grid.z_bottom, self.grid.i_e)
        return out

    def tmm_step(self, state: TracerState, theta, step: int) -> TracerState:
        """One time step ``y' = A_i (A_e y + dt s)`` (reference implementation)."""
        t = (step % self.config.steps_per_year) / self.config.steps_per_year
        ae, ai = self.transports.interpolate(t)
        s = self.sms(state, theta, step % self.config.steps_per_year)
        z = ae @ state.values.T + self.config.dt * s.T
        y = (ai @ z).T
        if not np.all(np.isfinite(y)):
            raise NonFinite(f"non-finite concentration at step {step}")
        return TracerState(np.ascontiguousarray(y))

    def run_year(self, state: TracerState, theta):
        """Integrate one model year; return (year-end state, monthly means)."""
        theta = np.asarray(theta, dtype=float)
        kappa_re, alpha, f_dop, kappa_po4, kappa_i, k_water, a_re, _ = theta
        w_int, w_bot = sms.remineralization_weights(self.grid.z_bottom, self.grid.i_e, a_re)
        y = np.array(state.values, dtype=float, copy=True)
        monthly = np.empty((MONTHS, 2, y.shape[1]))
        (ep, ei, ed), (ip, ii, idata) = self._e, self._i
        ok = run_year(y, ep, ei, ed, ip, ii, idata,
                      self.forcing.q_sw, self.forcing.f_par, self._col_start, self.grid.i_e,
                      self._dz, self._zc, kappa_re, alpha, f_dop, kappa_po4, kappa_i, k_water,
                      w_int, w_bot, self.config.dt, monthly)
        if not ok:
            raise NonFinite(f"non-finite concentration for theta={theta.tolist()}")
        return TracerState(y), monthly

    def spin_up(self, theta, initial: TracerState | None = None, tol: float | None = None,
                max_years: int | None = None, raise_on_fail: bool = True, min_years: int = 1,
                rtol: float | None = None) -> SpinUpResult:
        """Iterate model years until year-start states repeat.

        The periodicity residual is the mean absolute difference between
        consecutive year-start states over all wet cells and both tracers.
        Without ``initial`` the run starts from constant concentrations with
        the volume mean ``p_mean``.  ``rtol`` additionally accepts a residual
        below ``rtol`` times the mean absolute departure from ``initial``.
        """
        theta = np.asarray(theta, dtype=float)
        tol = self.config.tol if tol is None else tol
        max_years = self.config.max_years if max_years is None else max_years
        state = initial if initial is not None else self.initial_state(theta[7])
        start = state.values
        residuals = []
        monthly = None
        converged = False
        years = 0
        while years < max_years:
            new, monthly = self.run_year(state, theta)
            years += 1
            res = float(np.mean(np.abs(new.values - state.values)))
            residuals.append(res)
            state = new
            limit = tol
            if rtol is not None:
                limit = max(tol, rtol * float(np.mean(np.abs(new.values - start))))
            if years >= min_years and res <= limit:
                converged = True
                break
        result = SpinUpResult(state=state, monthly=monthly, years=years, residuals=residuals,
                              converged=converged)
        if not converged:
            log.warning("spin-up not periodic after %d years (residual %.3e)", years, result.residual)
            if raise_on_fail:
                raise NotPeriodic(result.residual, years, result)
        return result

    # -- outputs -----------------------------------------------------------
    def selector(self, points) -> "OutputSelector":
        """Build a selector from (tracer, x, y, z, month) tuples."""
        return OutputSelector.from_points(self.grid, points)

    def full_selector(self) -> "OutputSelector":
        n = self.grid.n_wet
        tracer = np.repeat(np.arange(2), MONTHS * n)
        month = np.tile(np.repeat(np.arange(MONTHS), n), 2)
        cell = np.tile(np.arange(n), 2 * MONTHS)
        return OutputSelector(tracer=tracer, cell=cell, month=month)


@dataclass(frozen=True)
class OutputSelector:
    """Model output points: tracer index, wet-cell index and month per row."""

    tracer: np.ndarray
    cell: np.ndarray
    month: np.ndarray

    def __post_init__(self):
        for name in ("tracer", "cell", "month"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        if not (self.tracer.shape == self.cell.shape == self.month.shape):
            raise ValueError("selector arrays must have equal length")

    def __len__(self) -> int:
        return self.cell.size

    @classmethod
    def from_points(cls, grid: Grid, points) -> "OutputSelector":
        tracer, cell, month = [], [], []
        for k, (tr, x, y, z, m) in enumerate(points):
            if tr not in TRACER_INDEX:
                raise ValueError(f"point {k}: unknown tracer {tr!r}")
            if not 0 <= int(m) < MONTHS:
                raise OutOfGrid(f"point {k}: month {m} outside 0..11")
            tracer.append(TRACER_INDEX[tr])
            cell.append(grid.index(int(x), int(y), int(z)))
            month.append(int(m))
        return cls(np.array(tracer), np.array(cell), np.array(month))

    def subset(self, rows) -> "OutputSelector":
        rows = np.asarray(rows)
        return OutputSelector(self.tracer[rows], self.cell[rows], self.month[rows])


def model_outputs(monthly: np.ndarray, selector: OutputSelector) -> np.ndarray:
    """Monthly values at the selected (tracer, cell, month) points, in selector order."""
    n = monthly.shape[2]
    if selector.cell.size and (selector.cell.max() >= n or selector.cell.min() < 0):
        raise OutOfGrid("selector refers to a cell outside the state")
    return monthly[selector.month, selector.tracer, selector.cell]
