"""Short-wave radiation forcing.

An analytic stand-in for an atmosphere model: top-of-ocean radiation is
``peak * max(0, cos(zenith))`` with the zenith angle computed from the
nominal row latitude, the solar declination of the model day and the hour
angle of the time step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

F_PAR = 0.4
STEPS_PER_YEAR = 2880
OBLIQUITY = 23.44


@dataclass(frozen=True)
class Forcing:
    """Q_SW per time step and wet column (W m^-2), plus the PAR fraction."""

    q_sw: np.ndarray
    f_par: float = F_PAR

    def __post_init__(self):
        q = np.ascontiguousarray(self.q_sw, dtype=float)
        if q.ndim != 2:
            raise ValueError("q_sw must be (steps, columns)")
        if np.any(q < 0) or not np.all(np.isfinite(q)):
            raise ValueError("q_sw must be finite and non-negative")
        object.__setattr__(self, "q_sw", q)

    @property
    def steps_per_year(self) -> int:
        return self.q_sw.shape[0]


def shortwave(lat_deg, t_year, peak: float = 1000.0, days_per_year: float = 360.0):
    """Short-wave radiation at latitude ``lat_deg`` and model time ``t_year``."""
    lat = np.radians(np.asarray(lat_deg, dtype=float))
    t = np.asarray(t_year, dtype=float)
    decl = np.radians(OBLIQUITY) * np.sin(2.0 * np.pi * (t - 80.0 / 365.0))
    hour_angle = 2.0 * np.pi * (np.mod(t * days_per_year, 1.0) - 0.5)
    cosz = np.sin(lat) * np.sin(decl) + np.cos(lat) * np.cos(decl) * np.cos(hour_angle)
    return peak * np.maximum(cosz, 0.0)


def make_forcing(grid, peak: float = 1000.0, steps_per_year: int = STEPS_PER_YEAR,
                 f_par: float = F_PAR) -> Forcing:
    """Tabulate Q_SW at the midpoint of every time step for every wet column."""
    t = (np.arange(steps_per_year) + 0.5) / steps_per_year
    lat = grid.lat[grid.columns[:, 1]]
    q = shortwave(lat[None, :], t[:, None], peak=peak)
    return Forcing(q_sw=q, f_par=f_par)
