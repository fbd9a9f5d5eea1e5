"""Model parameter names, bounds and the initial guess."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PARAMETER_NAMES = ("kappa_re", "alpha", "f_dop", "kappa_po4", "kappa_i", "k_water", "a_re", "p_mean")
PARAMETER_UNITS = ("1/yr", "mmol/m^3/yr", "1", "mmol/m^3", "W/m^2", "1/m", "1", "mmol/m^3")
N_PARAMS = len(PARAMETER_NAMES)


class OutOfBounds(ValueError):
    """Parameter vector outside its box."""


@dataclass(frozen=True)
class ParameterBounds:
    lower: np.ndarray
    upper: np.ndarray
    initial: np.ndarray

    def __post_init__(self):
        for name in ("lower", "upper", "initial"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).copy())
        if not (self.lower.shape == self.upper.shape == self.initial.shape):
            raise ValueError("bounds and initial guess must have equal length")
        if np.any(self.lower >= self.upper):
            raise ValueError("lower bounds must be below upper bounds")
        if not self.contains(self.initial):
            raise OutOfBounds("initial guess outside the bounds")

    @property
    def m(self) -> int:
        return self.lower.size

    def contains(self, theta, atol: float = 0.0) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.lower - atol) and np.all(theta <= self.upper + atol))

    def clip(self, theta) -> np.ndarray:
        return np.clip(np.asarray(theta, dtype=float), self.lower, self.upper)


# initial guess, lower and upper bounds of the marine phosphorus model
DEFAULT_BOUNDS = ParameterBounds(
    lower=np.array([0.05, 0.2, 0.05, 0.01, 5.0, 0.001, 0.5, 0.4]),
    upper=np.array([10.0, 20.0, 0.95, 10.0, 200.0, 0.2, 2.0, 10.0]),
    initial=np.array([0.5, 2.0, 0.67, 0.5, 30.0, 0.02, 0.86, 2.17]),
)


def as_dict(theta) -> dict:
    return {name: float(v) for name, v in zip(PARAMETER_NAMES, np.asarray(theta, dtype=float))}


def from_dict(d: dict) -> np.ndarray:
    return np.array([float(d[name]) for name in PARAMETER_NAMES])
