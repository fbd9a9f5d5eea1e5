"""Ocean grid with land mask and per-column bathymetry."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_Z_BOTTOM = (25.0, 60.0, 120.0, 250.0, 500.0, 1000.0)
EUPHOTIC_DEPTH = 120.0


class OutOfGrid(IndexError):
    """A cell index that is outside the grid or on land."""


@dataclass(frozen=True)
class Grid:
    """Regular nx x ny x nz box grid.

    ``kmax[x, y]`` is the number of wet layers of a column (0 on land).
    ``lat`` holds the nominal latitude of each row in degrees; it only feeds
    the short-wave radiation profile.  ``dx``/``dy`` are box widths in m.

    Wet cells are numbered column by column (x fastest, then y), top to
    bottom inside a column; this order defines every state vector.
    """

    nx: int
    ny: int
    z_bottom: np.ndarray
    kmax: np.ndarray
    lat: np.ndarray
    dx: float = 5.0e5
    dy: float = 5.0e5
    euphotic_depth: float = EUPHOTIC_DEPTH
    _index: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        zb = np.asarray(self.z_bottom, dtype=float)
        kmax = np.asarray(self.kmax, dtype=np.int64)
        lat = np.asarray(self.lat, dtype=float)
        object.__setattr__(self, "z_bottom", zb)
        object.__setattr__(self, "kmax", kmax)
        object.__setattr__(self, "lat", lat)
        if zb.ndim != 1 or zb.size < 2 or np.any(np.diff(zb) <= 0) or zb[0] <= 0:
            raise ValueError("z_bottom must be positive and strictly increasing")
        if kmax.shape != (self.nx, self.ny):
            raise ValueError(f"kmax must have shape {(self.nx, self.ny)}")
        if lat.shape != (self.ny,):
            raise ValueError(f"lat must have shape {(self.ny,)}")
        hits = np.flatnonzero(np.isclose(zb, self.euphotic_depth))
        if hits.size != 1:
            raise ValueError(f"euphotic depth {self.euphotic_depth} m must coincide with a layer bottom")
        i_e = int(hits[0])
        wet = kmax > 0
        if np.any(kmax < 0) or np.any(kmax > zb.size):
            raise ValueError("kmax outside [0, nz]")
        if np.any(kmax[wet] < i_e + 2):
            # every wet column needs a layer below the euphotic zone to receive export
            raise ValueError("wet columns must extend below the euphotic zone")
        if not wet.any():
            raise ValueError("grid has no wet cells")

        index = -np.ones((self.nx, self.ny, zb.size), dtype=np.int64)
        k = 0
        for y in range(self.ny):
            for x in range(self.nx):
                for z in range(kmax[x, y]):
                    index[x, y, z] = k
                    k += 1
        object.__setattr__(self, "_index", index)

    # -- vertical geometry --------------------------------------------------
    @property
    def nz(self) -> int:
        return self.z_bottom.size

    @property
    def z_top(self) -> np.ndarray:
        return np.concatenate(([0.0], self.z_bottom[:-1]))

    @property
    def z_center(self) -> np.ndarray:
        return 0.5 * (self.z_top + self.z_bottom)

    @property
    def dz(self) -> np.ndarray:
        return self.z_bottom - self.z_top

    @property
    def i_e(self) -> int:
        """0-based index of the last euphotic layer."""
        return int(np.flatnonzero(np.isclose(self.z_bottom, self.euphotic_depth))[0])

    # -- horizontal / wet-cell bookkeeping ----------------------------------
    @property
    def land_mask(self) -> np.ndarray:
        return self.kmax == 0

    @property
    def area(self) -> float:
        return self.dx * self.dy

    @property
    def columns(self) -> np.ndarray:
        """(ncol, 2) array of wet column (x, y) pairs in state order."""
        ys, xs = np.nonzero(self.kmax.T > 0)
        return np.stack([xs, ys], axis=1)

    @property
    def n_columns(self) -> int:
        return int(np.count_nonzero(self.kmax))

    @property
    def column_start(self) -> np.ndarray:
        cols = self.columns
        nlev = self.kmax[cols[:, 0], cols[:, 1]]
        return np.concatenate(([0], np.cumsum(nlev))).astype(np.int64)

    @property
    def n_wet(self) -> int:
        return int(self.kmax.sum())

    @property
    def cells(self) -> np.ndarray:
        """(n_wet, 3) array of (x, y, z) for every wet cell in state order."""
        x, y, z = np.nonzero(self._index >= 0)
        order = np.argsort(self._index[x, y, z])
        return np.stack([x[order], y[order], z[order]], axis=1)

    @property
    def cell_layer(self) -> np.ndarray:
        return self.cells[:, 2]

    @property
    def cell_column(self) -> np.ndarray:
        start = self.column_start
        return np.repeat(np.arange(self.n_columns), np.diff(start))

    @property
    def volume(self) -> np.ndarray:
        return self.area * self.dz[self.cell_layer]

    def index(self, x: int, y: int, z: int) -> int:
        """State index of the wet cell (x, y, z); raises OutOfGrid otherwise."""
        if not (0 <= x < self.nx and 0 <= y < self.ny and 0 <= z < self.nz):
            raise OutOfGrid(f"cell ({x}, {y}, {z}) outside grid {self.nx}x{self.ny}x{self.nz}")
        k = int(self._index[x, y, z])
        if k < 0:
            raise OutOfGrid(f"cell ({x}, {y}, {z}) is not a wet cell")
        return k

    def indices(self, cells) -> np.ndarray:
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
        out = np.empty(len(cells), dtype=np.int64)
        for r, (x, y, z) in enumerate(cells):
            out[r] = self.index(x, y, z)
        return out

    def to_dict(self) -> dict:
        return {
            "nx": self.nx,
            "ny": self.ny,
            "z_bottom": self.z_bottom.tolist(),
            "kmax": self.kmax.tolist(),
            "lat": self.lat.tolist(),
            "dx": self.dx,
            "dy": self.dy,
            "euphotic_depth": self.euphotic_depth,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls(
            nx=int(d["nx"]),
            ny=int(d["ny"]),
            z_bottom=np.asarray(d["z_bottom"], dtype=float),
            kmax=np.asarray(d["kmax"], dtype=np.int64),
            lat=np.asarray(d["lat"], dtype=float),
            dx=float(d.get("dx", 5.0e5)),
            dy=float(d.get("dy", 5.0e5)),
            euphotic_depth=float(d.get("euphotic_depth", EUPHOTIC_DEPTH)),
        )


def default_grid(nx: int = 8, ny: int = 8, z_bottom=DEFAULT_Z_BOTTOM) -> Grid:
    """Desk-scale grid: 8 x 8 x 6 with a small continent and a shelf."""
    nz = len(z_bottom)
    kmax = np.full((nx, ny), nz, dtype=np.int64)
    if nx >= 8 and ny >= 8:
        kmax[0, 6:] = 0
        kmax[1, 7] = 0
        kmax[7, 0] = 0
        for x, y in [(0, 5), (1, 6), (2, 7), (6, 0), (7, 1)]:
            kmax[x, y] = 4
    lat = np.linspace(-70.0, 70.0, ny)
    return Grid(nx=nx, ny=ny, z_bottom=np.asarray(z_bottom, dtype=float), kmax=kmax, lat=lat)
