"""Monthly transport matrices and their synthetic construction.

A time step applies ``y' = A_i (A_e y + dt * s)``.  Here the explicit matrix
carries upwind advection plus horizontal diffusion, ``A_e = I + dt T_e``,
and the implicit matrix is the inverse of the vertical-diffusion step,
``A_i = (I - dt T_v)^{-1}``, which is block diagonal over water columns and
therefore sparse.

All twelve explicit (and all twelve implicit) matrices share one sparsity
pattern so the stepping kernel can interpolate their data arrays directly.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

SECONDS_PER_YEAR = 365.25 * 86400.0
SV = 1.0e6 * SECONDS_PER_YEAR  # m^3/yr
MONTHS = 12


class UnstableOperator(ValueError):
    """Explicit transport matrix with a negative diagonal (CFL violation)."""


@dataclass(frozen=True)
class TransportSet:
    """Twelve monthly (A_e, A_i) pairs on a shared sparsity pattern.

    Month ``k`` is valid at model time ``midpoints[k]`` (fraction of a year).
    """

    explicit: tuple
    implicit: tuple
    midpoints: np.ndarray

    def __post_init__(self):
        if len(self.explicit) != MONTHS or len(self.implicit) != MONTHS:
            raise ValueError("need twelve monthly matrices of each kind")
        explicit = tuple(_on_common_pattern(self.explicit))
        implicit = tuple(_on_common_pattern(self.implicit))
        object.__setattr__(self, "explicit", explicit)
        object.__setattr__(self, "implicit", implicit)
        object.__setattr__(self, "midpoints", np.asarray(self.midpoints, dtype=float))

    @property
    def n(self) -> int:
        return self.explicit[0].shape[0]

    def kernel_arrays(self):
        """(indptr, indices, data[12, nnz]) for the explicit and implicit sets."""
        e0, i0 = self.explicit[0], self.implicit[0]
        e_data = np.stack([m.data for m in self.explicit])
        i_data = np.stack([m.data for m in self.implicit])
        return (e0.indptr, e0.indices, e_data), (i0.indptr, i0.indices, i_data)

    def interpolate(self, t_year: float):
        """Explicit and implicit matrices at model time ``t_year``.

        Linear interpolation between the two nearest month midpoints, with
        periodic wrap-around between December and January.
        """
        k0, k1, w = interpolation_weights(t_year, self.midpoints)
        e = self.explicit[k0] * (1.0 - w) + self.explicit[k1] * w
        i = self.implicit[k0] * (1.0 - w) + self.implicit[k1] * w
        return e.tocsr(), i.tocsr()

    def conservation_error(self, volume: np.ndarray) -> float:
        """Largest relative deviation of v^T M from v^T over all matrices."""
        v = np.asarray(volume, dtype=float)
        worst = 0.0
        for m in (*self.explicit, *self.implicit):
            worst = max(worst, float(np.max(np.abs(m.T @ v - v) / v)))
        return worst

    # -- portable file format ----------------------------------------------
    def save(self, directory) -> None:
        """Write ``transport.json`` plus ``month_<k>_<e|i>.csv`` triplet files."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        header = {"n": self.n, "months": MONTHS, "midpoints": self.midpoints.tolist()}
        (d / "transport.json").write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")
        for kind, mats in (("e", self.explicit), ("i", self.implicit)):
            for k, m in enumerate(mats):
                coo = m.tocoo()
                with open(d / f"month_{k}_{kind}.csv", "w", newline="\n", encoding="utf-8") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(["row", "col", "value"])
                    for r, c, val in zip(coo.row, coo.col, coo.data):
                        w.writerow([int(r), int(c), repr(float(val))])

    @classmethod
    def load(cls, directory) -> "TransportSet":
        d = Path(directory)
        header = json.loads((d / "transport.json").read_text(encoding="utf-8"))
        n = int(header["n"])
        mats = {"e": [], "i": []}
        for kind in ("e", "i"):
            for k in range(int(header.get("months", MONTHS))):
                rows, cols, vals = [], [], []
                with open(d / f"month_{k}_{kind}.csv", newline="", encoding="utf-8") as fh:
                    reader = csv.reader(fh)
                    if next(reader) != ["row", "col", "value"]:
                        raise ValueError(f"bad header in month_{k}_{kind}.csv")
                    for row in reader:
                        rows.append(int(row[0]))
                        cols.append(int(row[1]))
                        vals.append(float(row[2]))
                mats[kind].append(sp.csr_matrix((vals, (rows, cols)), shape=(n, n)))
        return cls(tuple(mats["e"]), tuple(mats["i"]), np.asarray(header["midpoints"]))


def interpolation_weights(t_year: float, midpoints=None):
    """Bracketing month indices and weight of the later one at ``t_year``."""
    if midpoints is None:
        s = (t_year % 1.0) * MONTHS - 0.5
        k0 = int(np.floor(s))
        w = s - k0
        return k0 % MONTHS, (k0 + 1) % MONTHS, w
    mids = np.asarray(midpoints)
    t = t_year % 1.0
    k1 = int(np.searchsorted(mids, t, side="right")) % len(mids)
    k0 = (k1 - 1) % len(mids)
    span = (mids[k1] - mids[k0]) % 1.0
    w = ((t - mids[k0]) % 1.0) / span
    return k0, k1, float(w)


def _on_common_pattern(mats):
    """Return CSR copies of ``mats`` that share one sorted sparsity pattern."""
    mats = [sp.csr_matrix(m, dtype=float) for m in mats]
    pattern = abs(mats[0])
    for m in mats[1:]:
        pattern = pattern + abs(m)
    pattern = sp.csr_matrix(pattern)
    pattern.sort_indices()
    rows = np.repeat(np.arange(pattern.shape[0]), np.diff(pattern.indptr))
    cols = pattern.indices
    out = []
    for m in mats:
        data = np.asarray(m[rows, cols]).ravel()
        out.append(sp.csr_matrix((data, pattern.indices.copy(), pattern.indptr.copy()), shape=m.shape))
    return out


def _add_face(entries, a, b, g_ab, g_ba):
    """Exchange term: cell a receives g_ab * (c_b - c_a), b receives g_ba * (c_a - c_b)."""
    entries.append((a, b, g_ab))
    entries.append((a, a, -g_ab))
    entries.append((b, a, g_ba))
    entries.append((b, b, -g_ba))


def synth_transports(grid, seed: int = 0, diffusivity: float = 1.0,
                     circulation_strength: float = 10.0,
                     dt: float = 1.0 / 2880.0) -> TransportSet:
    """Seeded, mass-conserving monthly transport matrices for ``grid``.

    Advection is the superposition of closed four-cell circulation loops
    (a discrete stream function) in the horizontal and both vertical
    planes; any such sum is divergence free.  ``circulation_strength`` is
    the loop transport scale in Sv.  ``diffusivity`` multiplies reference
    horizontal (5000 m^2/s) and vertical (2e-3 m^2/s deep, 2e-2 m^2/s in
    the upper 120 m, enhanced in local winter) diffusivities.
    """
    rng = np.random.default_rng(seed)
    n = grid.n_wet
    vol = grid.volume
    dz = grid.dz
    zc = grid.z_center
    idx = grid._index

    loops = []  # (cells, strength, phase)

    def wet(x, y, z):
        return 0 <= x < grid.nx and 0 <= y < grid.ny and 0 <= z < grid.nz and idx[x, y, z] >= 0

    for z in range(grid.nz):
        depth_decay = np.exp(-grid.z_top[z] / 500.0)
        for y in range(grid.ny - 1):
            for x in range(grid.nx - 1):
                quad = [(x, y, z), (x + 1, y, z), (x + 1, y + 1, z), (x, y + 1, z)]
                if all(wet(*c) for c in quad):
                    loops.append((quad, rng.uniform(-1, 1) * depth_decay, rng.uniform(0, 2 * np.pi)))
    for z in range(grid.nz - 1):
        for y in range(grid.ny - 1):
            for x in range(grid.nx):
                quad = [(x, y, z), (x, y + 1, z), (x, y + 1, z + 1), (x, y, z + 1)]
                if all(wet(*c) for c in quad):
                    loops.append((quad, rng.uniform(-1, 1), rng.uniform(0, 2 * np.pi)))
        for y in range(grid.ny):
            for x in range(grid.nx - 1):
                quad = [(x, y, z), (x + 1, y, z), (x + 1, y, z + 1), (x, y, z + 1)]
                if all(wet(*c) for c in quad):
                    loops.append((quad, 0.5 * rng.uniform(-1, 1), rng.uniform(0, 2 * np.pi)))

    kh = diffusivity * 5000.0 * SECONDS_PER_YEAR
    kv_deep = diffusivity * 2e-3 * SECONDS_PER_YEAR
    kv_upper = diffusivity * 2e-2 * SECONDS_PER_YEAR
    psi0 = circulation_strength * SV
    cells = grid.cells
    lat = grid.lat

    explicit, implicit = [], []
    for month in range(MONTHS):
        tm = (month + 0.5) / MONTHS
        # net face transports (m^3/yr), keyed by ordered cell pair
        flux = {}
        for quad, strength, phase in loops:
            psi = psi0 * strength * (1.0 + 0.3 * np.sin(2 * np.pi * tm + phase))
            for a, b in zip(quad, quad[1:] + quad[:1]):
                ia, ib = idx[a], idx[b]
                key = (ia, ib) if ia < ib else (ib, ia)
                flux[key] = flux.get(key, 0.0) + (psi if ia < ib else -psi)
        entries = []
        for (ia, ib), phi in flux.items():
            if phi == 0.0:
                continue
            src, dst = (ia, ib) if phi > 0 else (ib, ia)
            q = abs(phi)
            entries.append((src, src, -q / vol[src]))
            entries.append((dst, src, q / vol[dst]))
        if kh > 0:
            for a in range(n):
                x, y, z = cells[a]
                for nx_, ny_, width in ((x + 1, y, grid.dy), (x, y + 1, grid.dx)):
                    if wet(nx_, ny_, z):
                        b = idx[nx_, ny_, z]
                        dist = grid.dx if nx_ != x else grid.dy
                        g = kh * width * dz[z] / dist
                        _add_face(entries, a, b, g / vol[a], g / vol[b])
        if entries:
            r, c, v = zip(*entries)
            te = sp.coo_matrix((v, (r, c)), shape=(n, n)).tocsr()
        else:
            te = sp.csr_matrix((n, n))
        ae = (sp.identity(n, format="csr") + dt * te).tocsr()
        ae.sum_duplicates()
        if ae.diagonal().min() < 0:
            raise UnstableOperator(f"month {month}: explicit step not monotone (min diag {ae.diagonal().min():.3e})")

        tv_entries = []
        if kv_deep > 0:
            for a in range(n):
                x, y, z = cells[a]
                if wet(x, y, z + 1):
                    b = idx[x, y, z + 1]
                    if grid.z_bottom[z] < grid.euphotic_depth + 1:
                        # winter peak mid-February in the north, mid-August in the south
                        peak = 0.12 if lat[y] >= 0 else 0.62
                        winter = max(0.0, np.cos(2 * np.pi * (tm - peak)))
                        kv = kv_upper * (1.0 + 3.0 * winter * abs(lat[y]) / 90.0)
                    else:
                        kv = kv_deep
                    g = kv * grid.area / (zc[z + 1] - zc[z])
                    _add_face(tv_entries, a, b, g / vol[a], g / vol[b])
        if tv_entries:
            r, c, v = zip(*tv_entries)
            tv = sp.coo_matrix((v, (r, c)), shape=(n, n)).tocsc()
            ai = _column_block_inverse(grid, sp.identity(n, format="csc") - dt * tv)
        else:
            ai = sp.identity(n, format="csr")
        explicit.append(ae)
        implicit.append(ai)

    midpoints = (np.arange(MONTHS) + 0.5) / MONTHS
    return TransportSet(tuple(explicit), tuple(implicit), midpoints)


def _column_block_inverse(grid, m):
    """Inverse of a matrix that only couples cells within a water column."""
    m = sp.csr_matrix(m)
    start = grid.column_start
    rows, cols, vals = [], [], []
    for c in range(grid.n_columns):
        s, e = start[c], start[c + 1]
        block = np.linalg.inv(m[s:e, s:e].toarray())
        r, cc = np.meshgrid(np.arange(s, e), np.arange(s, e), indexing="ij")
        rows.append(r.ravel())
        cols.append(cc.ravel())
        vals.append(block.ravel())
    n = m.shape[0]
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
