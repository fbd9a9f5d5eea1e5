"""Measurement records and the covariance structure built from them.

Records are grouped into space-time boxes (tracer, cell, month).  Box
standard deviations come from boxes holding at least four values; boxes
with fewer values fall back to the mean of the estimated stds of their
tracer, and every std is bounded below by 0.1.

Correlations link records of the same tracer and cell taken on the same
sampling occasion in different months.  The occasion of a record is given
explicitly or, failing that, is its position among the records of its box
in input order.  Two boxes get their sample correlation when at least 35
value pairs are available and zero otherwise.  The resulting matrix is
made safely positive definite by shrinking it toward the identity.
"""
from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .numstat import LdlFactorization, ldl_factorize

log = logging.getLogger(__name__)

TRACERS = ("PO4", "DOP")
HEADER = ("tracer", "x", "y", "z", "month", "value")
STD_FLOOR = 0.1
MIN_STD_VALUES = 4
MIN_PAIRS = 35
MIN_EIGENVALUE = 1e-4
MAX_CONDITION = 1e6
SHRINK_STEP = 0.01


class EmptyDataset(ValueError):
    """No measurements to work with."""


class ParseError(ValueError):
    """Malformed measurement file; ``line`` is 1-based."""

    def __init__(self, message: str, line: int):
        self.line = line
        super().__init__(f"line {line}: {message}")


@dataclass(frozen=True)
class MeasurementRecord:
    tracer: str
    x: int
    y: int
    z: int
    month: int
    value: float
    occasion: int | None = None

    def __post_init__(self):
        if self.tracer not in TRACERS:
            raise ValueError(f"unknown tracer {self.tracer!r}")
        if not 0 <= self.month < 12:
            raise ValueError(f"month {self.month} outside 0..11")
        if not np.isfinite(self.value) or self.value < 0:
            raise ValueError(f"measurement value must be finite and non-negative, got {self.value}")

    @property
    def cell(self) -> tuple:
        return (self.x, self.y, self.z)

    @property
    def box(self) -> tuple:
        return (self.tracer, self.x, self.y, self.z, self.month)

    def point(self) -> tuple:
        return (self.tracer, self.x, self.y, self.z, self.month)


@dataclass(frozen=True)
class MeasurementSet:
    """Ordered measurements; the order fixes the row index of residuals and Jacobians."""

    records: tuple

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    @property
    def n(self) -> int:
        return len(self.records)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def values(self) -> np.ndarray:
        return np.array([r.value for r in self.records], dtype=float)

    def points(self) -> list:
        return [r.point() for r in self.records]

    def extend(self, other) -> "MeasurementSet":
        return MeasurementSet(self.records + tuple(getattr(other, "records", other)))

    def occasions(self) -> np.ndarray:
        """Sampling occasion per record (explicit, else position within the box)."""
        seen = defaultdict(int)
        occ = np.empty(self.n, dtype=np.int64)
        for k, r in enumerate(self.records):
            if r.occasion is None:
                occ[k] = seen[r.box]
                seen[r.box] += 1
            else:
                occ[k] = r.occasion
        return occ

    def boxes(self) -> dict:
        """Box key -> list of record indices, in record order."""
        groups = defaultdict(list)
        for k, r in enumerate(self.records):
            groups[r.box].append(k)
        return dict(groups)


def load_measurements(path, grid=None) -> MeasurementSet:
    """Read a measurement CSV (header ``tracer,x,y,z,month,value``).

    An optional seventh column ``occasion`` assigns sampling occasions
    explicitly.  Leading lines starting with ``#`` are skipped.  With
    ``grid`` given, every cell must be a wet grid cell.
    """
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    skip = 0
    while skip < len(lines) and lines[skip].startswith("#"):
        skip += 1
    reader = csv.reader(lines[skip:])
    header = next(reader, None)
    if header is None:
        raise EmptyDataset(f"{path}: empty file")
    header = tuple(h.strip() for h in header)
    if header not in (HEADER, HEADER + ("occasion",)):
        raise ParseError(f"expected header {','.join(HEADER)}, got {','.join(header)}", skip + 1)
    has_occ = len(header) == 7
    for row in reader:
        line = reader.line_num + skip
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
        try:
            rec = MeasurementRecord(
                tracer=row[0].strip(), x=int(row[1]), y=int(row[2]), z=int(row[3]),
                month=int(row[4]), value=float(row[5]),
                occasion=int(row[6]) if has_occ else None)
        except ValueError as exc:
            raise ParseError(str(exc), line) from exc
        records.append(rec)
    if not records:
        raise EmptyDataset(f"{path}: no measurements")
    mset = MeasurementSet(tuple(records))
    if grid is not None:
        check_in_grid(mset, grid)
    return mset


def check_in_grid(mset: MeasurementSet, grid) -> None:
    from .biogeomodel.grid import OutOfGrid

    for k, r in enumerate(mset.records):
        try:
            grid.index(r.x, r.y, r.z)
        except OutOfGrid as exc:
            raise OutOfGrid(f"record {k}: {exc}") from exc


def save_measurements(mset: MeasurementSet, path, with_occasion: bool = False) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER + (("occasion",) if with_occasion else ()))
        occ = mset.occasions()
        for k, r in enumerate(mset.records):
            row = [r.tracer, r.x, r.y, r.z, r.month, repr(float(r.value))]
            if with_occasion:
                row.append(int(occ[k]))
            w.writerow(row)


# -- standard deviations ------------------------------------------------------

def estimate_stds(mset: MeasurementSet, floor: float = STD_FLOOR,
                  min_values: int = MIN_STD_VALUES) -> np.ndarray:
    """Per-record standard deviations from box sample stds."""
    if mset.n == 0:
        raise EmptyDataset("no measurements")
    values = mset.values
    boxes = mset.boxes()
    box_std = {}
    for key, idx in boxes.items():
        if len(idx) >= min_values:
            box_std[key] = float(np.std(values[idx], ddof=1))
    fallback = {}
    for tracer in TRACERS:
        est = [s for key, s in box_std.items() if key[0] == tracer]
        fallback[tracer] = float(np.mean(est)) if est else floor
    stds = np.empty(mset.n)
    for key, idx in boxes.items():
        if key[0] == "DOP":
            s = fallback["DOP"]
        else:
            s = box_std.get(key, fallback["PO4"])
        stds[idx] = s
    return np.maximum(stds, floor)


# -- correlations -------------------------------------------------------------

@dataclass
class CorrelationEstimate:
    raw: np.ndarray
    matrix: np.ndarray
    shrinkage_lambda: float
    box_correlations: dict = field(default_factory=dict)


def box_correlations(mset: MeasurementSet, min_pairs: int = MIN_PAIRS) -> dict:
    """Sample correlation between boxes of one (tracer, cell) paired by occasion.

    Returns ``{(box_a, box_b): r}`` for box pairs with at least ``min_pairs``
    common occasions; both key orders are present.
    """
    values = mset.values
    occ = mset.occasions()
    by_cell = defaultdict(dict)
    for key, idx in mset.boxes().items():
        by_cell[key[:4]][key] = {int(occ[k]): values[k] for k in idx}
    out = {}
    for boxes in by_cell.values():
        keys = sorted(boxes, key=lambda b: b[4])
        for a in range(len(keys)):
            for b in range(a + 1, len(keys)):
                va, vb = boxes[keys[a]], boxes[keys[b]]
                common = sorted(set(va) & set(vb))
                if len(common) < min_pairs:
                    continue
                x = np.array([va[o] for o in common])
                y = np.array([vb[o] for o in common])
                sx, sy = np.std(x), np.std(y)
                r = 0.0 if sx == 0 or sy == 0 else float(np.corrcoef(x, y)[0, 1])
                r = float(np.clip(r, -1.0, 1.0))
                out[(keys[a], keys[b])] = r
                out[(keys[b], keys[a])] = r
    return out


def _blocks(A: np.ndarray):
    n = A.shape[0]
    rows, cols = np.nonzero(A)
    graph = coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    ncomp, labels = connected_components(graph, directed=False)
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(ncomp + 1))
    return [order[bounds[c]:bounds[c + 1]] for c in range(ncomp)]


def spectrum(A: np.ndarray) -> np.ndarray:
    """Eigenvalues of a symmetric matrix, computed per connected block."""
    eig = [np.linalg.eigvalsh(A[np.ix_(b, b)]) for b in _blocks(A)]
    return np.sort(np.concatenate(eig)) if eig else np.zeros(0)


def shrink_to_spd(A: np.ndarray, step: float = SHRINK_STEP, min_eigenvalue: float = MIN_EIGENVALUE,
                  max_condition: float = MAX_CONDITION):
    """Smallest ``lam`` in {0, step, 2 step, ...} with (1-lam) A + lam I well conditioned."""
    A = np.asarray(A, dtype=float)
    eig = spectrum(A)
    nsteps = int(round(1.0 / step))
    for j in range(nsteps + 1):
        lam = min(j * step, 1.0)
        e = (1.0 - lam) * eig + lam
        if e[0] >= min_eigenvalue and e[-1] / e[0] <= max_condition:
            out = (1.0 - lam) * A
            out[np.diag_indices_from(out)] = 1.0
            return out, lam
    raise AssertionError("identity always qualifies")


def estimate_correlation(mset: MeasurementSet, min_pairs: int = MIN_PAIRS) -> CorrelationEstimate:
    """Record-level correlation matrix, repaired by identity shrinkage."""
    if mset.n == 0:
        raise EmptyDataset("no measurements")
    pairs = box_correlations(mset, min_pairs)
    n = mset.n
    A = np.eye(n)
    if pairs:
        occ = mset.occasions()
        index = defaultdict(list)  # (tracer, cell, occasion) -> record indices
        for k, r in enumerate(mset.records):
            index[r.box[:4] + (int(occ[k]),)].append(k)
        for idx in index.values():
            for a in idx:
                for b in idx:
                    if a < b:
                        r = pairs.get((mset.records[a].box, mset.records[b].box), 0.0)
                        A[a, b] = A[b, a] = r
    raw = A.copy()
    repaired, lam = shrink_to_spd(A)
    if lam > 0:
        log.info("correlation matrix shrunk toward identity with lambda=%.2f", lam)
    return CorrelationEstimate(raw=raw, matrix=repaired, shrinkage_lambda=lam, box_correlations=pairs)


# -- covariance model ---------------------------------------------------------

class CovarianceModel:
    """The measurement covariance ``diag(stds) A diag(stds)`` with ``A = L D L^T`` cached."""

    def __init__(self, stds, correlation=None, shrinkage_lambda: float = 0.0,
                 sigma2_known: float | None = None, floor: float | None = STD_FLOOR):
        stds = np.asarray(stds, dtype=float).copy()
        if stds.ndim != 1 or stds.size == 0:
            raise EmptyDataset("covariance needs at least one measurement")
        if floor is not None and np.any(stds < floor):
            raise ValueError(f"standard deviations must be >= {floor}")
        if np.any(stds <= 0):
            raise ValueError("standard deviations must be positive")
        self.stds = stds
        self.diagonal = correlation is None
        if correlation is None:
            A = None
            self.ldl = LdlFactorization(np.eye(stds.size), np.ones(stds.size))
        else:
            A = np.asarray(correlation, dtype=float)
            if A.shape != (stds.size, stds.size):
                raise ValueError("correlation shape does not match stds")
            if not np.allclose(np.diag(A), 1.0) or np.max(np.abs(A)) > 1.0 + 1e-12:
                raise ValueError("correlation must have unit diagonal and entries in [-1, 1]")
            self.ldl = ldl_factorize(A)
        self.correlation = A
        self.shrinkage_lambda = float(shrinkage_lambda)
        self.sigma2_known = sigma2_known

    @classmethod
    def from_measurements(cls, mset: MeasurementSet, estimator: str = "gls") -> "CovarianceModel":
        """GLS: estimated stds and correlation; WLS: stds only; OLS: unit stds, no correlation."""
        if estimator == "ols":
            return cls(np.ones(mset.n))
        stds = estimate_stds(mset)
        if estimator == "wls":
            return cls(stds)
        if estimator != "gls":
            raise ValueError(f"unknown estimator {estimator!r}")
        corr = estimate_correlation(mset)
        if np.count_nonzero(corr.matrix - np.eye(mset.n)) == 0:
            return cls(stds, shrinkage_lambda=corr.shrinkage_lambda)
        return cls(stds, corr.matrix, corr.shrinkage_lambda)

    @property
    def n(self) -> int:
        return self.stds.size

    def correlation_matrix(self) -> np.ndarray:
        return np.eye(self.n) if self.correlation is None else self.correlation

    def dense(self) -> np.ndarray:
        """The full covariance matrix (testing and small problems only)."""
        return self.stds[:, None] * self.correlation_matrix() * self.stds[None, :]

    def whiten(self, r) -> np.ndarray:
        """``D^{-1/2} L^{-1} S^{-1} r`` for a vector or the columns of a matrix."""
        r = np.asarray(r, dtype=float)
        scaled = r / (self.stds if r.ndim == 1 else self.stds[:, None])
        if self.diagonal:
            return scaled
        return self.ldl.whiten(scaled)

    def quadratic_form(self, r) -> float:
        psi = self.whiten(r)
        return float(psi @ psi)

    def solve(self, r) -> np.ndarray:
        """``C^{-1} r``."""
        r = np.asarray(r, dtype=float)
        s = self.stds if r.ndim == 1 else self.stds[:, None]
        inner = r / s if self.diagonal else self.ldl.solve(r / s)
        return inner / s

    def subset(self, rows) -> "CovarianceModel":
        rows = np.asarray(rows)
        corr = None if self.correlation is None else self.correlation[np.ix_(rows, rows)]
        return CovarianceModel(self.stds[rows], corr, self.shrinkage_lambda, self.sigma2_known, floor=None)

    def to_json(self) -> dict:
        nz = []
        if self.correlation is not None:
            iu, ju = np.nonzero(np.triu(self.correlation, 1))
            nz = [[int(i), int(j), float(self.correlation[i, j])] for i, j in zip(iu, ju)]
        return {"stds": [float(s) for s in self.stds], "correlation_nonzeros": nz,
                "shrinkage_lambda": self.shrinkage_lambda}

    def export_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def from_json(cls, d: dict) -> "CovarianceModel":
        stds = np.asarray(d["stds"], dtype=float)
        nz = d.get("correlation_nonzeros") or []
        corr = None
        if nz:
            corr = np.eye(stds.size)
            for i, j, r in nz:
                corr[int(i), int(j)] = corr[int(j), int(i)] = float(r)
        return cls(stds, corr, d.get("shrinkage_lambda", 0.0), floor=None)


# -- synthetic data -----------------------------------------------------------

def synthetic_measurements(points, truth, stds, rng, occasions=None, correlation=None) -> MeasurementSet:
    """Records at ``points`` with values ``truth + noise``, noise ~ N(0, S A S).

    Negative draws are clipped to zero because records hold concentrations.
    """
    truth = np.asarray(truth, dtype=float)
    stds = np.broadcast_to(np.asarray(stds, dtype=float), truth.shape)
    z = rng.standard_normal(truth.size)
    if correlation is not None:
        z = np.linalg.cholesky(correlation) @ z
    values = np.maximum(truth + stds * z, 0.0)
    records = []
    for k, (pt, v) in enumerate(zip(points, values)):
        tracer, x, y, zc, month = pt
        occ = None if occasions is None else int(occasions[k])
        records.append(MeasurementRecord(tracer, int(x), int(y), int(zc), int(month), float(v), occ))
    return MeasurementSet(tuple(records))
