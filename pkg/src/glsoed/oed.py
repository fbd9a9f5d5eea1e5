"""Optimal experimental design: which further measurements help most.

A prospective measurement with model-derivative row ``j`` and variance
``s2`` adds ``j j^T / s2`` to the Fisher matrix, which needs no measured
value.  Prospective measurements are taken as uncorrelated with the
existing ones and with each other, so each update is rank one and the
covariance follows by Sherman-Morrison.

Two criteria rank designs: the mean relative standard deviation of the
parameters, and the per-process ratio of summed output standard
deviations to summed outputs, averaged over processes.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import uq
from .measurements import MeasurementSet, STD_FLOOR, TRACERS

log = logging.getLogger(__name__)

VARIANCE_FLOOR = STD_FLOOR ** 2
GAIN_TOL = 1e-15
DEFAULT_COST = {"PO4": 1.0, "DOP": 10.0}


class ZeroParameter(ValueError):
    """A parameter estimate is zero, so relative uncertainty is undefined."""


class ZeroOutputSum(ValueError):
    """The outputs of one process sum to zero or less."""


class EmptyCandidateSet(ValueError):
    """No design candidates given."""


@dataclass
class DesignCandidate:
    tracer: str
    x: int
    y: int
    z: int
    month: int
    variance: float = VARIANCE_FLOOR
    cost: float = 1.0
    jrow: np.ndarray | None = None

    def __post_init__(self):
        if self.tracer not in TRACERS:
            raise ValueError(f"unknown tracer {self.tracer!r}")
        if not self.variance >= VARIANCE_FLOOR - 1e-15:
            raise ValueError(f"candidate variance must be >= {VARIANCE_FLOOR}")
        if not self.cost >= 0:
            raise ValueError("candidate cost must be non-negative")
        if self.jrow is not None:
            self.jrow = np.asarray(self.jrow, dtype=float)
            if not np.all(np.isfinite(self.jrow)):
                raise ValueError("candidate derivative row must be finite")

    def point(self) -> tuple:
        return (self.tracer, self.x, self.y, self.z, self.month)


@dataclass
class DesignEvaluation:
    candidate_id: int
    psi_before: float
    psi_after: float
    gain: float
    relative_gain: float
    gain_per_cost: float


@dataclass
class DesignContext:
    """State the criteria need: ``V = sigma2 F^{-1}`` and the estimate.

    For the output criterion also the output Jacobian ``J_out``, the
    outputs ``f_out`` and the index sets of the processes.
    """

    V: np.ndarray
    theta_hat: np.ndarray
    sigma2: float
    J_out: np.ndarray | None = None
    f_out: np.ndarray | None = None
    index_sets: list | None = None

    @classmethod
    def from_bundle(cls, bundle: uq.FisherBundle, theta_hat=None, sigma2: float | None = None, **kw):
        approx = uq.covariance("F", bundle, sigma2)
        th = bundle.theta_hat if theta_hat is None else np.asarray(theta_hat, dtype=float)
        return cls(V=approx.V, theta_hat=th, sigma2=approx.sigma2, **kw)

    def updated(self, jrow, variance) -> "DesignContext":
        return DesignContext(v_update(self.V, jrow, variance, self.sigma2), self.theta_hat, self.sigma2,
                             self.J_out, self.f_out, self.index_sets)


# -- criteria -----------------------------------------------------------------

def psi_parameters(V_F, theta_hat) -> float:
    """Mean over parameters of ``sqrt(V_ii) / theta_i``."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    if np.any(theta_hat == 0):
        raise ZeroParameter("a parameter estimate is zero")
    d = np.diag(np.asarray(V_F, dtype=float)) if np.ndim(V_F) == 2 else np.asarray(V_F, dtype=float)
    return float(np.mean(np.sqrt(np.maximum(d, 0.0)) / theta_hat))


def tracer_index_sets(tracers) -> list:
    tracers = np.asarray(tracers)
    return [np.nonzero(tracers == t)[0] for t in (TRACERS if tracers.dtype.kind in "UO" else range(2))]


def psi_outputs(W_diag, ftilde_values, tracer_index_sets) -> float:
    """Average over processes of ``sum sqrt(W_ii) / sum f_i``."""
    W_diag = np.asarray(W_diag, dtype=float)
    f = np.asarray(ftilde_values, dtype=float)
    sd = np.sqrt(np.maximum(W_diag, 0.0))
    terms = []
    for idx in tracer_index_sets:
        idx = np.asarray(idx, dtype=int)
        total = float(np.sum(f[idx]))
        if not total > 0:
            raise ZeroOutputSum("outputs of a process must have a positive sum")
        terms.append(float(np.sum(sd[idx])) / total)
    return float(np.mean(terms))


# -- rank-one updates ---------------------------------------------------------

def fisher_update(F, jrow, variance) -> np.ndarray:
    """``F + j j^T / variance``."""
    j = np.asarray(jrow, dtype=float)
    return np.asarray(F, dtype=float) + np.outer(j, j) / variance


def v_update(V, jrow, variance, sigma2) -> np.ndarray:
    """Covariance ``sigma2 (F + j j^T / variance)^{-1}`` from ``V = sigma2 F^{-1}``."""
    V = np.asarray(V, dtype=float)
    j = np.asarray(jrow, dtype=float)
    u = V @ j
    denom = sigma2 * variance + float(j @ u)
    out = V - np.outer(u, u) / denom
    return 0.5 * (out + out.T)


def _updated_diagonals(V, Jc, variances, sigma2):
    """Per-candidate updated diag(V): rows of the returned (k, m) array."""
    U = Jc @ V
    denom = sigma2 * variances + np.einsum("ij,ij->i", Jc, U)
    return np.diag(V)[None, :] - U ** 2 / denom[:, None], U, denom


def _candidate_matrix(candidates):
    missing = [k for k, c in enumerate(candidates) if c.jrow is None]
    if missing:
        raise ValueError(f"candidates without derivative rows: {missing[:5]}")
    Jc = np.vstack([c.jrow for c in candidates])
    var = np.array([c.variance for c in candidates], dtype=float)
    return Jc, var


def criterion_value(ctx: DesignContext, criterion: str, V=None) -> float:
    V = ctx.V if V is None else V
    if criterion == "params":
        return psi_parameters(V, ctx.theta_hat)
    if criterion == "outputs":
        W = uq.output_covariance(ctx.J_out, V, full=False)
        return psi_outputs(W, ctx.f_out, ctx.index_sets)
    raise ValueError(f"unknown criterion {criterion!r}")


def _psi_after(ctx: DesignContext, candidates, criterion: str, block: int = 512) -> np.ndarray:
    Jc, var = _candidate_matrix(candidates)
    if criterion == "params":
        diag, _, _ = _updated_diagonals(ctx.V, Jc, var, ctx.sigma2)
        sd = np.sqrt(np.maximum(diag, 0.0))
        if np.any(ctx.theta_hat == 0):
            raise ZeroParameter("a parameter estimate is zero")
        return np.mean(sd / ctx.theta_hat[None, :], axis=1)
    if criterion != "outputs":
        raise ValueError(f"unknown criterion {criterion!r}")
    if ctx.J_out is None or ctx.f_out is None:
        raise ValueError("output criterion needs output Jacobian and values")
    W0 = uq.output_covariance(ctx.J_out, ctx.V, full=False)
    sets = ctx.index_sets if ctx.index_sets is not None else [np.arange(ctx.f_out.size)]
    sums = []
    for idx in sets:
        s = float(np.sum(ctx.f_out[idx]))
        if not s > 0:
            raise ZeroOutputSum("outputs of a process must have a positive sum")
        sums.append(s)
    out = np.empty(len(candidates))
    for start in range(0, len(candidates), block):
        Jb, vb = Jc[start:start + block], var[start:start + block]
        U = Jb @ ctx.V  # (k, m)
        denom = ctx.sigma2 * vb + np.einsum("ij,ij->i", Jb, U)
        P = ctx.J_out @ U.T  # (n_out, k)
        W = W0[:, None] - P ** 2 / denom[None, :]
        sd = np.sqrt(np.maximum(W, 0.0))
        terms = [sd[np.asarray(idx, dtype=int)].sum(axis=0) / s for idx, s in zip(sets, sums)]
        out[start:start + block] = np.mean(terms, axis=0)
    return out


def evaluate_candidates(ctx: DesignContext, candidates, criterion: str = "params") -> list:
    """Criterion before and after adding each candidate on its own."""
    if not candidates:
        raise EmptyCandidateSet("no design candidates")
    before = criterion_value(ctx, criterion)
    after = _psi_after(ctx, candidates, criterion)
    out = []
    for k, (c, a) in enumerate(zip(candidates, after)):
        gain = before - float(a)
        out.append(DesignEvaluation(candidate_id=k, psi_before=before, psi_after=float(a), gain=gain,
                                    relative_gain=gain / before if before > 0 else 0.0,
                                    gain_per_cost=gain / c.cost if c.cost > 0 else np.inf))
    return out


@dataclass
class Selection:
    chosen: list = field(default_factory=list)  # candidate ids in selection order
    cumulative_cost: list = field(default_factory=list)
    cumulative_psi: list = field(default_factory=list)
    gains: list = field(default_factory=list)
    psi_initial: float = float("nan")
    context: DesignContext | None = None

    def to_json(self, candidates=None) -> dict:
        items = []
        for k, cid in enumerate(self.chosen):
            item = {"candidate_id": int(cid), "gain": self.gains[k],
                    "cumulative_cost": self.cumulative_cost[k], "cumulative_psi": self.cumulative_psi[k]}
            if candidates is not None:
                c = candidates[cid]
                item.update(tracer=c.tracer, x=c.x, y=c.y, z=c.z, month=c.month, cost=c.cost)
            items.append(item)
        return {"psi_initial": self.psi_initial, "selection": items}


def select_designs(ctx: DesignContext, candidates, budget: float, criterion: str = "params",
                   mode: str = "greedy") -> Selection:
    """Greedy selection by gain per cost under a total cost limit."""
    if mode != "greedy":
        raise ValueError("only greedy selection is implemented")
    if not candidates:
        raise EmptyCandidateSet("no design candidates")
    costs = np.array([c.cost for c in candidates], dtype=float)
    if np.any(costs <= 0):
        raise ValueError("candidate costs must be positive for selection")
    current = ctx
    psi = criterion_value(current, criterion)
    sel = Selection(psi_initial=psi)
    spent = 0.0
    remaining = np.ones(len(candidates), dtype=bool)
    while True:
        feasible = np.nonzero(remaining & (costs <= budget - spent + 1e-12))[0]
        if feasible.size == 0:
            break
        after = _psi_after(current, [candidates[k] for k in feasible], criterion)
        gains = psi - after
        ratio = gains / costs[feasible]
        best = int(np.argmax(ratio))
        if gains[best] <= GAIN_TOL:
            break
        k = int(feasible[best])
        remaining[k] = False
        spent += costs[k]
        current = current.updated(candidates[k].jrow, candidates[k].variance)
        psi = criterion_value(current, criterion)
        sel.chosen.append(k)
        sel.gains.append(float(gains[best]))
        sel.cumulative_cost.append(spent)
        sel.cumulative_psi.append(psi)
    sel.context = current
    return sel


# -- files --------------------------------------------------------------------

CANDIDATE_HEADER = ("tracer", "x", "y", "z", "month", "variance", "cost")


def load_candidates(path) -> list:
    from .measurements import ParseError

    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyCandidateSet(f"{path}: empty file")
        if tuple(h.strip() for h in header) != CANDIDATE_HEADER:
            raise ParseError(f"expected header {','.join(CANDIDATE_HEADER)}", 1)
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            try:
                out.append(DesignCandidate(row[0].strip(), int(row[1]), int(row[2]), int(row[3]), int(row[4]),
                                           float(row[5]), float(row[6])))
            except (ValueError, IndexError) as exc:
                raise ParseError(str(exc), reader.line_num) from exc
    if not out:
        raise EmptyCandidateSet(f"{path}: no candidates")
    return out


def write_evaluations(path, evaluations) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["candidate_id", "psi_before", "psi_after", "gain", "gain_per_cost"])
        for e in evaluations:
            w.writerow([e.candidate_id, repr(e.psi_before), repr(e.psi_after), repr(e.gain), repr(e.gain_per_cost)])


def write_selection(path, selection: Selection, candidates=None, meta: dict | None = None) -> None:
    obj = selection.to_json(candidates)
    if meta is not None:
        obj = {"meta": meta, **obj}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


# -- sequential design --------------------------------------------------------

@dataclass
class RoundResult:
    measurements: MeasurementSet
    theta_hat: np.ndarray
    bundle: uq.FisherBundle
    context: DesignContext
    evaluations: list
    ranking: list
    estimate: object = None


def sequential_round(problem, measurements: MeasurementSet, theta_hat, new_measurements, candidates,
                     criterion: str = "params", previous: RoundResult | None = None) -> RoundResult:
    """Add new measurements, re-estimate from ``theta_hat`` and re-rank the candidates.

    The re-estimation is a local solve warm-started at the previous
    estimate.  With no new measurements and a ``previous`` round the
    previous result is returned unchanged.
    """
    from .estimation import build_bundle, estimate

    new = list(getattr(new_measurements, "records", new_measurements) or [])
    if not new and previous is not None:
        return previous
    mset = measurements.extend(new)
    objective = problem.objective(mset, theta0=theta_hat)
    if new:
        est = estimate(problem, mset, start=theta_hat, multistart=False, objective=objective)
        theta_new = est.theta_hat
    else:
        est = None
        theta_new = np.asarray(theta_hat, dtype=float)
    bundle = build_bundle(objective, theta_new, with_hessian=False)
    ctx = DesignContext.from_bundle(bundle, theta_new)
    provider = problem.make_provider([c.point() for c in candidates])
    from . import derivatives

    Jc = derivatives.jacobian(provider, theta_new, problem.bounds.lower, problem.bounds.upper) \
        if not hasattr(provider, "jacobian") else provider.jacobian(theta_new, problem.bounds.lower,
                                                                     problem.bounds.upper)[1]
    for c, j in zip(candidates, Jc):
        c.jrow = j
    evals = evaluate_candidates(ctx, candidates, criterion)
    ranking = sorted(range(len(evals)), key=lambda k: (-evals[k].gain_per_cost, k))
    return RoundResult(mset, theta_new, bundle, ctx, evals, ranking, est)
