"""Command-line entry point: simulate, estimate, uq, oed and pipeline.

Every command reads a JSON run configuration (paths inside it are relative
to the config file), writes its results to ``--out`` and stamps each file
with a ``meta`` block holding the tool version and a hash of the effective
configuration.  Exit codes: 1 bad input or configuration, 2 spin-up not
periodic, 3 estimation failed, 4 Fisher matrix rank deficient, 5 invalid
design candidates.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, oed, uq
from .biogeomodel import BiogeoModel, BiogeoProvider, ModelConfig, NotPeriodic, TransportSet, default_grid
from .biogeomodel.forcing import make_forcing
from .biogeomodel.grid import Grid
from .biogeomodel.model import TRACERS
from .derivatives import ModelFailure
from .estimation import EstimationProblem, build_bundle, estimate
from .measurements import CovarianceModel, EmptyDataset, ParseError, load_measurements, save_measurements
from .optimizer import DEFAULT_CONFIG, AllSolvesFailed
from .parameters import DEFAULT_BOUNDS, PARAMETER_NAMES, ParameterBounds, as_dict, from_dict
from .synthetic import DEFAULTS as SYNTHETIC_DEFAULTS, make_campaign

log = logging.getLogger("glsoed")

EXIT_INPUT, EXIT_SPINUP, EXIT_ESTIMATE, EXIT_RANK, EXIT_OED = 1, 2, 3, 4, 5
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


# -- configuration --------------------------------------------------------------

@dataclass
class RunConfig:
    raw: dict
    base: Path
    seed: int = 0
    threads: int = 1
    model: dict = field(default_factory=dict)
    grid: dict | None = None
    transports: Path | None = None
    theta: np.ndarray | None = None
    bounds: ParameterBounds = DEFAULT_BOUNDS
    measurements: Path | None = None
    synthetic: dict | None = None
    estimator: str = "gls"
    optimizer: dict = field(default_factory=dict)
    uq: dict = field(default_factory=dict)
    oed: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        text = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def meta(self, command: str) -> dict:
        return {"tool": "glsoed", "version": __version__, "command": command, "config_sha256": self.digest,
                "seed": self.seed}


def _path(base: Path, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def _theta(value, what: str) -> np.ndarray:
    if isinstance(value, dict):
        missing = [n for n in PARAMETER_NAMES if n not in value]
        if missing:
            raise CliError(f"{what}: missing parameters {missing}")
        return from_dict(value)
    theta = np.asarray(value, dtype=float)
    if theta.shape != (len(PARAMETER_NAMES),):
        raise CliError(f"{what}: need {len(PARAMETER_NAMES)} values")
    return theta


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Read and validate a run configuration; ``overrides`` come from the command line."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise CliError("config must be a JSON object")
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    if "max_years" in overrides:
        raw.setdefault("model", {})["max_years"] = int(overrides["max_years"])
    for key in ("seed", "threads", "estimator"):
        if key in overrides:
            raw[key] = overrides[key]
    if "criterion" in overrides:
        raw.setdefault("oed", {})["criterion"] = overrides["criterion"]
    if "budget" in overrides:
        raw.setdefault("oed", {})["budget"] = float(overrides["budget"])
    base = path.resolve().parent
    cfg = RunConfig(raw=raw, base=base)
    cfg.seed = int(raw.get("seed", 0))
    cfg.threads = int(raw.get("threads", 1))
    cfg.model = dict(raw.get("model", {}))
    unknown = set(cfg.model) - set(ModelConfig.__dataclass_fields__) - {"grid", "transports"}
    if unknown:
        raise CliError(f"unknown model settings {sorted(unknown)}")
    cfg.grid = cfg.model.pop("grid", None)
    if cfg.model.get("transports") is not None:
        cfg.transports = _path(base, cfg.model.pop("transports"))
    else:
        cfg.model.pop("transports", None)
    params = raw.get("parameters", {})
    if "bounds" in params:
        b = params["bounds"]
        try:
            cfg.bounds = ParameterBounds(_theta(b["lower"], "lower"), _theta(b["upper"], "upper"),
                                         _theta(b.get("initial", DEFAULT_BOUNDS.initial), "initial"))
        except (KeyError, ValueError) as exc:
            raise CliError(f"bad parameter bounds: {exc}") from exc
    if "theta" in params:
        cfg.theta = _theta(params["theta"], "parameters.theta")
    if raw.get("measurements") is not None:
        cfg.measurements = _path(base, raw["measurements"])
    cfg.synthetic = raw.get("synthetic")
    cfg.estimator = raw.get("estimator", "gls")
    if cfg.estimator not in ("gls", "wls", "ols"):
        raise CliError(f"estimator must be gls, wls or ols, not {cfg.estimator!r}")
    cfg.optimizer = dict(DEFAULT_CONFIG)
    cfg.optimizer["seed"] = cfg.seed
    cfg.optimizer.update(raw.get("optimizer", {}))
    cfg.uq = {"gamma": 0.99, "kind": "FH", "hessian": True}
    cfg.uq.update(raw.get("uq", {}))
    if not 0 < float(cfg.uq["gamma"]) < 1:
        raise CliError("uq.gamma must lie in (0, 1)")
    if cfg.uq["kind"] not in uq.KINDS:
        raise CliError(f"uq.kind must be one of {uq.KINDS}")
    cfg.oed = {"criterion": "params", "budget": 10.0, "candidates": "auto", "variance": oed.VARIANCE_FLOOR,
               "costs": dict(oed.DEFAULT_COST)}
    cfg.oed.update(raw.get("oed", {}))
    if cfg.oed["criterion"] not in ("params", "outputs"):
        raise CliError("oed.criterion must be params or outputs")
    if cfg.oed["candidates"] != "auto":
        cfg.oed["candidates"] = _path(base, cfg.oed["candidates"])
    for p in (cfg.transports, cfg.measurements, None if cfg.oed["candidates"] == "auto" else cfg.oed["candidates"]):
        if p is not None and not p.exists():
            raise CliError(f"referenced path does not exist: {p}")
    return cfg


def build_model(cfg: RunConfig) -> BiogeoModel:
    mcfg = ModelConfig.from_dict(cfg.model)
    if cfg.grid is None:
        grid = default_grid()
    elif "kmax" in cfg.grid:
        grid = Grid.from_dict(cfg.grid)
    else:
        grid = default_grid(**cfg.grid)
    if cfg.transports is None:
        return BiogeoModel.default(mcfg, grid)
    transports = TransportSet.load(cfg.transports)
    forcing = make_forcing(grid, peak=mcfg.q_sw_peak, steps_per_year=mcfg.steps_per_year)
    return BiogeoModel(grid, transports, forcing, mcfg)


# -- output helpers ---------------------------------------------------------------

def write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=1, allow_nan=True) + "\n", encoding="utf-8")


def write_csv(path: Path, meta: dict, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("# meta " + json.dumps(meta, sort_keys=True) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _num(v) -> str:
    return repr(float(v))


def _points_of(model: BiogeoModel, selector) -> list:
    cells = model.grid.cells
    return [(TRACERS[t], *map(int, cells[c]), int(mo)) for t, c, mo in zip(selector.tracer, selector.cell,
                                                                          selector.month)]


# -- simulate ---------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, out: Path) -> dict:
    model = build_model(cfg)
    theta = cfg.theta if cfg.theta is not None else cfg.bounds.initial
    meta = cfg.meta("simulate")
    try:
        run = model.spin_up(theta, raise_on_fail=True)
    except NotPeriodic as exc:
        res = exc.run
        write_json(out / "spinup.json", {"meta": meta, "theta": as_dict(theta), "converged": False,
                                         "years_used": exc.years, "residual": exc.residual,
                                         "residuals": res.residuals if res else []})
        raise CliError(f"spin-up not periodic after {exc.years} years (residual {exc.residual:.3e})",
                       EXIT_SPINUP) from exc
    snaps = out / "snapshots"
    snaps.mkdir(exist_ok=True)
    cells = model.grid.cells
    for month in range(12):
        rows = []
        for t, tracer in enumerate(TRACERS):
            values = run.monthly[month, t]
            # round-off negatives above the reporting threshold are shown as zero
            values = np.where((values < 0) & (values >= -1e-12), 0.0, values)
            rows += [(tracer, *map(int, cells[k]), month, _num(v)) for k, v in enumerate(values)]
        write_csv(snaps / f"month_{month:02d}.csv", meta, ("tracer", "x", "y", "z", "month", "value"), rows)
    report = {"meta": meta, "theta": as_dict(theta), "converged": True, "years_used": run.years,
              "residual": run.residual, "residuals": run.residuals, "tol": model.config.tol,
              "max_years": model.config.max_years}
    write_json(out / "spinup.json", report)
    return report


# -- estimate ---------------------------------------------------------------------

def _problem(cfg: RunConfig, model: BiogeoModel, covariance=None) -> EstimationProblem:
    def make_provider(points):
        return BiogeoProvider(model, model.selector(points), threads=cfg.threads)

    return EstimationProblem(make_provider, cfg.bounds, cfg.estimator, dict(cfg.optimizer), covariance)


def _measurements(cfg: RunConfig, model: BiogeoModel, out: Path):
    """(MeasurementSet, known covariance or None); synthetic sets are written to ``out``."""
    if cfg.measurements is not None:
        try:
            return load_measurements(cfg.measurements, model.grid), None
        except (ParseError, EmptyDataset) as exc:
            raise CliError(f"{cfg.measurements}: {exc}") from exc
    if cfg.synthetic is None:
        raise CliError("config needs either 'measurements' or 'synthetic'")
    syn = dict(cfg.synthetic)
    truth = _theta(syn.pop("theta"), "synthetic.theta") if "theta" in syn else cfg.bounds.initial.copy()
    if "factors" in syn:
        truth = truth * np.asarray(syn.pop("factors"), dtype=float)
    known = bool(syn.pop("known_covariance", False))
    syn.setdefault("seed", cfg.seed)
    try:
        camp = make_campaign(model, truth, syn)
    except NotPeriodic as exc:
        raise CliError(f"spin-up for synthetic data not periodic: {exc}", EXIT_SPINUP) from exc
    save_measurements(camp.measurements, out / "measurements.csv", with_occasion=True)
    return camp.measurements, _known_covariance(cfg, camp.measurements) if known else None


def _known_covariance(cfg: RunConfig, mset) -> CovarianceModel:
    """Diagonal covariance of the synthetic noise, with the scale known to be one."""
    noise = dict(SYNTHETIC_DEFAULTS["noise_std"])
    noise.update(cfg.synthetic.get("noise_std", {}))
    return CovarianceModel([noise[r.tracer] for r in mset.records], sigma2_known=1.0)


def _minimum_json(r) -> dict:
    return {"theta": as_dict(r.theta_star), "phi": r.phi_star, "iterations": r.iterations,
            "converged": bool(r.converged), "reason": r.reason, "gradient_norm": r.gradient_norm}


def cmd_estimate(cfg: RunConfig, out: Path) -> dict:
    model = build_model(cfg)
    mset, known = _measurements(cfg, model, out)
    problem = _problem(cfg, model, known)
    cov = problem.covariance_for(mset)
    try:
        res = estimate(problem, mset, start=cfg.bounds.initial, multistart=bool(cfg.optimizer.get("multistart", True)),
                       objective=problem.objective(mset, cfg.bounds.initial, cov))
    except AllSolvesFailed as exc:
        raise CliError(f"estimation failed: {exc}", EXIT_ESTIMATE) from exc
    state = res.state
    report = {
        "meta": cfg.meta("estimate"),
        "estimator": cfg.estimator,
        "covariance": "known" if known is not None else cfg.estimator,
        "theta_hat": as_dict(res.theta_hat),
        "phi": res.phi,
        "phi_per_n": res.phi_per_n,
        "n": res.n,
        "m": len(PARAMETER_NAMES),
        "converged": res.converged,
        "shrinkage_lambda": cov.shrinkage_lambda,
        "n_evals": res.n_evals,
        "n_gradients": res.n_gradients,
        "minima": [_minimum_json(r) for r in res.minima],
        "multistart": None if state is None else {
            "n_start_points": len(state.start_points), "removed_merit": state.removed_merit,
            "removed_distance": state.removed_distance, "removed_budget": state.removed_budget,
            "failed": state.failed, "local_solves": len(state.found_minima_all)},
        "measurements": str(cfg.measurements if cfg.measurements is not None else "measurements.csv"),
    }
    write_json(out / "estimate.json", report)
    return report


def _load_estimate(cfg: RunConfig, out: Path, path=None):
    path = Path(path) if path else out / "estimate.json"
    if not path.exists():
        raise CliError(f"no estimate at {path}; run 'estimate' first or pass --estimate")
    est = json.loads(path.read_text(encoding="utf-8"))
    theta = from_dict(est["theta_hat"])
    model = build_model(cfg)
    if cfg.measurements is not None:
        mset = load_measurements(cfg.measurements, model.grid)
        known = None
    else:
        mset = load_measurements(path.parent / "measurements.csv", model.grid)
        known = _known_covariance(cfg, mset) if (cfg.synthetic or {}).get("known_covariance") else None
    problem = _problem(cfg, model, known)
    return theta, model, mset, problem


def _bundle(problem, mset, theta, with_hessian: bool):
    objective = problem.objective(mset, theta)
    try:
        return build_bundle(objective, theta, with_hessian=with_hessian)
    except uq.RankDeficient as exc:
        raise CliError(f"Fisher matrix rank deficient: {exc}", EXIT_RANK) from exc
    except ModelFailure as exc:
        raise CliError(f"model failure while building derivatives: {exc}", EXIT_SPINUP) from exc


def _full_outputs(cfg, model, theta):
    provider = BiogeoProvider(model, model.full_selector(), threads=cfg.threads)
    try:
        return provider.jacobian(theta, cfg.bounds.lower, cfg.bounds.upper)
    except ModelFailure as exc:
        raise CliError(f"model failure while building output derivatives: {exc}", EXIT_SPINUP) from exc


# -- uq -----------------------------------------------------------------------------

def cmd_uq(cfg: RunConfig, out: Path, estimate_path=None) -> dict:
    theta, model, mset, problem = _load_estimate(cfg, out, estimate_path)
    gamma = float(cfg.uq["gamma"])
    bundle = _bundle(problem, mset, theta, bool(cfg.uq.get("hessian", True)))
    sigma2 = cfg.uq.get("sigma2")
    if sigma2 is None and problem.covariance is not None:
        sigma2 = problem.covariance.sigma2_known
    kinds = uq.all_covariances(bundle, sigma2)
    report = {"meta": cfg.meta("uq"), "n": bundle.n, "m": bundle.m, "dof": bundle.dof, "gamma": gamma,
              "phi": bundle.phi, "sigma2_hat": bundle.sigma2_hat, "theta_hat": as_dict(theta), "kinds": {}}
    for kind, approx in kinds.items():
        if not approx.usable:
            report["kinds"][kind] = {"usable": False}
            continue
        cis = uq.parameter_cis(theta, approx.V, gamma, bundle.n, bundle.m)
        entry = uq.uq_report(theta, approx, cis)
        entry["lower"] = cis.lower.tolist()
        entry["upper"] = cis.upper.tolist()
        report["kinds"][kind] = entry
    kind = cfg.uq["kind"]
    if not kinds[kind].usable:
        log.warning("covariance kind %s unusable (Hessian not positive definite), using F for outputs", kind)
        kind = "F"
    report["output_kind"] = kind
    f_full, J_full = _full_outputs(cfg, model, theta)
    W = uq.output_covariance(J_full, kinds[kind].V, full=False)
    ocis = uq.output_cis(f_full, W, gamma, bundle.n, bundle.m)
    report["output_multiplier"] = ocis.multiplier
    sel = model.full_selector()
    rows = [(p[0], p[1], p[2], p[3], p[4], _num(v), _num(h), _num(lo), _num(hi))
            for p, v, h, lo, hi in zip(_points_of(model, sel), f_full, ocis.half_widths, ocis.lower, ocis.upper)]
    write_csv(out / "uq_output.csv", cfg.meta("uq"),
              ("tracer", "x", "y", "z", "month", "value", "half_width", "lower", "upper"), rows)
    write_json(out / "uq_params.json", report)
    return report


# -- oed ----------------------------------------------------------------------------

def cmd_oed(cfg: RunConfig, out: Path, estimate_path=None) -> dict:
    theta, model, mset, problem = _load_estimate(cfg, out, estimate_path)
    ocfg = cfg.oed
    if ocfg["candidates"] == "auto":
        sel = model.full_selector()
        var = float(ocfg["variance"])
        costs = ocfg["costs"]
        candidates = [oed.DesignCandidate(p[0], *p[1:], variance=var, cost=float(costs[p[0]]))
                      for p in _points_of(model, sel)]
    else:
        try:
            candidates = oed.load_candidates(ocfg["candidates"])
        except (ParseError, oed.EmptyCandidateSet, ValueError) as exc:
            raise CliError(f"design candidates: {exc}", EXIT_OED) from exc
    if not candidates:
        raise CliError("no design candidates", EXIT_OED)
    bundle = _bundle(problem, mset, theta, with_hessian=False)
    f_full, J_full = _full_outputs(cfg, model, theta)
    if ocfg["candidates"] == "auto":
        jrows = J_full
    else:
        prov = BiogeoProvider(model, model.selector([c.point() for c in candidates]), threads=cfg.threads)
        jrows = prov.jacobian(theta, cfg.bounds.lower, cfg.bounds.upper)[1]
    for c, j in zip(candidates, jrows):
        c.jrow = j
    full = model.full_selector()
    sigma2 = None if problem.covariance is None else problem.covariance.sigma2_known
    ctx = oed.DesignContext.from_bundle(bundle, theta, sigma2, J_out=J_full, f_out=f_full,
                                        index_sets=oed.tracer_index_sets(full.tracer))
    criterion = ocfg["criterion"]
    try:
        evals = oed.evaluate_candidates(ctx, candidates, criterion)
        selection = oed.select_designs(ctx, candidates, float(ocfg["budget"]), criterion)
    except (oed.EmptyCandidateSet, oed.ZeroParameter, oed.ZeroOutputSum, ValueError) as exc:
        raise CliError(f"design evaluation: {exc}", EXIT_OED) from exc
    meta = cfg.meta("oed")
    rows = [(e.candidate_id, c.tracer, c.x, c.y, c.z, c.month, _num(c.variance), _num(c.cost), _num(e.psi_before),
             _num(e.psi_after), _num(e.gain), _num(e.relative_gain), _num(e.gain_per_cost))
            for e, c in zip(evals, candidates)]
    write_csv(out / "oed_gains.csv", meta, ("candidate_id", "tracer", "x", "y", "z", "month", "variance", "cost",
                                            "psi_before", "psi_after", "gain", "relative_gain", "gain_per_cost"),
              rows)
    report = {"meta": meta, "criterion": criterion, "budget": float(ocfg["budget"]),
              "n_candidates": len(candidates), **selection.to_json(candidates)}
    write_json(out / "oed_selection.json", report)
    return report


# -- entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run configuration (JSON)")
    common.add_argument("--out", default=None, help="output directory (default: ./out)")
    common.add_argument("--seed", type=int, default=None, help="seed for synthetic data and start points")
    common.add_argument("--threads", type=int, default=None, help="threads for finite-difference spin-ups")
    common.add_argument("--max-years", type=int, default=None, help="spin-up year cap")

    parser = argparse.ArgumentParser(prog="glsoed", description="GLS parameter estimation, uncertainty "
                                     "quantification and experimental design for a marine phosphorus model")
    parser.add_argument("--version", action="version", version=f"glsoed {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="spin up and write monthly snapshots")
    p = sub.add_parser("estimate", parents=[common], help="fit parameters to measurements")
    p.add_argument("--estimator", choices=("gls", "wls", "ols"), default=None)
    p = sub.add_parser("uq", parents=[common], help="parameter and output uncertainty")
    p.add_argument("--estimate", default=None, help="estimate.json (default: in --out)")
    p = sub.add_parser("oed", parents=[common], help="rank and select further measurements")
    p.add_argument("--estimate", default=None, help="estimate.json (default: in --out)")
    p.add_argument("--criterion", choices=("params", "outputs"), default=None)
    p.add_argument("--budget", type=float, default=None)
    p = sub.add_parser("pipeline", parents=[common], help="simulate, estimate, uq and oed in sequence")
    p.add_argument("--estimator", choices=("gls", "wls", "ols"), default=None)
    p.add_argument("--criterion", choices=("params", "outputs"), default=None)
    p.add_argument("--budget", type=float, default=None)
    return parser


def _setup_logging() -> None:
    level = LOG_LEVELS.get(os.environ.get("GLSOED_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("glsoed").setLevel(level)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    overrides = {"seed": args.seed, "threads": args.threads, "max_years": args.max_years,
                 "estimator": getattr(args, "estimator", None), "criterion": getattr(args, "criterion", None),
                 "budget": getattr(args, "budget", None)}
    try:
        cfg = load_config(args.config, overrides)
        out = Path(args.out) if args.out else Path("out")
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "simulate":
            cmd_simulate(cfg, out)
        elif args.command == "estimate":
            cmd_estimate(cfg, out)
        elif args.command == "uq":
            cmd_uq(cfg, out, args.estimate)
        elif args.command == "oed":
            cmd_oed(cfg, out, args.estimate)
        else:
            cmd_simulate(cfg, out)
            cmd_estimate(cfg, out)
            cmd_uq(cfg, out)
            cmd_oed(cfg, out)
    except CliError as exc:
        print(f"glsoed: error: {exc}", file=sys.stderr)
        return exc.code
    except (ParseError, EmptyDataset, ValueError) as exc:
        print(f"glsoed: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return 0


if __name__ == "__main__":
    sys.exit(main())
