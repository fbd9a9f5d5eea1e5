"""Acceptance criteria, each run at its stated tolerance with one PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -s`` to see the lines as they happen;
they are also collected in the terminal summary.
"""
import time

import numpy as np
from scipy import stats

from glsoed import derivatives, oed, uq
from glsoed.biogeomodel import BiogeoModel, BiogeoProvider
from glsoed.derivatives import fd_step, typical_magnitude
from glsoed.estimation import build_bundle
from glsoed.measurements import CovarianceModel
from glsoed.numstat import t_quantile
from glsoed.objective import ScaledObjective, evaluate_phi
from glsoed.optimizer import minimize_objective
from glsoed.parameters import DEFAULT_BOUNDS, PARAMETER_NAMES
from glsoed.synthetic import campaign_points

T_TABLE = {
    0.90: [1.812, 1.660, 1.646, 1.645, 1.645],
    0.95: [2.228, 1.984, 1.962, 1.960, 1.960],
    0.98: [2.764, 2.364, 2.330, 2.327, 2.326],
    0.99: [3.169, 2.626, 2.581, 2.576, 2.576],
}
DOFS = [10, 100, 1000, 10_000, 100_000]


def random_spd(rng, n, cond):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (Q * np.geomspace(1.0, 1.0 / cond, n)) @ Q.T


def random_correlation(rng, n, cond):
    A = random_spd(rng, n, cond)
    d = 1.0 / np.sqrt(np.diag(A))
    A = A * np.outer(d, d)
    np.fill_diagonal(A, 1.0)
    return 0.5 * (A + A.T)


def test_c01_t_table(acceptance):
    t0 = time.perf_counter()
    got = {g: [round(t_quantile((1 + g) / 2, k), 3) for k in DOFS] for g in T_TABLE}
    elapsed = time.perf_counter() - t0
    wrong = [(g, k) for g in T_TABLE for k, a, b in zip(DOFS, got[g], T_TABLE[g]) if a != b]
    ok = not wrong and elapsed < 1.0
    acceptance(1, ok, f"t-quantile table 20/20 entries match={not wrong} ({elapsed:.3f} s)")
    assert ok, wrong


def test_c02_linear_covariances_equal(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    n, m = 200, 8
    J = rng.standard_normal((n, m))
    C = random_spd(rng, n, 1e3) + 1e-3 * np.eye(n)
    stds = np.sqrt(np.diag(C))
    cov = CovarianceModel(stds, C / np.outer(stds, stds), floor=None)
    theta = rng.standard_normal(m)
    y = J @ theta + np.linalg.cholesky(C) @ rng.standard_normal(n)
    theta_hat = np.linalg.solve(J.T @ np.linalg.solve(C, J), J.T @ np.linalg.solve(C, y))
    r = y - J @ theta_hat
    # linear model: the Hessian of phi / 2 has no model-curvature term
    H = J.T @ np.linalg.solve(C, J)
    bundle = uq.fisher_bundle(J, cov, r, cov.quadratic_form(r), H=H, theta_hat=theta_hat)
    V = uq.all_covariances(bundle)
    worst = max(float(np.max(np.abs(V[k].V - V["F"].V) / np.abs(V["F"].V))) for k in ("H", "FH"))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 5
    acceptance(2, ok, f"linear model V_F, V_H, V_FH max rel diff {worst:.2e} <= 1e-10 ({elapsed:.2f} s)")
    assert ok


def test_c03_hessian_identity(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    n = 50
    x = np.linspace(0.0, 2.0, n)

    def f(t):
        return t[0] * np.exp(-t[1] * x) + t[2] * x ** 2

    def jac(t):
        e = np.exp(-t[1] * x)
        return np.column_stack([e, -t[0] * x * e, x ** 2])

    def model_hessians(t):
        e = np.exp(-t[1] * x)
        Hf = np.zeros((n, 3, 3))
        Hf[:, 0, 1] = Hf[:, 1, 0] = -x * e
        Hf[:, 1, 1] = t[0] * x ** 2 * e
        return Hf

    theta = np.array([1.5, 0.8, 0.3])
    C = 0.01 * random_correlation(rng, n, 50.0)
    y = f(theta) + 3 * np.linalg.cholesky(C) @ rng.standard_normal(n)
    Cinv = np.linalg.inv(C)
    phi = lambda t: float((y - f(t)) @ Cinv @ (y - f(t)))
    H_fd = derivatives.hessian_phi(phi, theta)
    J = jac(theta)
    # second derivative of phi / 2; the residual enters as f - y
    w = Cinv @ (f(theta) - y)
    H_exact = J.T @ Cinv @ J + np.einsum("kij,k->ij", model_hessians(theta), w)
    rel = float(np.max(np.abs(H_fd - H_exact)) / np.max(np.abs(H_exact)))
    elapsed = time.perf_counter() - t0
    ok = rel <= 1e-3 and elapsed < 30
    acceptance(3, ok, f"FD Hessian vs F + curvature term rel err {rel:.2e} <= 1e-3 ({elapsed:.2f} s)")
    assert ok


def test_c04_ci_coverage(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    n, m, reps = 60, 3, 2000
    X = np.column_stack([np.ones(n), np.linspace(0, 1, n), rng.standard_normal(n)])
    theta = np.array([1.0, -2.0, 0.5])
    C = 0.04 * random_correlation(rng, n, 20.0)
    L = np.linalg.cholesky(C)
    stds = np.sqrt(np.diag(C))
    cov = CovarianceModel(stds, C / np.outer(stds, stds), floor=None)
    Xw = cov.whiten(X)
    hits = np.zeros(m)
    for _ in range(reps):
        y = X @ theta + L @ rng.standard_normal(n)
        theta_hat = np.linalg.lstsq(Xw, cov.whiten(y), rcond=None)[0]
        r = y - X @ theta_hat
        bundle = uq.fisher_bundle(X, cov, r, cov.quadratic_form(r))
        ci = uq.parameter_cis(theta_hat, uq.covariance("F", bundle).V, 0.99, n, m)
        hits += ci.contains(theta)
    coverage = hits / reps
    elapsed = time.perf_counter() - t0
    ok = bool(np.all(np.abs(coverage - 0.99) <= 0.02)) and elapsed < 120
    acceptance(4, ok, f"99% CI coverage {np.round(coverage, 4).tolist()} within 0.99 +- 0.02 ({elapsed:.1f} s)")
    assert ok


def test_c05_sandwich_misspecified(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    n, reps, sigma, rho = 200, 1000, 0.1, 0.5
    x = np.linspace(0.0, 1.0, n)
    theta_true = -1.0
    # true noise is AR(1) correlated; the fit assumes independent errors
    true_cov = sigma ** 2 * rho ** np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
    L = np.linalg.cholesky(true_cov)
    assumed = CovarianceModel(np.full(n, sigma))
    model = lambda t: np.exp(t[0] * x)
    estimates, v_f, v_fh = [], [], []
    for _ in range(reps):
        y = model([theta_true]) + L @ rng.standard_normal(n)
        fit = stats.linregress(x, np.log(np.clip(y, 1e-3, None)))
        t = np.array([fit.slope])
        for _ in range(50):  # Gauss-Newton to the least squares minimum
            f = model(t)
            J = (x * f)[:, None]
            step = np.linalg.lstsq(J, y - f, rcond=None)[0]
            t = t + step
            if abs(step[0]) < 1e-14:
                break
        f = model(t)
        J = (x * f)[:, None]
        r = y - f
        H = J.T @ J / sigma ** 2 - np.sum(x ** 2 * f * r) / sigma ** 2
        bundle = uq.fisher_bundle(J, assumed, r, assumed.quadratic_form(r), H=np.atleast_2d(H))
        estimates.append(t[0])
        v_f.append(uq.covariance("F", bundle).V[0, 0])
        v_fh.append(uq.covariance("FH", bundle).V[0, 0])
    v_mc = np.var(estimates, ddof=1)
    v_f, v_fh = np.array(v_f), np.array(v_fh)
    rel = abs(np.mean(v_fh) - v_mc) / v_mc
    closer = float(np.mean(np.abs(v_fh - v_mc) < np.abs(v_f - v_mc)))
    elapsed = time.perf_counter() - t0
    ok = rel <= 0.2 and closer >= 0.7 and elapsed < 300
    acceptance(5, ok, f"sandwich under wrong correlation: |mean V_FH - V_MC|/V_MC = {rel:.3f} (<= 0.2), "
                      f"closer than V_F in {closer:.1%} (>= 70%) ({elapsed:.1f} s)")
    assert ok


def test_c06_fd_order(acceptance):
    t0 = time.perf_counter()
    hs = np.logspace(-6, -3, 13)
    cases = (
        (lambda t: np.exp(200 * t), lambda t: 200 * np.exp(200 * t), 0.01),
        (lambda t: np.sin(300 * t), lambda t: 300 * np.cos(300 * t), 0.002),
        (lambda t: 1 / (1 + 300 * t), lambda t: -300 / (1 + 300 * t) ** 2, 0.003),
    )
    slopes = []
    for f, df, x in cases:
        errs = [abs(derivatives.jacobian(lambda t: np.atleast_1d(f(t[0])), [x], steps=[h])[0, 0] - df(x))
                for h in hs]
        slopes.append(np.polyfit(np.log(hs), np.log(errs), 1)[0])
    elapsed = time.perf_counter() - t0
    ok = all(abs(s - 2.0) <= 0.2 for s in slopes) and elapsed < 1
    acceptance(6, ok, f"central difference log-log slopes {np.round(slopes, 3).tolist()} in 2 +- 0.2 "
                      f"({elapsed:.3f} s)")
    assert ok


def test_c07_objective_ldl(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst, done = 0.0, 0
    while done < 100:
        n = int(rng.integers(5, 120))
        A = random_correlation(rng, n, 10 ** rng.uniform(0, 5.5))
        stds = rng.uniform(0.1, 2.0, n)
        C = A * np.outer(stds, stds)
        if np.linalg.cond(C) > 1e6:  # outside the stated conditioning range, draw again
            continue
        done += 1
        r = rng.standard_normal(n)
        phi = evaluate_phi(r, CovarianceModel(stds, A, floor=None))
        dense = float(r @ np.linalg.solve(C, r))
        worst = max(worst, abs(phi - dense) / abs(dense))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed < 30
    acceptance(7, ok, f"LDL phi vs dense solve max rel diff {worst:.2e} <= 1e-8 on 100 instances ({elapsed:.2f} s)")
    assert ok


def test_c08_conservation(acceptance, desk_model):
    t0 = time.perf_counter()
    theta = DEFAULT_BOUNDS.initial
    state = desk_model.initial_state(theta[7])
    end, _ = desk_model.run_year(state, theta)
    v = desk_model.volume
    drift = abs(end.total_mean(v) - state.total_mean(v)) / state.total_mean(v)
    elapsed = time.perf_counter() - t0
    steps = desk_model.config.steps_per_year
    ok = drift < 1e-10 and steps == 2880 and elapsed < 60
    acceptance(8, ok, f"one-year ({steps} steps) phosphorus drift {drift:.2e} < 1e-10 ({elapsed:.1f} s)")
    assert ok


def test_c09_periodicity_and_warm_starts(acceptance, desk_model):
    t0 = time.perf_counter()
    theta = DEFAULT_BOUNDS.initial
    cold = desk_model.spin_up(theta, raise_on_fail=False)
    tol = desk_model.config.tol
    mags = typical_magnitude(theta, DEFAULT_BOUNDS.lower)
    faster = []
    for i in range(len(theta)):
        t = theta.copy()
        t[i] += fd_step(theta[i], mags[i])
        warm = derivatives.warm_started_evaluate(desk_model, t, cold, tol=tol)
        cold_i = desk_model.spin_up(t, raise_on_fail=False)
        faster.append(warm.run.converged and warm.run.years < cold_i.years)
    elapsed = time.perf_counter() - t0
    ok = (cold.converged and cold.residual <= 1e-7 and cold.years <= 3000 and sum(faster) >= 7
          and elapsed <= 1800)
    acceptance(9, ok, f"spin-up residual {cold.residual:.2e} in {cold.years} years; warm starts faster for "
                      f"{sum(faster)}/8 parameters ({elapsed:.1f} s)")
    assert ok


def test_c10_synthetic_recovery(acceptance):
    t0 = time.perf_counter()
    model = BiogeoModel.default()
    theta0 = DEFAULT_BOUNDS.initial
    truth = theta0 * np.array([1.2, 0.85, 1.05, 1.3, 0.8, 1.15, 1.1, 1.0])
    rng = np.random.default_rng(10)
    points, _ = campaign_points(model, rng, {"monitoring_cells": 0, "n_points": {"PO4": 400, "DOP": 100}})
    selector = model.selector(points)
    # noise at the accuracy floor of 0.1 for both tracers, scale known
    std = np.full(len(points), 0.1)
    y = BiogeoProvider(model, selector)(truth) + std * rng.standard_normal(len(points))
    cov = CovarianceModel(std, sigma2_known=1.0)
    obj = ScaledObjective(cov, y, BiogeoProvider(model, selector), DEFAULT_BOUNDS)
    res = minimize_objective(obj, theta0, gauss_newton=True, raise_on_max_iter=False)
    bundle = build_bundle(obj, res.theta_star, with_hessian=False)
    ci = uq.parameter_cis(res.theta_star, uq.covariance("F", bundle, 1.0).V, 0.99, bundle.n, bundle.m)
    inside = ci.contains(truth)
    phi_n = res.phi_star / len(points)
    elapsed = time.perf_counter() - t0
    missed = [PARAMETER_NAMES[i] for i in np.nonzero(~inside)[0]]
    ok = bool(np.all(inside)) and 0.5 <= phi_n <= 2.0 and elapsed <= 3600
    acceptance(10, ok, f"truth inside 99% CIs for {int(inside.sum())}/8 (missed {missed}), phi/n = {phi_n:.3f} "
                       f"in [0.5, 2], solver {res.reason} after {res.iterations} iterations ({elapsed / 60:.1f} min)")
    assert ok


def test_c11_oed_gains(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    m, n_out = 8, 60
    J = rng.standard_normal((200, m)) * rng.uniform(0.1, 3, m)
    F = J.T @ J / 0.01
    theta = rng.uniform(0.5, 2.0, m)
    J_out = rng.standard_normal((n_out, m))
    f_out = rng.uniform(0.5, 3.0, n_out)
    sets = oed.tracer_index_sets(np.repeat([0, 1], n_out // 2))
    ctx = oed.DesignContext(np.linalg.inv(F), theta, 1.0, J_out=J_out, f_out=f_out, index_sets=sets)
    cands = [oed.DesignCandidate("PO4", 0, 0, 0, k % 12, variance=float(rng.uniform(0.01, 0.1)),
                                 jrow=rng.standard_normal(m) * rng.uniform(0.1, 10)) for k in range(20)]
    min_gain, worst = np.inf, 0.0
    for criterion in ("params", "outputs"):
        for c, e in zip(cands, oed.evaluate_candidates(ctx, cands, criterion)):
            V = np.linalg.inv(F + np.outer(c.jrow, c.jrow) / c.variance)
            if criterion == "params":
                after = oed.psi_parameters(V, theta)
            else:
                after = oed.psi_outputs(np.einsum("ij,jk,ik->i", J_out, V, J_out), f_out, sets)
            min_gain = min(min_gain, e.gain)
            worst = max(worst, abs(e.psi_after - after) / abs(after))
    elapsed = time.perf_counter() - t0
    ok = min_gain >= -1e-12 and worst <= 1e-9 and elapsed < 120
    acceptance(11, ok, f"min gain {min_gain:.3e} >= -1e-12; rank-one vs recompute max rel diff {worst:.2e} "
                       f"<= 1e-9 ({elapsed:.2f} s)")
    assert ok


def test_c12_not_reproducible(acceptance):
    # full-scale parameter values, maps and uncertainty percentages need the real data and transports
    acceptance(12, None, "full-scale results are not reproducible at desk scale; covered by 1-11")
