import numpy as np
import pytest

from glsoed.biogeomodel import BiogeoModel, BiogeoProvider
from glsoed.oed import DEFAULT_COST, DesignCandidate, DesignContext
from glsoed.parameters import DEFAULT_BOUNDS
from glsoed.synthetic import campaign_points


@pytest.fixture(scope="session")
def desk_model():
    return BiogeoModel.default()


@pytest.fixture(scope="session")
def desk_design(desk_model):
    """Fisher matrix of a small campaign at the initial guess plus five candidates."""
    rng = np.random.default_rng(5)
    points, _ = campaign_points(desk_model, rng, {"n_points": {"PO4": 120, "DOP": 30}, "monitoring_cells": 0})
    extra = [("PO4", 2, 3, 0, 1), ("PO4", 5, 5, 2, 7), ("PO4", 1, 6, 1, 10), ("DOP", 3, 2, 0, 4),
             ("DOP", 6, 1, 1, 8)]
    cells = {tuple(c) for c in desk_model.grid.cells}
    extra = [p for p in extra if p[1:4] in cells]
    provider = BiogeoProvider(desk_model, desk_model.selector(points + extra))
    theta = DEFAULT_BOUNDS.initial
    _, J = provider.jacobian(theta, DEFAULT_BOUNDS.lower, DEFAULT_BOUNDS.upper)
    Jm, Jc = J[: len(points)], J[len(points):]
    F = Jm.T @ Jm / 0.01
    ctx = DesignContext(np.linalg.inv(F), theta, 1.0)
    cands = [DesignCandidate(p[0], *p[1:], variance=0.01, cost=DEFAULT_COST[p[0]], jrow=j) for p, j in zip(extra, Jc)]
    assert len(cands) == 5
    return ctx, F, cands


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line; the lines are repeated in the terminal summary."""

    def record(number, passed, detail):
        status = "N/A " if passed is None else "PASS" if passed else "FAIL"
        line = f"criterion {number:>2}: {status}  {detail}"
        print(line)
        request.config.acceptance_lines.append(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
