"""Synthetic measurement campaigns on the desk model.

A campaign samples random wet cells and months once, plus a few
"monitoring" cells sampled every month on many occasions.  The monitoring
records give enough value pairs for box-to-box correlations; their noise
has a component shared by all months of one occasion.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .biogeomodel.model import TRACERS, BiogeoModel, model_outputs
from .measurements import MeasurementRecord, MeasurementSet

DEFAULTS = {
    "n_points": {"PO4": 300, "DOP": 60},
    "max_depth_layer": None,
    "monitoring_cells": 2,
    "monitoring_occasions": 40,
    "monitoring_months": [0, 3, 6, 9],
    "noise_std": {"PO4": 0.1, "DOP": 0.1},
    "shared_fraction": 0.5,
    "seed": 0,
}


@dataclass
class Campaign:
    measurements: MeasurementSet
    truth: np.ndarray
    points: list
    occasions: np.ndarray


def campaign_points(model: BiogeoModel, rng, config: dict | None = None):
    """(points, occasions) of a sampling campaign."""
    cfg = dict(DEFAULTS)
    cfg.update(config or {})
    grid = model.grid
    cells = grid.cells  # (n_wet, 3) x, y, z
    if cfg["max_depth_layer"] is not None:
        cells = cells[cells[:, 2] <= int(cfg["max_depth_layer"])]
    points, occ = [], []
    for tracer in TRACERS:
        k = int(cfg["n_points"].get(tracer, 0))
        pick = rng.choice(cells.shape[0] * 12, size=min(k, cells.shape[0] * 12), replace=False)
        for p in np.sort(pick):
            x, y, z = cells[p // 12]
            points.append((tracer, int(x), int(y), int(z), int(p % 12)))
            occ.append(0)
    n_mon = int(cfg["monitoring_cells"])
    if n_mon:
        surface = cells[cells[:, 2] == 0]
        mon = surface[rng.choice(surface.shape[0], size=n_mon, replace=False)]
        for o in range(int(cfg["monitoring_occasions"])):
            for x, y, z in mon:
                for month in cfg["monitoring_months"]:
                    points.append(("PO4", int(x), int(y), int(z), int(month)))
                    occ.append(o + 1)
    return points, np.asarray(occ, dtype=np.int64)


def make_campaign(model: BiogeoModel, theta, config: dict | None = None, spin=None) -> Campaign:
    """Sample the periodic solution at ``theta`` with noise; values clipped at zero."""
    cfg = dict(DEFAULTS)
    cfg.update(config or {})
    rng = np.random.default_rng(int(cfg["seed"]))
    points, occ = campaign_points(model, rng, cfg)
    run = spin if spin is not None else model.spin_up(np.asarray(theta, dtype=float))
    sel = model.selector(points)
    truth = model_outputs(run.monthly, sel)
    std = np.array([cfg["noise_std"][p[0]] for p in points])
    shared_w = float(cfg["shared_fraction"])
    noise = np.sqrt(1.0 - shared_w) * rng.standard_normal(len(points))
    # occasion-wide component for monitoring cells
    keys = {}
    shared = np.zeros(len(points))
    for k, (p, o) in enumerate(zip(points, occ)):
        if o > 0:
            key = (p[1], p[2], p[3], int(o))
            if key not in keys:
                keys[key] = rng.standard_normal()
            shared[k] = keys[key]
        else:
            shared[k] = rng.standard_normal()
    noise += np.sqrt(shared_w) * shared
    values = np.maximum(truth + std * noise, 0.0)
    records = tuple(MeasurementRecord(p[0], p[1], p[2], p[3], p[4], float(v), int(o) if o > 0 else None)
                    for p, v, o in zip(points, values, occ))
    return Campaign(MeasurementSet(records), truth, points, occ)
