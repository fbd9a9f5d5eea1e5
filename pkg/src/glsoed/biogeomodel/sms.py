"""Source-minus-sink terms of the PO4/DOP model.

Production happens in the euphotic layers only.  A fraction ``f_dop`` of it
becomes DOP, the remainder is exported as sinking particles whose flux
decays with depth as a power law and is remineralized to PO4 below; what
reaches the deepest layer of a column is remineralized there, so nothing
leaves the column.

Plain numpy here; the stepping kernel carries a compiled copy of the same
arithmetic and is tested against these functions.
"""
from __future__ import annotations

import numpy as np


def light(q_sw: float, f_par: float, k_water: float, z_center: np.ndarray) -> np.ndarray:
    """Photosynthetically available radiation at the layer centers."""
    return f_par * q_sw * np.exp(-k_water * np.asarray(z_center, dtype=float))


def production(po4, light_col, alpha, kappa_po4, kappa_i, i_e):
    """Michaelis-Menten community production, zero below layer ``i_e``."""
    po4 = np.maximum(np.asarray(po4, dtype=float), 0.0)
    light_col = np.maximum(np.asarray(light_col, dtype=float), 0.0)
    j = alpha * po4 / (po4 + kappa_po4) * light_col / (light_col + kappa_i)
    j[i_e + 1:] = 0.0
    return j


def remineralization_weights(z_bottom: np.ndarray, i_e: int, a_re: float):
    """Weights ``w[i, j]`` with  dF(i) = sum_j E(j) * w[i, j].

    Row ``i`` of ``interior`` applies to a layer with another layer below
    it; row ``i`` of ``bottom`` applies when ``i`` is the deepest layer of
    its column.  Both already include the division by the layer thickness.
    """
    zb = np.asarray(z_bottom, dtype=float)
    nz = zb.size
    dz = np.diff(np.concatenate(([0.0], zb)))
    interior = np.zeros((nz, nz))
    bottom = np.zeros((nz, nz))
    for i in range(1, nz):
        for j in range(min(i_e, i - 1) + 1):
            upper = (zb[i - 1] / zb[j]) ** (-a_re)
            lower = (zb[i] / zb[j]) ** (-a_re)
            interior[i, j] = (upper - lower) / dz[i]
            bottom[i, j] = upper / dz[i]
    return interior, bottom


def flux_divergence(export, z_bottom, i_e, a_re):
    """PO4 tendency from remineralized export for one column.

    ``export`` is E(j) per layer of the column (mmol m^-2 yr^-1); the column
    depth is ``len(export)``.
    """
    export = np.asarray(export, dtype=float)
    nlev = export.size
    interior, bottom = remineralization_weights(np.asarray(z_bottom)[:nlev], i_e, a_re)
    dF = interior @ export
    dF[nlev - 1] = bottom[nlev - 1] @ export
    dF[0] = 0.0
    return dF


def sms_terms(po4, dop, theta, light_col, z_bottom, i_e):
    """Return (S_PO4, S_DOP) per layer of one water column.

    ``theta`` follows ``PARAMETER_NAMES``; ``light_col`` is the available
    light per layer; ``z_bottom`` the layer bottoms of the full grid (the
    column uses the first ``len(po4)`` of them).
    """
    kappa_re, alpha, f_dop, kappa_po4, kappa_i, _, a_re, _ = np.asarray(theta, dtype=float)
    po4 = np.asarray(po4, dtype=float)
    dop = np.asarray(dop, dtype=float)
    nlev = po4.size
    zb = np.asarray(z_bottom, dtype=float)[:nlev]
    dz = np.diff(np.concatenate(([0.0], zb)))
    j_prod = production(po4, light_col, alpha, kappa_po4, kappa_i, i_e)
    export = (1.0 - f_dop) * j_prod * dz
    dF = flux_divergence(export, zb, i_e, a_re)
    s_po4 = -j_prod + kappa_re * dop + dF
    s_dop = f_dop * j_prod - kappa_re * dop
    return s_po4, s_dop
