"""Compiled inner loop: one model year of TMM steps with SMS terms."""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def run_year(y, e_indptr, e_indices, e_data, i_indptr, i_indices, i_data,
             q_sw, f_par, col_start, i_e, dz, z_center,
             kappa_re, alpha, f_dop, kappa_po4, kappa_i, k_water,
             w_interior, w_bottom, dt, monthly):
    """Advance ``y`` (2, n) in place through one model year.

    ``monthly`` (12, 2, n) receives the mean state of each month.  Returns
    False if a non-finite concentration appears.
    """
    n = y.shape[1]
    steps = q_sw.shape[0]
    ncol = col_start.shape[0] - 1
    per_month = steps // 12
    nz = dz.shape[0]

    s_po4 = np.zeros(n)
    s_dop = np.zeros(n)
    z = np.empty((2, n))
    att = np.empty(nz)
    for k in range(nz):
        att[k] = np.exp(-k_water * z_center[k])
    export = np.empty(nz)
    monthly[:] = 0.0

    for step in range(steps):
        month = step // per_month
        for r in range(n):
            monthly[month, 0, r] += y[0, r]
            monthly[month, 1, r] += y[1, r]

        # source-minus-sink terms, column by column
        for c in range(ncol):
            s = col_start[c]
            nlev = col_start[c + 1] - s
            q = f_par * q_sw[step, c]
            for k in range(nlev):
                r = s + k
                p = y[0, r]
                d = y[1, r]
                jp = 0.0
                if k <= i_e and q > 0.0:
                    pp = p if p > 0.0 else 0.0
                    light = q * att[k]
                    jp = alpha * pp / (pp + kappa_po4) * light / (light + kappa_i)
                export[k] = (1.0 - f_dop) * jp * dz[k]
                s_po4[r] = -jp + kappa_re * d
                s_dop[r] = f_dop * jp - kappa_re * d
            for k in range(1, nlev):
                jmax = k - 1 if k - 1 < i_e else i_e
                acc = 0.0
                if k == nlev - 1:
                    for j in range(jmax + 1):
                        acc += export[j] * w_bottom[k, j]
                else:
                    for j in range(jmax + 1):
                        acc += export[j] * w_interior[k, j]
                s_po4[s + k] += acc

        # transport: z = A_e y + dt s, y = A_i z with month-interpolated matrices
        pos = step * 12.0 / steps - 0.5
        fl = np.floor(pos)
        w = pos - fl
        k0 = int(fl) % 12
        k1 = (k0 + 1) % 12
        for r in range(n):
            a0 = 0.0
            a1 = 0.0
            for idx in range(e_indptr[r], e_indptr[r + 1]):
                coef = (1.0 - w) * e_data[k0, idx] + w * e_data[k1, idx]
                col = e_indices[idx]
                a0 += coef * y[0, col]
                a1 += coef * y[1, col]
            z[0, r] = a0 + dt * s_po4[r]
            z[1, r] = a1 + dt * s_dop[r]
        ok = True
        for r in range(n):
            a0 = 0.0
            a1 = 0.0
            for idx in range(i_indptr[r], i_indptr[r + 1]):
                coef = (1.0 - w) * i_data[k0, idx] + w * i_data[k1, idx]
                col = i_indices[idx]
                a0 += coef * z[0, col]
                a1 += coef * z[1, col]
            y[0, r] = a0
            y[1, r] = a1
            if not (np.isfinite(a0) and np.isfinite(a1)):
                ok = False
        if not ok:
            return False

    inv = 1.0 / per_month
    for m in range(12):
        for t in range(2):
            for r in range(n):
                monthly[m, t, r] *= inv
    return True
