"""JIT-compiled batch kernels (default hot path).

Mirrors :mod:`carrierpf.kernels_numpy` function-for-function; per-particle
work runs in tight nopython loops. Satellite accumulation order matches the
numpy backend so the two agree to rounding error.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

_PIVOT_RTOL = 1e-16


@njit(cache=True)
def _dist1(px, py, pz, q):
    dx = q[0] - px
    dy = q[1] - py
    dz = q[2] - pz
    return math.sqrt(dx * dx + dy * dy + dz * dz)


@njit(cache=True)
def dd_ranges(pos, sat_pos, ref_pos, base_terms):
    n = pos.shape[0]
    k = sat_pos.shape[0]
    out = np.empty((n, k))
    for i in range(n):
        px, py, pz = pos[i, 0], pos[i, 1], pos[i, 2]
        dref = _dist1(px, py, pz, ref_pos)
        for j in range(k):
            out[i, j] = (_dist1(px, py, pz, sat_pos[j]) - dref) - base_terms[j]
    return out


@njit(cache=True)
def log_likelihood(
    pos, sat_pos, ref_pos, base_terms, pr, cp, has_pr, has_cp,
    wavelength, sigma_phi, sigma_rho, use_pr,
):
    n = pos.shape[0]
    k = sat_pos.shape[0]
    out = np.zeros(n)
    if k == 0:
        return out
    c_cp = -math.log(math.sqrt(2.0 * math.pi) * sigma_phi)
    c_pr = -math.log(math.sqrt(2.0 * math.pi) * sigma_rho)
    inv2sp = 1.0 / (2.0 * sigma_phi * sigma_phi)
    inv2sr = 1.0 / (2.0 * sigma_rho * sigma_rho)
    for i in range(n):
        px, py, pz = pos[i, 0], pos[i, 1], pos[i, 2]
        dref = _dist1(px, py, pz, ref_pos)
        acc = 0.0
        for j in range(k):
            if not (has_cp[j] or (use_pr and has_pr[j])):
                continue
            r = (_dist1(px, py, pz, sat_pos[j]) - dref) - base_terms[j]
            if has_cp[j]:
                z = cp[j] % 1.0 - (r / wavelength) % 1.0
                psi = np.rint(z) - z
                acc += c_cp - psi * psi * inv2sp
            if use_pr and has_pr[j]:
                res = pr[j] - r
                acc += c_pr - res * res * inv2sr
        out[i] = acc
    return out


@njit(cache=True)
def nlos_keep_mask(pos, sat_pos, ref_pos, base_terms, pr, has_pr, eta):
    n = pos.shape[0]
    k = sat_pos.shape[0]
    keep = np.ones((n, k), dtype=np.bool_)
    if k == 0:
        return keep
    for i in range(n):
        px, py, pz = pos[i, 0], pos[i, 1], pos[i, 2]
        dref = _dist1(px, py, pz, ref_pos)
        for j in range(k):
            if not has_pr[j]:
                continue
            r = (_dist1(px, py, pz, sat_pos[j]) - dref) - base_terms[j]
            keep[i, j] = abs(pr[j] - r) <= eta
    return keep


@njit(cache=True)
def _chol_solve(a, b, x, m, nrhs):
    """In-place pivot-guarded Cholesky solve; returns False on failure.

    ``a`` (m, m) is overwritten with the lower factor; ``b`` (m, nrhs) is
    overwritten with intermediates; the solution lands in ``x``.
    """
    dmax = 0.0
    for j in range(m):
        if a[j, j] > dmax:
            dmax = a[j, j]
    floor = dmax * _PIVOT_RTOL
    for j in range(m):
        s = a[j, j]
        for p in range(j):
            s -= a[j, p] * a[j, p]
        if s <= floor:
            return False
        a[j, j] = math.sqrt(s)
        for i in range(j + 1, m):
            t = a[i, j]
            for p in range(j):
                t -= a[i, p] * a[j, p]
            a[i, j] = t / a[j, j]
    for r in range(nrhs):
        for j in range(m):
            t = b[j, r]
            for p in range(j):
                t -= a[j, p] * b[p, r]
            b[j, r] = t / a[j, j]
        for j in range(m - 1, -1, -1):
            t = b[j, r]
            for p in range(j + 1, m):
                t -= a[p, j] * x[p, r]
            x[j, r] = t / a[j, j]
    return True


@njit(cache=True)
def doppler_ls(pos, sat_pos, dop, use_mask):
    n = pos.shape[0]
    k = sat_pos.shape[0]
    vel = np.zeros((n, 3))
    drift = np.zeros(n)
    rms = np.zeros(n)
    nused = np.zeros(n, dtype=np.int64)
    ok = np.zeros(n, dtype=np.bool_)
    if k == 0:
        return vel, drift, rms, nused, ok
    rows = np.empty((k, 4))
    ata = np.empty((4, 4))
    atb = np.empty((4, 1))
    sol = np.empty((4, 1))
    for i in range(n):
        px, py, pz = pos[i, 0], pos[i, 1], pos[i, 2]
        cnt = 0
        for j in range(k):
            if use_mask[i, j]:
                cnt += 1
        nused[i] = cnt
        if cnt < 4:
            continue
        for j in range(k):
            dx = sat_pos[j, 0] - px
            dy = sat_pos[j, 1] - py
            dz = sat_pos[j, 2] - pz
            d = math.sqrt(dx * dx + dy * dy + dz * dz)
            rows[j, 0] = -dx / d
            rows[j, 1] = -dy / d
            rows[j, 2] = -dz / d
            rows[j, 3] = 1.0
        for a in range(4):
            atb[a, 0] = 0.0
            for b in range(4):
                ata[a, b] = 0.0
        for j in range(k):
            if not use_mask[i, j]:
                continue
            for a in range(4):
                va = rows[j, a]
                atb[a, 0] += va * dop[j]
                for b in range(4):
                    ata[a, b] += va * rows[j, b]
        if not _chol_solve(ata, atb, sol, 4, 1):
            continue
        ss = 0.0
        for j in range(k):
            if not use_mask[i, j]:
                continue
            pred = (
                rows[j, 0] * sol[0, 0]
                + rows[j, 1] * sol[1, 0]
                + rows[j, 2] * sol[2, 0]
                + rows[j, 3] * sol[3, 0]
            )
            resid = pred - dop[j]
            ss += resid * resid
        vel[i, 0] = sol[0, 0]
        vel[i, 1] = sol[1, 0]
        vel[i, 2] = sol[2, 0]
        drift[i] = sol[3, 0]
        rms[i] = math.sqrt(ss / cnt)
        ok[i] = True
    return vel, drift, rms, nused, ok


@njit(cache=True)
def _sym3_inv_into(a, out):
    c00 = a[1, 1] * a[2, 2] - a[1, 2] * a[1, 2]
    c01 = a[0, 2] * a[1, 2] - a[0, 1] * a[2, 2]
    c02 = a[0, 1] * a[1, 2] - a[0, 2] * a[1, 1]
    c11 = a[0, 0] * a[2, 2] - a[0, 2] * a[0, 2]
    c12 = a[0, 2] * a[0, 1] - a[0, 0] * a[1, 2]
    c22 = a[0, 0] * a[1, 1] - a[0, 1] * a[0, 1]
    det = a[0, 0] * c00 + a[0, 1] * c01 + a[0, 2] * c02
    out[0, 0] = c00 / det
    out[0, 1] = c01 / det
    out[1, 0] = c01 / det
    out[0, 2] = c02 / det
    out[2, 0] = c02 / det
    out[1, 1] = c11 / det
    out[1, 2] = c12 / det
    out[2, 1] = c12 / det
    out[2, 2] = c22 / det


@njit(cache=True)
def kf_time_update(vel_mean, vel_cov, disp, dt, q_n, q_l):
    n = vel_mean.shape[0]
    mean_out = np.empty_like(vel_mean)
    cov_out = np.empty_like(vel_cov)
    n_mat = np.empty((3, 3))
    n_inv = np.empty((3, 3))
    l = np.empty((3, 3))
    ln = np.empty((3, 3))
    for i in range(n):
        p = vel_cov[i]
        for a in range(3):
            for b in range(3):
                n_mat[a, b] = (dt * dt) * p[a, b] + q_n[a, b]
        _sym3_inv_into(n_mat, n_inv)
        for a in range(3):
            for b in range(3):
                s = 0.0
                for c in range(3):
                    s += p[a, c] * n_inv[c, b]
                l[a, b] = dt * s
        for a in range(3):
            s = 0.0
            for b in range(3):
                s += l[a, b] * (disp[i, b] - dt * vel_mean[i, b])
            mean_out[i, a] = vel_mean[i, a] + s
        for a in range(3):
            for b in range(3):
                s = 0.0
                for c in range(3):
                    s += l[a, c] * n_mat[c, b]
                ln[a, b] = s
        for a in range(3):
            for b in range(3):
                s = 0.0
                for c in range(3):
                    s += ln[a, c] * l[b, c]
                cov_out[i, a, b] = p[a, b] - s + q_l[a, b]
        for a in range(3):
            for b in range(a + 1, 3):
                v = 0.5 * (cov_out[i, a, b] + cov_out[i, b, a])
                cov_out[i, a, b] = v
                cov_out[i, b, a] = v
    return mean_out, cov_out


@njit(cache=True)
def kf_measurement_update(
    pos, sat_pos, ref_pos, base_terms, cp, has_cp,
    wavelength, sigma_phi, dt,
    vel_obs, vel_ok, r_vel,
    use_afv, vel_mean, vel_cov,
):
    n = pos.shape[0]
    k = sat_pos.shape[0]
    mean_out = vel_mean.copy()
    cov_out = vel_cov.copy()
    kc = 0
    if use_afv:
        for j in range(k):
            if has_cp[j]:
                kc += 1
    cp_idx = np.empty(kc, dtype=np.int64)
    c = 0
    if use_afv:
        for j in range(k):
            if has_cp[j]:
                cp_idx[c] = j
                c += 1
    mmax = 3 + kc
    c_mat = np.empty((mmax, 3))
    innov = np.empty(mmax)
    m_mat = np.empty((mmax, mmax))
    cp_rows = np.empty((mmax, 3))
    x = np.empty((mmax, 3))
    b = np.empty((mmax, 3))
    r_afv = (wavelength * sigma_phi) ** 2
    nfail = 0
    for i in range(n):
        m = kc
        off = 0
        if vel_ok[i]:
            m += 3
            off = 3
        if m == 0:
            continue
        if vel_ok[i]:
            for a in range(3):
                for bq in range(3):
                    c_mat[a, bq] = 1.0 if a == bq else 0.0
                innov[a] = vel_obs[i, a] - vel_mean[i, a]
        if kc:
            px, py, pz = pos[i, 0], pos[i, 1], pos[i, 2]
            dref = _dist1(px, py, pz, ref_pos)
            to_ref_x = (px - ref_pos[0]) / dref
            to_ref_y = (py - ref_pos[1]) / dref
            to_ref_z = (pz - ref_pos[2]) / dref
            for ci in range(kc):
                j = cp_idx[ci]
                dx = sat_pos[j, 0] - px
                dy = sat_pos[j, 1] - py
                dz = sat_pos[j, 2] - pz
                d = math.sqrt(dx * dx + dy * dy + dz * dz)
                gx = -dx / d - to_ref_x
                gy = -dy / d - to_ref_y
                gz = -dz / d - to_ref_z
                c_mat[off + ci, 0] = -dt * gx
                c_mat[off + ci, 1] = -dt * gy
                c_mat[off + ci, 2] = -dt * gz
                r = (d - dref) - base_terms[j]
                z = cp[j] % 1.0 - (r / wavelength) % 1.0
                psi = np.rint(z) - z
                innov[off + ci] = wavelength * psi
        p = vel_cov[i]
        for a in range(m):
            for bq in range(3):
                s = 0.0
                for cc in range(3):
                    s += c_mat[a, cc] * p[cc, bq]
                cp_rows[a, bq] = s
        for a in range(m):
            for bq in range(m):
                s = 0.0
                for cc in range(3):
                    s += cp_rows[a, cc] * c_mat[bq, cc]
                m_mat[a, bq] = s
        if vel_ok[i]:
            for a in range(3):
                for bq in range(3):
                    m_mat[a, bq] += r_vel[a, bq]
        for a in range(off, m):
            m_mat[a, a] += r_afv
        for a in range(m):
            for bq in range(3):
                b[a, bq] = cp_rows[a, bq]
        if not _chol_solve(m_mat[:m, :m], b[:m, :], x[:m, :], m, 3):
            nfail += 1
            continue
        for a in range(3):
            s = 0.0
            for r_i in range(m):
                s += x[r_i, a] * innov[r_i]
            mean_out[i, a] = vel_mean[i, a] + s
        for a in range(3):
            for bq in range(3):
                s = 0.0
                for r_i in range(m):
                    s += x[r_i, a] * cp_rows[r_i, bq]
                cov_out[i, a, bq] = p[a, bq] - s
        for a in range(3):
            for bq in range(a + 1, 3):
                v = 0.5 * (cov_out[i, a, bq] + cov_out[i, bq, a])
                cov_out[i, a, bq] = v
                cov_out[i, bq, a] = v
    return mean_out, cov_out, nfail
