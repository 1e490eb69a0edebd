"""Pure-numpy batch kernels (fallback path, no JIT required).

Same signatures and arithmetic as :mod:`carrierpf.kernels_numba`; satellite
loops run at Python level (K is small) while the particle axis is
vectorized. Reductions over satellites accumulate in index order so both
backends agree to rounding error.
"""

from __future__ import annotations

import math

import numpy as np

_PIVOT_RTOL = 1e-16  # relative Cholesky pivot floor ~ condition 1e16 on normal matrices


def dd_ranges(pos, sat_pos, ref_pos, base_terms):
    """DD geometric ranges, shape (N, K), for particle positions ``pos``."""
    n = pos.shape[0]
    k = sat_pos.shape[0]
    out = np.empty((n, k))
    dref = _dist(pos, ref_pos)
    for j in range(k):
        out[:, j] = (_dist(pos, sat_pos[j]) - dref) - base_terms[j]
    return out


def _dist(pos, point):
    dx = point[0] - pos[:, 0]
    dy = point[1] - pos[:, 1]
    dz = point[2] - pos[:, 2]
    return np.sqrt(dx * dx + dy * dy + dz * dz)


def log_likelihood(
    pos, sat_pos, ref_pos, base_terms, pr, cp, has_pr, has_cp,
    wavelength, sigma_phi, sigma_rho, use_pr,
):
    """Per-particle log-likelihood over carrier (AFV) and pseudorange terms."""
    n = pos.shape[0]
    k = sat_pos.shape[0]
    out = np.zeros(n)
    if k == 0:
        return out
    c_cp = -math.log(math.sqrt(2.0 * math.pi) * sigma_phi)
    c_pr = -math.log(math.sqrt(2.0 * math.pi) * sigma_rho)
    inv2sp = 1.0 / (2.0 * sigma_phi * sigma_phi)
    inv2sr = 1.0 / (2.0 * sigma_rho * sigma_rho)
    dref = _dist(pos, ref_pos)
    for j in range(k):
        if not (has_cp[j] or (use_pr and has_pr[j])):
            continue
        r = (_dist(pos, sat_pos[j]) - dref) - base_terms[j]
        if has_cp[j]:
            z = cp[j] % 1.0 - (r / wavelength) % 1.0
            psi = np.rint(z) - z
            out += c_cp - psi * psi * inv2sp
        if use_pr and has_pr[j]:
            res = pr[j] - r
            out += c_pr - res * res * inv2sr
    return out


def nlos_keep_mask(pos, sat_pos, ref_pos, base_terms, pr, has_pr, eta):
    """True where |DD pseudorange residual| <= eta (or no pseudorange)."""
    n = pos.shape[0]
    k = sat_pos.shape[0]
    keep = np.ones((n, k), dtype=np.bool_)
    if k == 0:
        return keep
    dref = _dist(pos, ref_pos)
    for j in range(k):
        if not has_pr[j]:
            continue
        r = (_dist(pos, sat_pos[j]) - dref) - base_terms[j]
        keep[:, j] = np.abs(pr[j] - r) <= eta
    return keep


def doppler_ls(pos, sat_pos, dop, use_mask):
    """Per-particle LS velocity + drift from DD Doppler range rates.

    Rows are [-e_k, 1] over satellites flagged in ``use_mask``; solved via
    the 4x4 normal equations with a pivot-guarded Cholesky. Returns
    (vel (N,3), drift (N,), rms (N,), nused (N,), ok (N,)).
    """
    n = pos.shape[0]
    k = sat_pos.shape[0]
    vel = np.zeros((n, 3))
    drift = np.zeros(n)
    rms = np.zeros(n)
    nused = use_mask.sum(axis=1).astype(np.int64) if k else np.zeros(n, dtype=np.int64)
    ok = nused >= 4
    if k == 0 or not ok.any():
        return vel, drift, rms, nused, ok

    rows = np.zeros((n, k, 4))
    for j in range(k):
        dx = sat_pos[j, 0] - pos[:, 0]
        dy = sat_pos[j, 1] - pos[:, 1]
        dz = sat_pos[j, 2] - pos[:, 2]
        d = np.sqrt(dx * dx + dy * dy + dz * dz)
        rows[:, j, 0] = -dx / d
        rows[:, j, 1] = -dy / d
        rows[:, j, 2] = -dz / d
        rows[:, j, 3] = 1.0
    w = use_mask.astype(np.float64)

    ata = np.zeros((n, 4, 4))
    atb = np.zeros((n, 4))
    for j in range(k):
        a = rows[:, j, :]
        wj = w[:, j]
        ata += wj[:, None, None] * (a[:, :, None] * a[:, None, :])
        atb += (wj * np.where(use_mask[:, j], dop[j], 0.0))[:, None] * a

    sol, chol_ok = _chol_solve_batch(ata, atb[:, :, None])
    sol = sol[:, :, 0]
    ok &= chol_ok
    vel[ok] = sol[ok, :3]
    drift[ok] = sol[ok, 3]

    # Residual rms via an explicit second pass: cancellation-free near zero.
    ss = np.zeros(n)
    pred = np.einsum("nkj,nj->nk", rows, sol)
    for j in range(k):
        resid = np.where(use_mask[:, j], pred[:, j] - dop[j], 0.0)
        ss += resid * resid
    with np.errstate(invalid="ignore", divide="ignore"):
        rms = np.where(ok, np.sqrt(ss / np.maximum(nused, 1)), 0.0)
    vel[~ok] = 0.0
    drift[~ok] = 0.0
    rms[~ok] = 0.0
    return vel, drift, rms, nused, ok


def _chol_solve_batch(a, b):
    """Batched Cholesky solve for symmetric (N, m, m) systems.

    Rejects a batch member when a pivot falls under _PIVOT_RTOL times its
    largest initial diagonal entry; returns (solution, ok mask).
    """
    n, m, _ = a.shape
    l = np.zeros_like(a)
    dmax = np.maximum(a[:, range(m), range(m)].max(axis=1), 0.0)
    floor = dmax * _PIVOT_RTOL
    ok = np.ones(n, dtype=np.bool_)
    a = a.copy()
    for j in range(m):
        pivot = a[:, j, j] - np.einsum("np,np->n", l[:, j, :j], l[:, j, :j])
        good = pivot > floor
        ok &= good
        pivot = np.where(good, pivot, 1.0)
        l[:, j, j] = np.sqrt(pivot)
        if j + 1 < m:
            s = a[:, j + 1 :, j] - np.einsum("nip,np->ni", l[:, j + 1 :, :j], l[:, j, :j])
            l[:, j + 1 :, j] = s / l[:, j, j][:, None]
    # forward then back substitution
    y = np.zeros_like(b)
    for j in range(m):
        y[:, j] = (b[:, j] - np.einsum("np,npr->nr", l[:, j, :j], y[:, :j])) / l[:, j, j][:, None]
    x = np.zeros_like(b)
    for j in range(m - 1, -1, -1):
        x[:, j] = (y[:, j] - np.einsum("np,npr->nr", l[:, j + 1 :, j], x[:, j + 1 :])) / l[:, j, j][:, None]
    return x, ok


def _sym3_inv(a):
    """Inverse of symmetric (N, 3, 3) matrices via the adjugate formula."""
    a00 = a[:, 0, 0]
    a01 = a[:, 0, 1]
    a02 = a[:, 0, 2]
    a11 = a[:, 1, 1]
    a12 = a[:, 1, 2]
    a22 = a[:, 2, 2]
    c00 = a11 * a22 - a12 * a12
    c01 = a02 * a12 - a01 * a22
    c02 = a01 * a12 - a02 * a11
    c11 = a00 * a22 - a02 * a02
    c12 = a02 * a01 - a00 * a12
    c22 = a00 * a11 - a01 * a01
    det = a00 * c00 + a01 * c01 + a02 * c02
    inv = np.empty_like(a)
    inv[:, 0, 0] = c00
    inv[:, 0, 1] = inv[:, 1, 0] = c01
    inv[:, 0, 2] = inv[:, 2, 0] = c02
    inv[:, 1, 1] = c11
    inv[:, 1, 2] = inv[:, 2, 1] = c12
    inv[:, 2, 2] = c22
    return inv / det[:, None, None]


def kf_time_update(vel_mean, vel_cov, disp, dt, q_n, q_l):
    """Velocity conditioning on the particle displacement over one step.

    N = dt^2 P + Q_n, L = dt P N^-1, mean += L (disp - dt mean),
    cov = P - L N L^T + Q_l, symmetrized. Returns (mean', cov').
    """
    p = vel_cov
    n_mat = (dt * dt) * p + q_n[None, :, :]
    n_inv = _sym3_inv(n_mat)
    l = dt * np.einsum("nij,njk->nik", p, n_inv)
    innov = disp - dt * vel_mean
    mean = vel_mean + np.einsum("nij,nj->ni", l, innov)
    lnl = np.einsum("nij,njk,nlk->nil", l, n_mat, l)
    cov = p - lnl + q_l[None, :, :]
    cov = 0.5 * (cov + np.transpose(cov, (0, 2, 1)))
    return mean, cov


def kf_measurement_update(
    pos, sat_pos, ref_pos, base_terms, cp, has_cp,
    wavelength, sigma_phi, dt,
    vel_obs, vel_ok, r_vel,
    use_afv, vel_mean, vel_cov,
):
    """Stacked velocity-observation + AFV measurement update per particle.

    Row blocks: identity rows against the per-particle Doppler velocity
    (when available), then one row per carrier satellite with coupling
    C = -dt * grad(ddrange) and innovation lambda * psi. Particles whose
    innovation covariance fails the Cholesky guard are left unchanged and
    counted. Returns (mean', cov', nfail).
    """
    n = pos.shape[0]
    kc_idx = np.nonzero(has_cp)[0] if use_afv else np.empty(0, dtype=np.int64)
    kc = len(kc_idx)
    mean_out = vel_mean.copy()
    cov_out = vel_cov.copy()
    nfail = 0

    if kc:
        dref = _dist(pos, ref_pos)
        to_ref_x = (pos[:, 0] - ref_pos[0]) / dref
        to_ref_y = (pos[:, 1] - ref_pos[1]) / dref
        to_ref_z = (pos[:, 2] - ref_pos[2]) / dref
        grads = np.empty((n, kc, 3))
        innov_afv = np.empty((n, kc))
        r_afv = (wavelength * sigma_phi) ** 2
        for c, j in enumerate(kc_idx):
            dx = sat_pos[j, 0] - pos[:, 0]
            dy = sat_pos[j, 1] - pos[:, 1]
            dz = sat_pos[j, 2] - pos[:, 2]
            d = np.sqrt(dx * dx + dy * dy + dz * dz)
            grads[:, c, 0] = -dx / d - to_ref_x
            grads[:, c, 1] = -dy / d - to_ref_y
            grads[:, c, 2] = -dz / d - to_ref_z
            r = (d - dref) - base_terms[j]
            z = cp[j] % 1.0 - (r / wavelength) % 1.0
            psi = np.rint(z) - z
            innov_afv[:, c] = wavelength * psi
    else:
        grads = np.empty((n, 0, 3))
        innov_afv = np.empty((n, 0))
        r_afv = 0.0

    for with_vel in (True, False):
        sel = np.nonzero(vel_ok == with_vel)[0]
        m = (3 if with_vel else 0) + kc
        if len(sel) == 0 or m == 0:
            continue
        ns = len(sel)
        c_mat = np.zeros((ns, m, 3))
        innov = np.zeros((ns, m))
        r_diag_start = 0
        if with_vel:
            c_mat[:, 0, 0] = 1.0
            c_mat[:, 1, 1] = 1.0
            c_mat[:, 2, 2] = 1.0
            innov[:, :3] = vel_obs[sel] - vel_mean[sel]
            r_diag_start = 3
        if kc:
            c_mat[:, r_diag_start:, :] = -dt * grads[sel]
            innov[:, r_diag_start:] = innov_afv[sel]
        p = vel_cov[sel]
        cp_mat = np.einsum("nmi,nij->nmj", c_mat, p)  # C P, (ns, m, 3)
        m_mat = np.einsum("nmi,nri->nmr", cp_mat, c_mat)
        if with_vel:
            m_mat[:, :3, :3] += r_vel[None, :, :]
        if kc:
            idx = np.arange(r_diag_start, m)
            m_mat[:, idx, idx] += r_afv
        x, ok = _chol_solve_batch(m_mat, cp_mat)  # x = M^-1 C P, (ns, m, 3)
        nfail += int((~ok).sum())
        upd = np.nonzero(ok)[0]
        if len(upd) == 0:
            continue
        rows = sel[upd]
        gain_innov = np.einsum("nmi,nm->ni", x[upd], innov[upd])
        mean_out[rows] = vel_mean[rows] + gain_innov
        kcp = np.einsum("nmi,nmj->nij", x[upd], cp_mat[upd])  # K M K^T = (CP)^T M^-1 (CP)
        cov = p[upd] - kcp
        cov_out[rows] = 0.5 * (cov + np.transpose(cov, (0, 2, 1)))
    return mean_out, cov_out, nfail
