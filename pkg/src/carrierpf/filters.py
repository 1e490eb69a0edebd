"""Particle-filter estimators over DD GNSS observations.

Two filters share the ensemble machinery:

* ``rbpf_step`` — the marginalized filter. Position is sampled; each
  particle carries a private 3-state velocity Kalman filter that is
  conditioned on the particle's own displacement (time update) and on the
  per-particle Doppler solution plus carrier-AFV rows (measurement update).
  The pseudorange-residual gate picks each particle's Doppler subset.
* ``conventional_pf_step`` — the position-only baseline: one global Doppler
  least-squares velocity drives every particle's transition, with no gate
  and no per-particle filter.

All randomness is addressed through :mod:`carrierpf.rng` streams keyed by
(master seed, epoch, purpose), so runs are reproducible bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray

from . import rng
from .backend import get_kernels
from .geo import EcefPosition, dd_range_gradient
from .obs import EpochObservation, VelocitySolution, doppler_velocity_ls, pack_epoch


@dataclass(frozen=True)
class FilterConfig:
    """All filter tunables. Scalar noise fields expand to isotropic matrices."""

    num_particles: int = 2000
    sigma_phi: float = 0.02  # carrier noise, cycles
    sigma_rho: float = 1.0  # pseudorange noise, m
    eta: float = 5.0  # NLOS residual gate, m
    use_pseudorange_likelihood: bool = True
    use_afv_update: bool = True
    use_nlos_gate: bool = True
    resample_threshold: float = 0.5
    prior_sigma: float = 2.0  # initial position scatter, m
    prior_vel_sigma: float = 1.0  # initial velocity std, m/s
    process_pos_std: float = 0.1  # sqrt(Q_n) per axis, m
    process_vel_std: float = 0.2  # sqrt(Q_l) per axis, m/s
    doppler_vel_std: float = 0.05  # sqrt(R_vel) per axis, m/s
    outage_inflation: float = 25.0  # Q_n factor when the baseline has no velocity
    divergence_spread_m: float = 1000.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_particles < 1:
            raise ValueError("num_particles must be >= 1")
        for name in ("sigma_phi", "sigma_rho", "eta", "prior_sigma", "prior_vel_sigma",
                     "process_pos_std", "process_vel_std", "doppler_vel_std"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def noise_model(self, dt: float) -> "NoiseModel":
        return NoiseModel(
            q_n=self.process_pos_std**2 * np.eye(3),
            q_l=self.process_vel_std**2 * np.eye(3),
            r_vel=self.doppler_vel_std**2 * np.eye(3),
            sigma_phi=self.sigma_phi,
            sigma_rho=self.sigma_rho,
            eta=self.eta,
            dt=dt,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "FilterConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown filter config keys: {sorted(unknown)}")
        return cls(**d)


def _check_spd(name: str, m: NDArray[np.float64]) -> None:
    if m.shape != (3, 3) or not np.allclose(m, m.T, atol=1e-12):
        raise ValueError(f"{name} must be a symmetric 3x3 matrix")
    np.linalg.cholesky(m)  # raises LinAlgError when not positive definite


@dataclass(frozen=True)
class NoiseModel:
    """Process/observation covariances and the epoch interval."""

    q_n: NDArray[np.float64]  # position process noise, m^2
    q_l: NDArray[np.float64]  # velocity process noise, (m/s)^2
    r_vel: NDArray[np.float64]  # Doppler-velocity observation noise, (m/s)^2
    sigma_phi: float
    sigma_rho: float
    eta: float
    dt: float

    def __post_init__(self) -> None:
        _check_spd("q_n", self.q_n)
        _check_spd("q_l", self.q_l)
        _check_spd("r_vel", self.r_vel)
        if self.dt <= 0:
            raise ValueError("dt must be positive")


@dataclass(frozen=True)
class Particle:
    """A single position hypothesis plus its private velocity KF state."""

    position: EcefPosition
    log_weight: float
    vel_mean: NDArray[np.float64]
    vel_cov: NDArray[np.float64]


@dataclass
class ParticleSet:
    """Weighted ensemble in structure-of-arrays layout."""

    positions: NDArray[np.float64]  # (N, 3)
    log_weights: NDArray[np.float64]  # (N,), normalized: logsumexp == 0
    vel_means: NDArray[np.float64]  # (N, 3)
    vel_covs: NDArray[np.float64]  # (N, 3, 3)
    master_seed: int
    last_epoch_index: int = -1
    prev_positions: NDArray[np.float64] | None = None

    @property
    def num_particles(self) -> int:
        return self.positions.shape[0]

    def weights(self) -> NDArray[np.float64]:
        return np.exp(self.log_weights)

    def n_eff(self) -> float:
        w = self.weights()
        return float(1.0 / np.sum(w * w))

    def particle(self, i: int) -> Particle:
        return Particle(
            position=EcefPosition.from_array(self.positions[i]),
            log_weight=float(self.log_weights[i]),
            vel_mean=self.vel_means[i].copy(),
            vel_cov=self.vel_covs[i].copy(),
        )

    def copy(self) -> "ParticleSet":
        return ParticleSet(
            positions=self.positions.copy(),
            log_weights=self.log_weights.copy(),
            vel_means=self.vel_means.copy(),
            vel_covs=self.vel_covs.copy(),
            master_seed=self.master_seed,
            last_epoch_index=self.last_epoch_index,
            prev_positions=None if self.prev_positions is None else self.prev_positions.copy(),
        )


@dataclass(frozen=True)
class FilterEstimate:
    """Per-epoch output: weighted-mean position, ensemble statistics, flags."""

    position: NDArray[np.float64]
    velocity: NDArray[np.float64] | None
    position_cov: NDArray[np.float64]
    velocity_available: bool
    particle_spread: float
    n_eff: float
    corrected: bool
    resampled: bool
    mean_excluded: float
    kf_skip_count: int
    n_sats: int


def init_particles(
    cfg: FilterConfig,
    prior_pos: EcefPosition,
    prior_sigma: float,
    prior_vel: NDArray[np.float64] | None = None,
) -> ParticleSet:
    """Scatter ``cfg.num_particles`` particles around a position prior.

    Positions are i.i.d. Gaussian with std ``prior_sigma`` per axis; all
    weights equal; per-particle velocity set to ``prior_vel`` (or zero) with
    covariance ``cfg.prior_vel_sigma**2 * I``.
    """
    if prior_sigma <= 0:
        raise ValueError("prior_sigma must be positive")
    n = cfg.num_particles
    key = rng.stream_key(cfg.seed, 0, rng.INIT)
    draws = rng.normals(key, 3 * n).reshape(n, 3)
    positions = prior_pos.as_array()[None, :] + prior_sigma * draws
    vel = np.zeros(3) if prior_vel is None else np.asarray(prior_vel, dtype=np.float64)
    return ParticleSet(
        positions=positions,
        log_weights=np.full(n, -math.log(n)),
        vel_means=np.tile(vel, (n, 1)),
        vel_covs=np.tile(cfg.prior_vel_sigma**2 * np.eye(3), (n, 1, 1)),
        master_seed=cfg.seed,
    )


def _transition(
    pset: ParticleSet,
    velocities: NDArray[np.float64],
    q: NDArray[np.float64],
    dt: float,
    epoch_index: int,
) -> ParticleSet:
    """Advance positions by dt * velocity + N(0, q); keep the old positions."""
    n = pset.num_particles
    key = rng.stream_key(pset.master_seed, epoch_index, rng.PREDICT)
    noise = rng.normals(key, 3 * n).reshape(n, 3) @ np.linalg.cholesky(q).T
    out = pset.copy()
    out.prev_positions = pset.positions.copy()
    out.positions = pset.positions + dt * velocities + noise
    return out


def pf_predict(pset: ParticleSet, noise: NoiseModel, epoch_index: int | None = None) -> ParticleSet:
    """State transition: each particle moves by its OWN velocity estimate.

    Pre-transition positions are retained in ``prev_positions`` for the KF
    time update.
    """
    if epoch_index is None:
        epoch_index = pset.last_epoch_index + 1
    return _transition(pset, pset.vel_means, noise.q_n, noise.dt, epoch_index)


def kf_time_update(
    p: Particle,
    pos_before: EcefPosition,
    pos_after: EcefPosition,
    noise: NoiseModel,
) -> Particle:
    """Condition the velocity on the particle's displacement over one step.

    With A_n = dt*I and A_l = I: N = dt^2 P + Q_n, L = dt P N^-1,
    mean += L(displacement - dt*mean), cov = P - L N L^T + Q_l.
    """
    dt = noise.dt
    pcov = p.vel_cov
    n_mat = dt * dt * pcov + noise.q_n
    l_gain = dt * np.linalg.solve(n_mat, pcov).T
    disp = pos_after.as_array() - pos_before.as_array()
    mean = p.vel_mean + l_gain @ (disp - dt * p.vel_mean)
    cov = pcov - l_gain @ n_mat @ l_gain.T + noise.q_l
    cov = 0.5 * (cov + cov.T)
    return replace(p, vel_mean=mean, vel_cov=cov)


def kf_measurement_update(
    p: Particle,
    epoch: EpochObservation,
    vel_obs: VelocitySolution | None,
    base: EcefPosition,
    noise: NoiseModel,
    cfg: FilterConfig,
) -> tuple[Particle, bool]:
    """Stacked velocity + carrier-AFV measurement update of one particle.

    Builds up to two observation blocks: identity rows against the Doppler
    velocity solution, and one row per carrier satellite whose innovation is
    lambda * psi with coupling -dt * grad(ddrange). Returns the updated
    particle and False when the innovation covariance was singular (the
    particle is then returned unchanged).
    """
    lam = epoch.wavelength
    rows: list[NDArray[np.float64]] = []
    innov: list[float] = []
    rdiag: list[float] = []
    if vel_obs is not None:
        for a in range(3):
            rows.append(np.eye(3)[a])
            innov.append(float(vel_obs.velocity[a] - p.vel_mean[a]))
        rdiag.extend([math.nan] * 3)  # replaced by the full r_vel block below
    if cfg.use_afv_update:
        from .obs import afv  # local import to keep module init cheap

        for geom, dd in epoch.satellites:
            if not dd.has_carrier:
                continue
            g = dd_range_gradient(geom.position, epoch.reference_geometry.position, p.position, base)
            rows.append(-noise.dt * g)
            innov.append(lam * afv(dd, geom, epoch.reference_geometry, p.position, base, lam))
            rdiag.append((lam * noise.sigma_phi) ** 2)
    if not rows:
        return p, True
    c_mat = np.vstack(rows)
    y = np.array(innov)
    m = len(rows)
    r_mat = np.zeros((m, m))
    off = 0
    if vel_obs is not None:
        r_mat[:3, :3] = noise.r_vel
        off = 3
    for i in range(off, m):
        r_mat[i, i] = rdiag[i]
    pcov = p.vel_cov
    cp_mat = c_mat @ pcov
    m_mat = cp_mat @ c_mat.T + r_mat
    try:
        x = np.linalg.solve(m_mat, cp_mat)  # M^-1 C P
    except np.linalg.LinAlgError:
        return p, False
    gain = x.T  # P C^T M^-1
    mean = p.vel_mean + gain @ y
    cov = pcov - gain @ cp_mat
    cov = 0.5 * (cov + cov.T)
    return replace(p, vel_mean=mean, vel_cov=cov), True


def _normalize_log_weights(lw: NDArray[np.float64]) -> NDArray[np.float64]:
    m = np.max(lw)
    total = m + math.log(np.sum(np.exp(lw - m)))
    return lw - total


def systematic_resample_indices(weights: NDArray[np.float64], u0: float) -> NDArray[np.int64]:
    """Low-variance systematic resampling: one uniform drives all N picks."""
    n = weights.shape[0]
    edges = np.cumsum(weights)
    edges[-1] = 1.0  # guard against rounding shortfall
    points = (u0 + np.arange(n)) / n
    return np.searchsorted(edges, points, side="right").astype(np.int64)


def pf_correct(
    pset: ParticleSet,
    epoch: EpochObservation,
    base: EcefPosition,
    cfg: FilterConfig,
) -> tuple[ParticleSet, bool, bool]:
    """Likelihood weighting and conditional systematic resampling.

    Returns (set, corrected, resampled). With no usable observation the
    weights are left untouched and corrected is False; resampling copies
    position and the whole per-particle KF state.
    """
    arrays = pack_epoch(epoch, base)
    usable = bool(arrays.has_cp.any() or (cfg.use_pseudorange_likelihood and arrays.has_pr.any()))
    out = pset.copy()
    out.last_epoch_index = epoch.epoch_index
    if not usable:
        return out, False, False
    kern = get_kernels()
    logl = kern.log_likelihood(
        out.positions, arrays.sat_pos, arrays.ref_pos, arrays.base_terms,
        arrays.pr, arrays.cp, arrays.has_pr, arrays.has_cp,
        arrays.wavelength, cfg.sigma_phi, cfg.sigma_rho, cfg.use_pseudorange_likelihood,
    )
    out.log_weights = _normalize_log_weights(out.log_weights + logl)
    n = out.num_particles
    resampled = False
    if out.n_eff() < cfg.resample_threshold * n:
        key = rng.stream_key(out.master_seed, epoch.epoch_index, rng.RESAMPLE)
        u0 = float(rng.uniforms(key, 1)[0])
        idx = systematic_resample_indices(out.weights(), u0)
        out.positions = out.positions[idx].copy()
        out.vel_means = out.vel_means[idx].copy()
        out.vel_covs = out.vel_covs[idx].copy()
        if out.prev_positions is not None:
            out.prev_positions = out.prev_positions[idx].copy()
        out.log_weights = np.full(n, -math.log(n))
        resampled = True
    return out, True, resampled


def _weighted_estimate(
    pset: ParticleSet,
    velocity: NDArray[np.float64] | None,
    velocity_available: bool,
    corrected: bool,
    resampled: bool,
    mean_excluded: float,
    kf_skip_count: int,
    n_sats: int,
) -> FilterEstimate:
    w = pset.weights()
    mean = w @ pset.positions
    dev = pset.positions - mean
    cov = np.einsum("n,ni,nj->ij", w, dev, dev)
    spread = float(np.sqrt(np.sum(w * np.sum(dev * dev, axis=1))))
    return FilterEstimate(
        position=mean,
        velocity=velocity,
        position_cov=cov,
        velocity_available=velocity_available,
        particle_spread=spread,
        n_eff=pset.n_eff(),
        corrected=corrected,
        resampled=resampled,
        mean_excluded=mean_excluded,
        kf_skip_count=kf_skip_count,
        n_sats=n_sats,
    )


def rbpf_step(
    pset: ParticleSet,
    epoch: EpochObservation,
    base: EcefPosition,
    noise: NoiseModel,
    cfg: FilterConfig,
) -> tuple[ParticleSet, FilterEstimate]:
    """One epoch of the marginalized filter.

    Order is fixed: predict with per-particle velocities, KF time update
    from the displacements, likelihood correction (with resampling), the
    per-particle residual gate plus Doppler solve, then the KF measurement
    update. A fully blocked epoch degenerates to prediction + time update
    with covariance growth only.
    """
    kern = get_kernels()
    arrays = pack_epoch(epoch, base)
    first = pset.last_epoch_index < 0
    s = pset
    if not first:
        s = pf_predict(s, noise, epoch.epoch_index)
        mean, cov = kern.kf_time_update(
            s.vel_means, s.vel_covs, s.positions - s.prev_positions, noise.dt, noise.q_n, noise.q_l
        )
        s = replace_arrays(s, vel_means=mean, vel_covs=cov)
    s, corrected, resampled = pf_correct(s, epoch, base, cfg)

    k = arrays.sat_pos.shape[0]
    n = s.num_particles
    if k and arrays.has_dop.any():
        if cfg.use_nlos_gate:
            keep = kern.nlos_keep_mask(
                s.positions, arrays.sat_pos, arrays.ref_pos, arrays.base_terms,
                arrays.pr, arrays.has_pr, cfg.eta,
            )
        else:
            keep = np.ones((n, k), dtype=np.bool_)
        use = keep & arrays.has_dop[None, :]
        vel_obs, _drift, _rms, _nused, vel_ok = kern.doppler_ls(
            s.positions, arrays.sat_pos, arrays.dop, use
        )
        n_dop = int(arrays.has_dop.sum())
        mean_excluded = float(n_dop - use.sum(axis=1).mean())
    else:
        vel_obs = np.zeros((n, 3))
        vel_ok = np.zeros(n, dtype=np.bool_)
        mean_excluded = 0.0

    mean, cov, nfail = kern.kf_measurement_update(
        s.positions, arrays.sat_pos, arrays.ref_pos, arrays.base_terms,
        arrays.cp, arrays.has_cp,
        arrays.wavelength, cfg.sigma_phi, noise.dt,
        vel_obs, vel_ok, noise.r_vel,
        cfg.use_afv_update, s.vel_means, s.vel_covs,
    )
    s = replace_arrays(s, vel_means=mean, vel_covs=cov)
    est = _weighted_estimate(
        s,
        velocity=s.vel_means.mean(axis=0),
        velocity_available=True,
        corrected=corrected,
        resampled=resampled,
        mean_excluded=mean_excluded,
        kf_skip_count=int(nfail),
        n_sats=k,
    )
    return s, est


def conventional_pf_step(
    pset: ParticleSet,
    epoch: EpochObservation,
    base: EcefPosition,
    noise: NoiseModel,
    cfg: FilterConfig,
) -> tuple[ParticleSet, FilterEstimate]:
    """One epoch of the prior-generation baseline.

    A single Doppler least-squares velocity over ALL satellites (no gate),
    evaluated at the current ensemble mean, drives every particle's
    transition identically. When it cannot be solved the transition falls
    back to zero velocity with the position process noise inflated by
    ``cfg.outage_inflation`` and the epoch reports no velocity.
    """
    w = pset.weights()
    rcv = EcefPosition.from_array(w @ pset.positions)
    sol = doppler_velocity_ls(epoch, None, rcv)

    first = pset.last_epoch_index < 0
    s = pset
    if not first:
        if sol is not None:
            vels = np.tile(sol.velocity, (s.num_particles, 1))
            s = _transition(s, vels, noise.q_n, noise.dt, epoch.epoch_index)
        else:
            vels = np.zeros((s.num_particles, 3))
            s = _transition(s, vels, cfg.outage_inflation * noise.q_n, noise.dt, epoch.epoch_index)
    s, corrected, resampled = pf_correct(s, epoch, base, cfg)
    # Every particle shares the global velocity: diversity in the transition
    # is exactly zero, which is the behavior the marginalized filter fixes.
    shared = sol.velocity if sol is not None else np.zeros(3)
    s = replace_arrays(s, vel_means=np.tile(shared, (s.num_particles, 1)), vel_covs=s.vel_covs)
    est = _weighted_estimate(
        s,
        velocity=sol.velocity.copy() if sol is not None else None,
        velocity_available=sol is not None,
        corrected=corrected,
        resampled=resampled,
        mean_excluded=0.0,
        kf_skip_count=0,
        n_sats=len(epoch.satellites),
    )
    return s, est


def replace_arrays(
    pset: ParticleSet,
    vel_means: NDArray[np.float64],
    vel_covs: NDArray[np.float64],
) -> ParticleSet:
    out = pset.copy()
    out.vel_means = vel_means
    out.vel_covs = vel_covs
    return out


def check_hygiene(pset: ParticleSet) -> tuple[bool, str]:
    """Weights sum to one and every velocity covariance admits a Cholesky."""
    w = pset.weights()
    if abs(float(w.sum()) - 1.0) > 1e-9:
        return False, f"weights sum to {w.sum()!r}"
    try:
        np.linalg.cholesky(pset.vel_covs)
    except np.linalg.LinAlgError:
        return False, "a velocity covariance is not positive definite"
    sym_err = np.max(np.abs(pset.vel_covs - np.transpose(pset.vel_covs, (0, 2, 1))))
    if sym_err > 1e-12:
        return False, f"velocity covariance asymmetry {sym_err:g}"
    return True, ""
