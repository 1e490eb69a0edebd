"""Observation-domain math on double-differenced GNSS measurements.

Residuals, the ambiguity-function value (AFV), particle likelihoods, the
pseudorange-residual gate against NLOS satellites, and the Doppler
least-squares velocity solver. These are the scalar reference
implementations; the vectorized hot-path equivalents live in the kernel
backends and are tested against these.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .geo import EcefPosition, SatelliteGeometry, dd_range, dd_range_gradient, geometric_range

GPS_L1_WAVELENGTH_M = 0.19029367279836487


@dataclass(frozen=True)
class DdObservation:
    """One satellite's double-differenced observables against the pivot.

    Units: pseudorange in meters, carrier in cycles (not meters), Doppler as
    a range rate in m/s. A missing observable is NaN with its flag False.
    """

    sat_id: int
    pseudorange_dd: float = math.nan
    carrier_dd: float = math.nan
    doppler_dd: float = math.nan
    has_pseudorange: bool = False
    has_carrier: bool = False
    has_doppler: bool = False

    def __post_init__(self) -> None:
        if self.has_carrier and not math.isfinite(self.carrier_dd):
            raise ValueError("carrier_dd must be finite when has_carrier is set")
        if self.has_pseudorange and not math.isfinite(self.pseudorange_dd):
            raise ValueError("pseudorange_dd must be finite when has_pseudorange is set")
        if self.has_doppler and not math.isfinite(self.doppler_dd):
            raise ValueError("doppler_dd must be finite when has_doppler is set")


@dataclass(frozen=True)
class EpochObservation:
    """All DD observations of one epoch.

    ``satellites`` never contains the pivot; the pivot's geometry is carried
    separately in ``reference_geometry`` because every DD range needs it.
    A fully blocked epoch has an empty satellite list and no reference.
    """

    epoch_index: int
    time: float
    satellites: list[tuple[SatelliteGeometry, DdObservation]]
    reference_sat: int
    wavelength: float
    reference_geometry: SatelliteGeometry | None = None

    def __post_init__(self) -> None:
        if self.wavelength <= 0.0:
            raise ValueError("wavelength must be positive")
        ids = [g.sat_id for g, _ in self.satellites]
        if self.reference_sat in ids:
            raise ValueError("reference satellite must not appear in the DD list")
        if self.satellites and self.reference_geometry is None:
            raise ValueError("epochs with observations need the reference geometry")


@dataclass(frozen=True)
class VelocitySolution:
    """Least-squares velocity from DD Doppler observations.

    ``clock_drift`` absorbs the common range-rate term of the pivot; it is a
    true receiver clock drift only for undifferenced inputs.
    """

    velocity: NDArray[np.float64]
    clock_drift: float
    used_sats: list[int] = field(default_factory=list)
    residual_rms: float = 0.0


@dataclass(frozen=True)
class EpochArrays:
    """Array view of an epoch, ready for the batch kernels."""

    sat_ids: NDArray[np.int64]
    sat_pos: NDArray[np.float64]  # (K, 3)
    ref_pos: NDArray[np.float64]  # (3,)
    base_terms: NDArray[np.float64]  # (K,) per-satellite base-station range term
    pr: NDArray[np.float64]
    cp: NDArray[np.float64]
    dop: NDArray[np.float64]
    has_pr: NDArray[np.bool_]
    has_cp: NDArray[np.bool_]
    has_dop: NDArray[np.bool_]
    wavelength: float


def pack_epoch(epoch: EpochObservation, base: EcefPosition) -> EpochArrays:
    """Flatten an epoch into contiguous arrays, precomputing base-range terms."""
    k = len(epoch.satellites)
    sat_ids = np.empty(k, dtype=np.int64)
    sat_pos = np.empty((k, 3), dtype=np.float64)
    pr = np.full(k, np.nan)
    cp = np.full(k, np.nan)
    dop = np.full(k, np.nan)
    has_pr = np.zeros(k, dtype=np.bool_)
    has_cp = np.zeros(k, dtype=np.bool_)
    has_dop = np.zeros(k, dtype=np.bool_)
    if k:
        ref = epoch.reference_geometry.position
        ref_pos = ref.as_array()
        ref_base = geometric_range(ref, base)
    else:
        ref_pos = np.zeros(3)
        ref_base = 0.0
    base_terms = np.empty(k, dtype=np.float64)
    for i, (geom, dd) in enumerate(epoch.satellites):
        sat_ids[i] = geom.sat_id
        sat_pos[i] = geom.position.as_array()
        base_terms[i] = geometric_range(geom.position, base) - ref_base
        if dd.has_pseudorange:
            pr[i] = dd.pseudorange_dd
            has_pr[i] = True
        if dd.has_carrier:
            cp[i] = dd.carrier_dd
            has_cp[i] = True
        if dd.has_doppler:
            dop[i] = dd.doppler_dd
            has_dop[i] = True
    return EpochArrays(
        sat_ids=sat_ids,
        sat_pos=sat_pos,
        ref_pos=ref_pos,
        base_terms=base_terms,
        pr=pr,
        cp=cp,
        dop=dop,
        has_pr=has_pr,
        has_cp=has_cp,
        has_dop=has_dop,
        wavelength=epoch.wavelength,
    )


def dd_pseudorange_residual(
    obs: DdObservation,
    sat: SatelliteGeometry,
    ref: SatelliteGeometry,
    particle_pos: EcefPosition,
    base: EcefPosition,
) -> float:
    """Observed DD pseudorange minus the DD geometric range at the particle."""
    if not obs.has_pseudorange:
        raise ValueError(f"satellite {obs.sat_id} has no pseudorange observation")
    return obs.pseudorange_dd - dd_range(sat.position, ref.position, particle_pos, base)


def afv(
    obs: DdObservation,
    sat: SatelliteGeometry,
    ref: SatelliteGeometry,
    particle_pos: EcefPosition,
    base: EcefPosition,
    wavelength: float,
) -> float:
    """Ambiguity-function value: round(phi - r/lambda) - (phi - r/lambda).

    Computed from the fractional parts of the carrier and of r/lambda so
    that adding any integer to the carrier observation leaves the result
    bit-identical, which is the property everything downstream relies on.
    """
    if not obs.has_carrier:
        raise ValueError(f"satellite {obs.sat_id} has no carrier observation")
    if wavelength <= 0.0:
        raise ValueError("wavelength must be positive")
    q = dd_range(sat.position, ref.position, particle_pos, base) / wavelength
    z = obs.carrier_dd % 1.0 - q % 1.0
    return float(np.rint(z) - z)


def carrier_likelihood(psi: float, sigma_phi: float) -> float:
    """Gaussian density of an AFV value under carrier noise ``sigma_phi``."""
    if sigma_phi <= 0.0:
        raise ValueError("sigma_phi must be positive")
    return math.exp(-(psi * psi) / (2.0 * sigma_phi * sigma_phi)) / (math.sqrt(2.0 * math.pi) * sigma_phi)


def particle_likelihood(
    epoch: EpochObservation,
    particle_pos: EcefPosition,
    base: EcefPosition,
    cfg,
) -> float | None:
    """Log-likelihood of one candidate position for one epoch.

    Accumulates, per satellite, the carrier (AFV) log-density and, when
    ``cfg.use_pseudorange_likelihood`` is on, a Gaussian pseudorange-residual
    log-density with ``cfg.sigma_rho``. Returns None when the epoch has no
    usable observation (the caller must skip the weight update rather than
    treat it as zero likelihood).
    """
    lam = epoch.wavelength
    c_cp = -math.log(math.sqrt(2.0 * math.pi) * cfg.sigma_phi)
    c_pr = -math.log(math.sqrt(2.0 * math.pi) * cfg.sigma_rho)
    total = 0.0
    used = 0
    for geom, dd in epoch.satellites:
        if dd.has_carrier:
            psi = afv(dd, geom, epoch.reference_geometry, particle_pos, base, lam)
            total += c_cp - (psi * psi) / (2.0 * cfg.sigma_phi**2)
            used += 1
        if cfg.use_pseudorange_likelihood and dd.has_pseudorange:
            res = dd_pseudorange_residual(dd, geom, epoch.reference_geometry, particle_pos, base)
            total += c_pr - (res * res) / (2.0 * cfg.sigma_rho**2)
            used += 1
    if used == 0:
        return None
    return total


def nlos_gate(
    epoch: EpochObservation,
    particle_pos: EcefPosition,
    base: EcefPosition,
    eta: float,
) -> list[int]:
    """Satellites whose |DD pseudorange residual| at this position is <= eta.

    Satellites without a pseudorange cannot be screened and are retained.
    """
    if eta <= 0.0:
        raise ValueError("eta must be positive")
    kept: list[int] = []
    for geom, dd in epoch.satellites:
        if dd.has_pseudorange:
            res = dd_pseudorange_residual(dd, geom, epoch.reference_geometry, particle_pos, base)
            if abs(res) <= eta:
                kept.append(geom.sat_id)
        else:
            kept.append(geom.sat_id)
    return kept


_MAX_GEOMETRY_CONDITION = 1e8


def doppler_velocity_ls(
    epoch: EpochObservation,
    subset: list[int] | None,
    rcv_pos: EcefPosition,
) -> VelocitySolution | None:
    """Velocity and drift from DD Doppler range rates, or None.

    Solves dop_k = -e_k . v + drift over the satellites in ``subset`` that
    carry Doppler, with e_k the unit line-of-sight vector at ``rcv_pos``.
    For DD inputs the drift unknown absorbs the pivot's -e_ref . v term.
    Needs at least four usable satellites and a geometry condition number
    below 1e8.
    """
    allowed = None if subset is None else set(subset)
    rows = []
    rhs = []
    used = []
    x = rcv_pos.as_array()
    for geom, dd in epoch.satellites:
        if not dd.has_doppler:
            continue
        if allowed is not None and geom.sat_id not in allowed:
            continue
        e = geom.position.as_array() - x
        e /= np.linalg.norm(e)
        rows.append([-e[0], -e[1], -e[2], 1.0])
        rhs.append(dd.doppler_dd)
        used.append(geom.sat_id)
    if len(rows) < 4:
        return None
    a = np.array(rows)
    b = np.array(rhs)
    if np.linalg.cond(a) > _MAX_GEOMETRY_CONDITION:
        return None
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    resid = a @ sol - b
    rms = float(np.sqrt(np.mean(resid * resid)))
    return VelocitySolution(
        velocity=sol[:3],
        clock_drift=float(sol[3]),
        used_sats=used,
        residual_rms=rms,
    )
