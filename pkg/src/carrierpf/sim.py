"""Deterministic synthetic-GNSS scenario generation.

Builds a static constellation around a base station, moves a rover along a
parametric trajectory, and emits double-differenced observations epoch by
epoch with configurable noise, NLOS bias windows, full-blockage windows and
carrier cycle slips. Satellites are held fixed in ECEF over a scenario
(minutes-scale), so the noiseless observables are exactly consistent with
the geometry modules: pseudorange residuals and AFV values vanish at the
true position, and Doppler range rates match the DD range gradient dotted
with the true velocity.

A scenario on disk is a directory bundle: ``scenario.json`` (config),
``observations.csv``, ``truth.csv`` and ``truth_sats.csv``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .geo import (
    EcefPosition,
    SatelliteGeometry,
    anchor_from_latlon,
    dd_range,
    dd_range_gradient,
    elevation_azimuth,
    enu_rotation,
    select_reference_satellite,
)
from .obs import GPS_L1_WAVELENGTH_M, DdObservation, EpochObservation

SCHEMA_VERSION = 1

OBS_COLUMNS = "epoch,time_s,sat_id,az_rad,el_rad,sat_x,sat_y,sat_z,pr_dd_m,cp_dd_cyc,dop_dd_ms,flags"
TRUTH_COLUMNS = "epoch,time_s,x,y,z,vx,vy,vz"
TRUTH_SAT_COLUMNS = "epoch,sat_id,ambiguity_cycles,nlos,visible"

FLAG_PSEUDORANGE = 1
FLAG_CARRIER = 2
FLAG_DOPPLER = 4
FLAG_PIVOT = 8


class ScenarioError(ValueError):
    """Invalid scenario configuration; raised before any generation."""


@dataclass(frozen=True)
class SatelliteDef:
    sat_id: int
    azimuth_deg: float
    elevation_deg: float
    orbit_radius_m: float = 26_559_000.0


@dataclass(frozen=True)
class NoiseDef:
    sigma_rho_m: float = 0.5
    sigma_phi_cycles: float = 0.01
    sigma_doppler_ms: float = 0.02


@dataclass(frozen=True)
class NlosEvent:
    """Bias injection on one satellite over [start_epoch, end_epoch)."""

    sat_id: int
    start_epoch: int
    end_epoch: int
    pseudorange_bias_m: float = 20.0
    carrier_bias_cycles: float = 0.25
    doppler_bias_ms: float = 0.5


@dataclass(frozen=True)
class ScenarioConfig:
    duration_s: float
    constellation: list[SatelliteDef]
    trajectory: dict
    rate_hz: float = 1.0
    base_lat_deg: float = 35.0
    base_lon_deg: float = 137.0
    base_height_m: float = 0.0
    wavelength_m: float = GPS_L1_WAVELENGTH_M
    noise: NoiseDef = field(default_factory=NoiseDef)
    nlos_events: list[NlosEvent] = field(default_factory=list)
    blockage_windows: list[tuple[int, int]] = field(default_factory=list)
    cycle_slips: list[tuple[int, int]] = field(default_factory=list)  # (sat_id, epoch)
    seed: int = 0

    @property
    def num_epochs(self) -> int:
        return int(round(self.duration_s * self.rate_hz))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "duration_s": self.duration_s,
            "rate_hz": self.rate_hz,
            "base_lat_deg": self.base_lat_deg,
            "base_lon_deg": self.base_lon_deg,
            "base_height_m": self.base_height_m,
            "wavelength_m": self.wavelength_m,
            "constellation": [
                {
                    "sat_id": s.sat_id,
                    "azimuth_deg": s.azimuth_deg,
                    "elevation_deg": s.elevation_deg,
                    "orbit_radius_m": s.orbit_radius_m,
                }
                for s in self.constellation
            ],
            "trajectory": self.trajectory,
            "noise": {
                "sigma_rho_m": self.noise.sigma_rho_m,
                "sigma_phi_cycles": self.noise.sigma_phi_cycles,
                "sigma_doppler_ms": self.noise.sigma_doppler_ms,
            },
            "nlos_events": [
                {
                    "sat_id": e.sat_id,
                    "start_epoch": e.start_epoch,
                    "end_epoch": e.end_epoch,
                    "pseudorange_bias_m": e.pseudorange_bias_m,
                    "carrier_bias_cycles": e.carrier_bias_cycles,
                    "doppler_bias_ms": e.doppler_bias_ms,
                }
                for e in self.nlos_events
            ],
            "blockage_windows": [list(w) for w in self.blockage_windows],
            "cycle_slips": [{"sat_id": s, "epoch": e} for s, e in self.cycle_slips],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ScenarioError(f"unsupported scenario schema_version {version}")
        try:
            constellation = [SatelliteDef(**s) for s in d.pop("constellation")]
            noise = NoiseDef(**d.pop("noise", {}))
            nlos = [NlosEvent(**e) for e in d.pop("nlos_events", [])]
            slips = [(int(s["sat_id"]), int(s["epoch"])) for s in d.pop("cycle_slips", [])]
            windows = [(int(a), int(b)) for a, b in d.pop("blockage_windows", [])]
            return cls(
                constellation=constellation,
                noise=noise,
                nlos_events=nlos,
                cycle_slips=slips,
                blockage_windows=windows,
                **d,
            )
        except (KeyError, TypeError) as exc:
            raise ScenarioError(f"bad scenario config: {exc}") from exc


@dataclass
class ScenarioTruth:
    """Ground truth: trajectory plus the per-satellite corruption schedule."""

    times: NDArray[np.float64]
    positions: NDArray[np.float64]  # (E, 3) ECEF
    velocities: NDArray[np.float64]  # (E, 3) ECEF
    sat_ids: NDArray[np.int64]  # non-pivot satellites, constellation order
    ambiguities: NDArray[np.int64]  # (E, K) integer DD ambiguities
    nlos_active: NDArray[np.bool_]  # (E, K)
    visible: NDArray[np.bool_]  # (E, K)
    reference_sat: int
    base: EcefPosition
    base_lat: float
    base_lon: float
    wavelength: float

    @property
    def num_epochs(self) -> int:
        return len(self.times)


def _validate(cfg: ScenarioConfig) -> None:
    e = cfg.num_epochs
    if cfg.duration_s <= 0 or cfg.rate_hz <= 0 or e < 1:
        raise ScenarioError("duration_s and rate_hz must be positive")
    ids = [s.sat_id for s in cfg.constellation]
    if len(set(ids)) != len(ids):
        raise ScenarioError("satellite ids must be unique")
    if len(ids) < 5:
        raise ScenarioError("need at least 5 satellites (4 for the Doppler solve plus the pivot)")
    for s in cfg.constellation:
        if not (0.0 < s.elevation_deg <= 90.0):
            raise ScenarioError(f"satellite {s.sat_id}: elevation must be in (0, 90] degrees")
        if s.orbit_radius_m <= 7_000_000.0:
            raise ScenarioError(f"satellite {s.sat_id}: orbit radius too small")
    for a, b in cfg.blockage_windows:
        if not (0 <= a < b <= e):
            raise ScenarioError(f"blockage window [{a}, {b}) outside the scenario")
        if a == 0:
            raise ScenarioError("epoch 0 must not be blocked (the filters initialize from it)")
    for ev in cfg.nlos_events:
        if ev.sat_id not in ids:
            raise ScenarioError(f"NLOS event references unknown satellite {ev.sat_id}")
        if not (0 <= ev.start_epoch < ev.end_epoch <= e):
            raise ScenarioError(f"NLOS window [{ev.start_epoch}, {ev.end_epoch}) outside the scenario")
        for v in (ev.pseudorange_bias_m, ev.carrier_bias_cycles, ev.doppler_bias_ms):
            if not math.isfinite(v):
                raise ScenarioError("NLOS biases must be finite")
    for sat_id, epoch in cfg.cycle_slips:
        if sat_id not in ids:
            raise ScenarioError(f"cycle slip references unknown satellite {sat_id}")
        if not (0 <= epoch < e):
            raise ScenarioError(f"cycle slip epoch {epoch} outside the scenario")
    kind = cfg.trajectory.get("kind")
    if kind not in ("static", "waypoints", "circle"):
        raise ScenarioError(f"unknown trajectory kind {kind!r}")


def _trajectory_enu(cfg: ScenarioConfig, times: NDArray[np.float64]):
    """Positions and velocities (E, 3) in the base-anchored ENU frame."""
    t = cfg.trajectory
    e = len(times)
    pos = np.zeros((e, 3))
    vel = np.zeros((e, 3))
    kind = t["kind"]
    if kind == "static":
        pos[:] = np.asarray(t["position_enu"], dtype=np.float64)
    elif kind == "circle":
        center = np.asarray(t["center_enu"], dtype=np.float64)
        radius = float(t["radius_m"])
        speed = float(t["speed_mps"])
        start = math.radians(float(t.get("start_angle_deg", 0.0)))
        omega = speed / radius
        ang = start + omega * times
        pos[:, 0] = center[0] + radius * np.cos(ang)
        pos[:, 1] = center[1] + radius * np.sin(ang)
        pos[:, 2] = center[2]
        vel[:, 0] = -speed * np.sin(ang)
        vel[:, 1] = speed * np.cos(ang)
    else:  # waypoints: constant speed along a polyline, holding at the end
        pts = np.asarray(t["points_enu"], dtype=np.float64)
        speed = float(t["speed_mps"])
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 3:
            raise ScenarioError("waypoints trajectory needs >= 2 ENU points")
        seg = np.diff(pts, axis=0)
        seg_len = np.linalg.norm(seg, axis=1)
        if (seg_len == 0).any():
            raise ScenarioError("duplicate consecutive waypoints")
        cum = np.concatenate([[0.0], np.cumsum(seg_len)])
        for i, ti in enumerate(times):
            s = speed * ti
            if s >= cum[-1]:
                pos[i] = pts[-1]
                continue
            j = int(np.searchsorted(cum, s, side="right") - 1)
            frac = (s - cum[j]) / seg_len[j]
            pos[i] = pts[j] + frac * seg[j]
            vel[i] = speed * seg[j] / seg_len[j]
    return pos, vel


def _place_satellite(sat: SatelliteDef, base: EcefPosition, rot: NDArray[np.float64]) -> EcefPosition:
    """Put a satellite along the az/el ray from the base at its orbit radius."""
    az = math.radians(sat.azimuth_deg)
    el = math.radians(sat.elevation_deg)
    d_enu = np.array([math.sin(az) * math.cos(el), math.cos(az) * math.cos(el), math.sin(el)])
    d = rot.T @ d_enu
    b = base.as_array()
    bd = float(b @ d)
    disc = bd * bd + sat.orbit_radius_m**2 - float(b @ b)
    if disc <= 0:
        raise ScenarioError(f"satellite {sat.sat_id}: orbit radius does not reach the az/el ray")
    rng_to_sat = -bd + math.sqrt(disc)
    return EcefPosition.from_array(b + rng_to_sat * d)


def generate_scenario(cfg: ScenarioConfig) -> tuple[list[EpochObservation], ScenarioTruth]:
    """Synthesize observations and truth; fully deterministic given the seed."""
    _validate(cfg)
    e = cfg.num_epochs
    times = np.arange(e, dtype=np.float64) / cfg.rate_hz
    base_lat = math.radians(cfg.base_lat_deg)
    base_lon = math.radians(cfg.base_lon_deg)
    base = anchor_from_latlon(base_lat, base_lon, cfg.base_height_m)
    rot = enu_rotation(base_lat, base_lon)

    pos_enu, vel_enu = _trajectory_enu(cfg, times)
    positions = base.as_array()[None, :] + pos_enu @ rot  # rot.T @ enu, row-wise
    velocities = vel_enu @ rot

    geoms: list[SatelliteGeometry] = []
    for s in cfg.constellation:
        p = _place_satellite(s, base, rot)
        el, az = elevation_azimuth(p, base, base_lat, base_lon)
        geoms.append(SatelliteGeometry(sat_id=s.sat_id, position=p, elevation=el, azimuth=az))
    ref_id = select_reference_satellite(geoms)
    ref_geom = next(g for g in geoms if g.sat_id == ref_id)
    others = [g for g in geoms if g.sat_id != ref_id]
    for ev in cfg.nlos_events:
        if ev.sat_id == ref_id:
            raise ScenarioError(
                f"satellite {ev.sat_id} is the DD pivot (highest elevation); it cannot carry an NLOS event"
            )

    k = len(others)
    id_to_col = {g.sat_id: j for j, g in enumerate(others)}
    slip_table: dict[int, list[int]] = {}
    for sat_id, epoch in cfg.cycle_slips:
        if sat_id == ref_id:
            raise ScenarioError(f"satellite {sat_id} is the DD pivot; it cannot carry a cycle slip")
        slip_table.setdefault(epoch, []).append(sat_id)

    gen = np.random.default_rng(cfg.seed)
    amb = gen.integers(-1000, 1001, size=k)
    blocked = np.zeros(e, dtype=np.bool_)
    for a, b in cfg.blockage_windows:
        blocked[a:b] = True

    ambiguities = np.zeros((e, k), dtype=np.int64)
    nlos_active = np.zeros((e, k), dtype=np.bool_)
    visible = np.zeros((e, k), dtype=np.bool_)
    epochs: list[EpochObservation] = []
    ns = cfg.noise

    for i in range(e):
        for sat_id in sorted(slip_table.get(i, [])):
            amb[id_to_col[sat_id]] = gen.integers(-1000, 1001)
        ambiguities[i] = amb
        rover = EcefPosition.from_array(positions[i])
        sats: list[tuple[SatelliteGeometry, DdObservation]] = []
        if not blocked[i]:
            for j, g in enumerate(others):
                pr_bias = cp_bias = dop_bias = 0.0
                for ev in cfg.nlos_events:
                    if ev.sat_id == g.sat_id and ev.start_epoch <= i < ev.end_epoch:
                        pr_bias += ev.pseudorange_bias_m
                        cp_bias += ev.carrier_bias_cycles
                        dop_bias += ev.doppler_bias_ms
                        nlos_active[i, j] = True
                r = dd_range(g.position, ref_geom.position, rover, base)
                grad = dd_range_gradient(g.position, ref_geom.position, rover, base)
                pr = r + pr_bias + ns.sigma_rho_m * gen.standard_normal()
                cp = r / cfg.wavelength_m + amb[j] + cp_bias + ns.sigma_phi_cycles * gen.standard_normal()
                dop = float(grad @ velocities[i]) + dop_bias + ns.sigma_doppler_ms * gen.standard_normal()
                visible[i, j] = True
                sats.append(
                    (
                        g,
                        DdObservation(
                            sat_id=g.sat_id,
                            pseudorange_dd=pr,
                            carrier_dd=cp,
                            doppler_dd=dop,
                            has_pseudorange=True,
                            has_carrier=True,
                            has_doppler=True,
                        ),
                    )
                )
        epochs.append(
            EpochObservation(
                epoch_index=i,
                time=float(times[i]),
                satellites=sats,
                reference_sat=ref_id,
                wavelength=cfg.wavelength_m,
                reference_geometry=ref_geom if sats else None,
            )
        )

    truth = ScenarioTruth(
        times=times,
        positions=positions,
        velocities=velocities,
        sat_ids=np.array([g.sat_id for g in others], dtype=np.int64),
        ambiguities=ambiguities,
        nlos_active=nlos_active,
        visible=visible,
        reference_sat=ref_id,
        base=base,
        base_lat=base_lat,
        base_lon=base_lon,
        wavelength=cfg.wavelength_m,
    )
    return epochs, truth


def pseudorange_ls_fix(
    epoch: EpochObservation,
    base: EcefPosition,
    initial: EcefPosition,
    max_iterations: int = 20,
    step_tolerance_m: float = 1e-4,
) -> EcefPosition | None:
    """Gauss-Newton position fix on DD pseudoranges, or None.

    DD observations cancel the clocks, so three satellites suffice for the
    three position unknowns. Returns None on rank deficiency, divergence or
    non-convergence within ``max_iterations``.
    """
    usable = [(g, dd) for g, dd in epoch.satellites if dd.has_pseudorange]
    if len(usable) < 3:
        return None
    ref = epoch.reference_geometry
    x = initial.as_array().copy()
    for _ in range(max_iterations):
        p = EcefPosition.from_array(x)
        resid = np.array(
            [dd.pseudorange_dd - dd_range(g.position, ref.position, p, base) for g, dd in usable]
        )
        jac = np.array([dd_range_gradient(g.position, ref.position, p, base) for g, dd in usable])
        delta, _, rank, _ = np.linalg.lstsq(jac, resid, rcond=None)
        if rank < 3 or not np.all(np.isfinite(delta)):
            return None
        x += delta
        step = float(np.linalg.norm(delta))
        if step > 1e7:
            return None
        if step < step_tolerance_m:
            return EcefPosition.from_array(x)
    return None


def _fmt(x: float) -> str:
    return repr(float(x))


def save_scenario(out_dir: str | Path, cfg: ScenarioConfig, epochs: list[EpochObservation], truth: ScenarioTruth) -> None:
    """Write the scenario bundle (config JSON plus three CSV streams)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scenario.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    with open(out / "observations.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(OBS_COLUMNS.split(","))
        for ep in epochs:
            if not ep.satellites:
                continue
            ref = ep.reference_geometry
            w.writerow(
                [ep.epoch_index, _fmt(ep.time), ref.sat_id, _fmt(ref.azimuth), _fmt(ref.elevation),
                 _fmt(ref.position.x), _fmt(ref.position.y), _fmt(ref.position.z),
                 "", "", "", FLAG_PIVOT]
            )
            for g, dd in ep.satellites:
                flags = (
                    (FLAG_PSEUDORANGE if dd.has_pseudorange else 0)
                    | (FLAG_CARRIER if dd.has_carrier else 0)
                    | (FLAG_DOPPLER if dd.has_doppler else 0)
                )
                w.writerow(
                    [ep.epoch_index, _fmt(ep.time), g.sat_id, _fmt(g.azimuth), _fmt(g.elevation),
                     _fmt(g.position.x), _fmt(g.position.y), _fmt(g.position.z),
                     _fmt(dd.pseudorange_dd) if dd.has_pseudorange else "",
                     _fmt(dd.carrier_dd) if dd.has_carrier else "",
                     _fmt(dd.doppler_dd) if dd.has_doppler else "",
                     flags]
                )

    with open(out / "truth.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRUTH_COLUMNS.split(","))
        for i in range(truth.num_epochs):
            w.writerow(
                [i, _fmt(truth.times[i])]
                + [_fmt(v) for v in truth.positions[i]]
                + [_fmt(v) for v in truth.velocities[i]]
            )

    with open(out / "truth_sats.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRUTH_SAT_COLUMNS.split(","))
        for i in range(truth.num_epochs):
            for j, sat_id in enumerate(truth.sat_ids):
                w.writerow(
                    [i, int(sat_id), int(truth.ambiguities[i, j]),
                     int(truth.nlos_active[i, j]), int(truth.visible[i, j])]
                )


def _scenario_dir(path: str | Path) -> Path:
    p = Path(path)
    if p.is_file() and p.name == "scenario.json":
        return p.parent
    return p


def load_scenario(path: str | Path) -> tuple[ScenarioConfig, list[EpochObservation], ScenarioTruth]:
    """Read a scenario bundle written by :func:`save_scenario`."""
    d = _scenario_dir(path)
    cfg = ScenarioConfig.from_dict(json.loads((d / "scenario.json").read_text()))

    truth_rows = []
    with open(d / "truth.csv", newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            truth_rows.append(row)
    e = len(truth_rows)
    times = np.array([float(r["time_s"]) for r in truth_rows])
    positions = np.array([[float(r[c]) for c in ("x", "y", "z")] for r in truth_rows])
    velocities = np.array([[float(r[c]) for c in ("vx", "vy", "vz")] for r in truth_rows])

    base_lat = math.radians(cfg.base_lat_deg)
    base_lon = math.radians(cfg.base_lon_deg)
    base = anchor_from_latlon(base_lat, base_lon, cfg.base_height_m)

    per_epoch: dict[int, list[dict]] = {}
    with open(d / "observations.csv", newline="") as f:
        reader = csv.DictReader(f)
        for lineno, row in enumerate(reader, start=2):
            try:
                idx = int(row["epoch"])
            except (KeyError, ValueError) as exc:
                raise ScenarioError(f"observations.csv line {lineno}: bad epoch field") from exc
            per_epoch.setdefault(idx, []).append(row)

    sat_cols: dict[int, int] = {}
    amb_rows: dict[tuple[int, int], tuple[int, bool, bool]] = {}
    with open(d / "truth_sats.csv", newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            sid = int(row["sat_id"])
            if sid not in sat_cols:
                sat_cols[sid] = len(sat_cols)
            amb_rows[(int(row["epoch"]), sid)] = (
                int(row["ambiguity_cycles"]),
                bool(int(row["nlos"])),
                bool(int(row["visible"])),
            )
    sat_ids = np.array(sorted(sat_cols, key=sat_cols.get), dtype=np.int64)
    k = len(sat_ids)
    ambiguities = np.zeros((e, k), dtype=np.int64)
    nlos_active = np.zeros((e, k), dtype=np.bool_)
    visible = np.zeros((e, k), dtype=np.bool_)
    for (i, sid), (a, nl, vis) in amb_rows.items():
        j = sat_cols[sid]
        ambiguities[i, j] = a
        nlos_active[i, j] = nl
        visible[i, j] = vis

    epochs: list[EpochObservation] = []
    reference_sat = -1
    for i in range(e):
        rows = per_epoch.get(i, [])
        ref_geo: SatelliteGeometry | None = None
        sats: list[tuple[SatelliteGeometry, DdObservation]] = []
        for lineno_row in rows:
            flags = int(lineno_row["flags"])
            geom = SatelliteGeometry(
                sat_id=int(lineno_row["sat_id"]),
                position=EcefPosition(
                    float(lineno_row["sat_x"]), float(lineno_row["sat_y"]), float(lineno_row["sat_z"])
                ),
                elevation=float(lineno_row["el_rad"]),
                azimuth=float(lineno_row["az_rad"]),
            )
            if flags & FLAG_PIVOT:
                ref_geo = geom
                reference_sat = geom.sat_id
                continue
            sats.append(
                (
                    geom,
                    DdObservation(
                        sat_id=geom.sat_id,
                        pseudorange_dd=float(lineno_row["pr_dd_m"]) if flags & FLAG_PSEUDORANGE else math.nan,
                        carrier_dd=float(lineno_row["cp_dd_cyc"]) if flags & FLAG_CARRIER else math.nan,
                        doppler_dd=float(lineno_row["dop_dd_ms"]) if flags & FLAG_DOPPLER else math.nan,
                        has_pseudorange=bool(flags & FLAG_PSEUDORANGE),
                        has_carrier=bool(flags & FLAG_CARRIER),
                        has_doppler=bool(flags & FLAG_DOPPLER),
                    ),
                )
            )
        if sats and ref_geo is None:
            raise ScenarioError(f"observations.csv: epoch {i} has satellites but no pivot row")
        epochs.append(
            EpochObservation(
                epoch_index=i,
                time=float(times[i]),
                satellites=sats,
                reference_sat=reference_sat,
                wavelength=cfg.wavelength_m,
                reference_geometry=ref_geo,
            )
        )

    truth = ScenarioTruth(
        times=times,
        positions=positions,
        velocities=velocities,
        sat_ids=sat_ids,
        ambiguities=ambiguities,
        nlos_active=nlos_active,
        visible=visible,
        reference_sat=reference_sat,
        base=base,
        base_lat=base_lat,
        base_lon=base_lon,
        wavelength=cfg.wavelength_m,
    )
    return cfg, epochs, truth
