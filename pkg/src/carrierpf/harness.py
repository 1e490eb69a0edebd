"""Run estimators over scenario bundles and report the evaluation metrics.

Outputs are machine readable and deterministic: a per-epoch ``report.csv``
and a ``summary.json`` whose bytes depend only on (scenario, config, seed).
Wall-clock numbers go to a separate ``timing.json`` so the deterministic
artifacts stay byte-comparable across runs.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .backend import get_kernels
from .filters import (
    FilterConfig,
    check_hygiene,
    conventional_pf_step,
    init_particles,
    rbpf_step,
)
from .geo import EcefPosition, enu_rotation
from .obs import pack_epoch
from .sim import load_scenario, pseudorange_ls_fix

FILTER_KINDS = ("rbpf", "conventional_pf", "ls_fix")

POSITION_THRESHOLD_M = 0.3
VELOCITY_THRESHOLD_MS = 0.1

REPORT_COLUMNS = [
    "epoch", "time_s", "est_x", "est_y", "est_z",
    "err_e_m", "err_n_m", "err_u_m", "pos_err_m",
    "vel_err_ms", "velocity_available", "position_available",
    "n_eff", "excluded_mean", "spread_m", "n_sats", "corrected", "resampled",
    "kf_skips", "hygiene_ok",
]


class EpochMismatchError(ValueError):
    """Two reports do not cover the same epochs."""


@dataclass
class EpochRecord:
    epoch: int
    time_s: float
    est: NDArray[np.float64] | None
    err_enu: NDArray[np.float64] | None
    pos_err_m: float
    vel_err_ms: float
    velocity_available: bool
    position_available: bool
    n_eff: float
    excluded_mean: float
    spread_m: float
    n_sats: int
    corrected: bool
    resampled: bool
    kf_skips: int
    hygiene_ok: bool


@dataclass
class RunReport:
    filter_kind: str
    seed: int
    num_particles: int
    records: list[EpochRecord] = field(default_factory=list)
    diverged: bool = False
    wall_seconds: float = 0.0

    # -- metric helpers -------------------------------------------------
    def _errors(self, metric: str) -> NDArray[np.float64]:
        if metric == "position":
            vals = [r.pos_err_m for r in self.records if r.position_available]
        else:
            vals = [r.vel_err_ms for r in self.records if r.velocity_available]
        return np.asarray(sorted(vals), dtype=np.float64)

    def fraction_under(self, metric: str, threshold: float) -> float:
        errs = self._errors(metric)
        if errs.size == 0:
            return 0.0
        return float(np.mean(errs < threshold))

    def cdf(self, metric: str) -> list[list[float]]:
        errs = self._errors(metric)
        n = errs.size
        return [[float(e), (i + 1) / n] for i, e in enumerate(errs)]

    def summary(self) -> dict:
        def metric_block(metric: str, threshold: float) -> dict:
            errs = self._errors(metric)
            total = len(self.records)
            block: dict = {
                "available_fraction": (errs.size / total) if total else 0.0,
                "threshold": threshold,
            }
            if errs.size:
                block.update(
                    rmse=float(np.sqrt(np.mean(errs**2))),
                    p50=float(np.percentile(errs, 50)),
                    p68=float(np.percentile(errs, 68)),
                    p95=float(np.percentile(errs, 95)),
                    max=float(errs[-1]),
                    fraction_under_threshold=self.fraction_under(metric, threshold),
                    cdf=self.cdf(metric),
                )
            return block

        return {
            "filter": self.filter_kind,
            "seed": self.seed,
            "num_particles": self.num_particles,
            "num_epochs": len(self.records),
            "diverged": self.diverged,
            "hygiene_ok": all(r.hygiene_ok for r in self.records),
            "position": metric_block("position", POSITION_THRESHOLD_M),
            "velocity": metric_block("velocity", VELOCITY_THRESHOLD_MS),
        }

    # -- persistence ----------------------------------------------------
    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(REPORT_COLUMNS)
            for r in self.records:
                est = ["", "", ""] if r.est is None else [repr(float(v)) for v in r.est]
                enu = ["", "", ""] if r.err_enu is None else [repr(float(v)) for v in r.err_enu]
                w.writerow(
                    [r.epoch, repr(r.time_s)] + est + enu
                    + [repr(r.pos_err_m) if r.position_available else "",
                       repr(r.vel_err_ms) if r.velocity_available else "",
                       int(r.velocity_available), int(r.position_available),
                       repr(r.n_eff), repr(r.excluded_mean), repr(r.spread_m),
                       r.n_sats, int(r.corrected), int(r.resampled), r.kf_skips,
                       int(r.hygiene_ok)]
                )
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        timing = {
            "wall_seconds": self.wall_seconds,
            "wall_seconds_per_epoch": self.wall_seconds / max(len(self.records), 1),
        }
        (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, run_dir: str | Path) -> "RunReport":
        run_dir = Path(run_dir)
        summary = json.loads((run_dir / "summary.json").read_text())
        report = cls(
            filter_kind=summary["filter"],
            seed=summary["seed"],
            num_particles=summary["num_particles"],
            diverged=summary["diverged"],
        )
        with open(run_dir / "report.csv", newline="") as f:
            for row in csv.DictReader(f):
                pos_avail = bool(int(row["position_available"]))
                vel_avail = bool(int(row["velocity_available"]))
                report.records.append(
                    EpochRecord(
                        epoch=int(row["epoch"]),
                        time_s=float(row["time_s"]),
                        est=None if row["est_x"] == "" else np.array(
                            [float(row["est_x"]), float(row["est_y"]), float(row["est_z"])]
                        ),
                        err_enu=None if row["err_e_m"] == "" else np.array(
                            [float(row["err_e_m"]), float(row["err_n_m"]), float(row["err_u_m"])]
                        ),
                        pos_err_m=float(row["pos_err_m"]) if pos_avail else math.nan,
                        vel_err_ms=float(row["vel_err_ms"]) if vel_avail else math.nan,
                        velocity_available=vel_avail,
                        position_available=pos_avail,
                        n_eff=float(row["n_eff"]),
                        excluded_mean=float(row["excluded_mean"]),
                        spread_m=float(row["spread_m"]),
                        n_sats=int(row["n_sats"]),
                        corrected=bool(int(row["corrected"])),
                        resampled=bool(int(row["resampled"])),
                        kf_skips=int(row["kf_skips"]),
                        hygiene_ok=bool(int(row["hygiene_ok"])),
                    )
                )
        return report


def run_filter(
    scenario_path: str | Path,
    filter_kind: str,
    cfg: FilterConfig | None = None,
    seed: int | None = None,
    out_dir: str | Path | None = None,
) -> RunReport:
    """Stream a scenario through one estimator and build its RunReport."""
    if filter_kind not in FILTER_KINDS:
        raise ValueError(f"filter_kind must be one of {FILTER_KINDS}, got {filter_kind!r}")
    cfg = cfg or FilterConfig()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    _, epochs, truth = load_scenario(scenario_path)
    if len(epochs) < 2:
        raise ValueError("scenario must contain at least two epochs")
    dts = np.diff(truth.times)
    if not np.allclose(dts, dts[0], rtol=1e-9, atol=1e-12):
        raise ValueError("epochs must be uniformly spaced")
    noise = cfg.noise_model(float(dts[0]))
    rot = enu_rotation(truth.base_lat, truth.base_lon)

    report = RunReport(filter_kind=filter_kind, seed=cfg.seed,
                       num_particles=0 if filter_kind == "ls_fix" else cfg.num_particles)
    t0 = time.perf_counter()

    if filter_kind == "ls_fix":
        prev = truth.base
        for ep in epochs:
            fix = pseudorange_ls_fix(ep, truth.base, prev) if ep.satellites else None
            if fix is not None:
                prev = fix
            report.records.append(
                _make_record(ep, truth, fix.as_array() if fix else None, None, rot,
                             n_eff=0.0, excluded=0.0, spread=0.0, corrected=fix is not None,
                             resampled=False, kf_skips=0, hygiene_ok=True)
            )
    else:
        step = rbpf_step if filter_kind == "rbpf" else conventional_pf_step
        prior = pseudorange_ls_fix(epochs[0], truth.base, truth.base)
        if prior is None:
            raise RuntimeError("cannot initialize: no pseudorange fix at the first epoch")
        pset = init_particles(cfg, prior, cfg.prior_sigma)
        for ep in epochs:
            pset, est = step(pset, ep, truth.base, noise, cfg)
            ok, _detail = check_hygiene(pset)
            vel = est.velocity if est.velocity_available else None
            report.records.append(
                _make_record(ep, truth, est.position, vel, rot,
                             n_eff=est.n_eff, excluded=est.mean_excluded,
                             spread=est.particle_spread, corrected=est.corrected,
                             resampled=est.resampled, kf_skips=est.kf_skip_count,
                             hygiene_ok=ok)
            )
            if est.particle_spread > cfg.divergence_spread_m:
                report.diverged = True
                break

    report.wall_seconds = time.perf_counter() - t0
    if out_dir is not None:
        report.write(out_dir)
    return report


def _make_record(ep, truth, est_pos, est_vel, rot, *, n_eff, excluded, spread,
                 corrected, resampled, kf_skips, hygiene_ok) -> EpochRecord:
    i = ep.epoch_index
    if est_pos is not None:
        err_ecef = est_pos - truth.positions[i]
        err_enu = rot @ err_ecef
        pos_err = float(np.linalg.norm(err_ecef))
    else:
        err_enu = None
        pos_err = math.nan
    vel_err = float(np.linalg.norm(est_vel - truth.velocities[i])) if est_vel is not None else math.nan
    return EpochRecord(
        epoch=i,
        time_s=ep.time,
        est=est_pos,
        err_enu=err_enu,
        pos_err_m=pos_err,
        vel_err_ms=vel_err,
        velocity_available=est_vel is not None,
        position_available=est_pos is not None,
        n_eff=n_eff,
        excluded_mean=excluded,
        spread_m=spread,
        n_sats=len(ep.satellites),
        corrected=corrected,
        resampled=resampled,
        kf_skips=kf_skips,
        hygiene_ok=hygiene_ok,
    )


def compare(report_a: RunReport, report_b: RunReport, out_dir: str | Path | None = None) -> dict:
    """Pair two reports epoch-for-epoch: CDFs and threshold-fraction deltas."""
    epochs_a = [r.epoch for r in report_a.records]
    epochs_b = [r.epoch for r in report_b.records]
    if epochs_a != epochs_b:
        for i, (a, b) in enumerate(zip(epochs_a, epochs_b)):
            if a != b:
                raise EpochMismatchError(f"reports diverge at record {i}: epoch {a} vs {b}")
        raise EpochMismatchError(
            f"reports cover different epoch counts: {len(epochs_a)} vs {len(epochs_b)}"
        )
    result: dict = {"a": report_a.filter_kind, "b": report_b.filter_kind}
    rows: list[tuple[str, float, float, float]] = []
    for metric, threshold in (("position", POSITION_THRESHOLD_M), ("velocity", VELOCITY_THRESHOLD_MS)):
        fa = report_a.fraction_under(metric, threshold)
        fb = report_b.fraction_under(metric, threshold)
        result[metric] = {
            "fraction_under_a": fa,
            "fraction_under_b": fb,
            "delta": fa - fb,
            "threshold": threshold,
        }
        errs_a = report_a._errors(metric)
        errs_b = report_b._errors(metric)
        grid = np.unique(np.concatenate([errs_a, errs_b])) if errs_a.size + errs_b.size else np.array([])
        for g in grid:
            ca = float(np.mean(errs_a <= g)) if errs_a.size else 0.0
            cb = float(np.mean(errs_b <= g)) if errs_b.size else 0.0
            rows.append((metric, float(g), ca, cb))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "compare.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["metric", "error", "cdf_a", "cdf_b"])
            for metric, err, ca, cb in rows:
                w.writerow([metric, repr(err), repr(ca), repr(cb)])
        (out / "compare_summary.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


@dataclass
class SweepCell:
    filter_kind: str
    num_particles: int
    seed: int
    fraction_under: float
    rmse_m: float
    diverged: bool
    error: str = ""


@dataclass
class SweepReport:
    cells: list[SweepCell] = field(default_factory=list)

    def aggregate(self) -> list[dict]:
        out = []
        combos = sorted({(c.filter_kind, c.num_particles) for c in self.cells})
        for kind, n in combos:
            vals = [c.fraction_under for c in self.cells
                    if c.filter_kind == kind and c.num_particles == n and not c.error]
            out.append(
                {
                    "filter": kind,
                    "num_particles": n,
                    "mean_fraction_under": float(np.mean(vals)) if vals else math.nan,
                    "std_fraction_under": float(np.std(vals)) if vals else math.nan,
                    "cells": len(vals),
                }
            )
        return out

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "sweep.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["filter", "num_particles", "seed", "fraction_under_0.3m", "rmse_m", "diverged", "error"])
            for c in self.cells:
                w.writerow([c.filter_kind, c.num_particles, c.seed,
                            repr(c.fraction_under), repr(c.rmse_m), int(c.diverged), c.error])
        with open(out / "sweep_summary.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["filter", "num_particles", "mean_fraction_under_0.3m", "std_fraction_under_0.3m", "cells"])
            for row in self.aggregate():
                w.writerow([row["filter"], row["num_particles"],
                            repr(row["mean_fraction_under"]), repr(row["std_fraction_under"]), row["cells"]])


def particle_sweep(
    scenario_path: str | Path,
    counts: list[int],
    seeds: list[int],
    cfg: FilterConfig | None = None,
    out_dir: str | Path | None = None,
    filters: tuple[str, ...] = ("rbpf", "conventional_pf"),
) -> SweepReport:
    """Cross-product sweep of (filter, particle count, seed) over one scenario."""
    if not counts:
        raise ValueError("counts must be nonempty")
    for n in counts:
        if n < 1:
            raise ValueError(f"invalid particle count {n}")
    cfg = cfg or FilterConfig()
    sweep = SweepReport()
    for kind in filters:
        for n in counts:
            for seed in seeds:
                cell_cfg = replace(cfg, num_particles=n, seed=seed)
                try:
                    rep = run_filter(scenario_path, kind, cell_cfg)
                    errs = rep._errors("position")
                    sweep.cells.append(
                        SweepCell(
                            filter_kind=kind, num_particles=n, seed=seed,
                            fraction_under=rep.fraction_under("position", POSITION_THRESHOLD_M),
                            rmse_m=float(np.sqrt(np.mean(errs**2))) if errs.size else math.nan,
                            diverged=rep.diverged,
                        )
                    )
                except Exception as exc:  # keep sweeping the remaining cells
                    sweep.cells.append(
                        SweepCell(filter_kind=kind, num_particles=n, seed=seed,
                                  fraction_under=math.nan, rmse_m=math.nan,
                                  diverged=False, error=str(exc))
                    )
    if out_dir is not None:
        sweep.write(out_dir)
    return sweep


MAX_GRID_CELLS = 1_000_000


def grid_likelihood_map(
    scenario_path: str | Path,
    epoch_index: int,
    center: EcefPosition | None = None,
    extent_m: float = 1.0,
    spacing_m: float = 0.01,
    cfg: FilterConfig | None = None,
    out_path: str | Path | None = None,
) -> tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.float64]]:
    """Log-likelihood field on a horizontal east-north grid about ``center``.

    ``center`` defaults to the true position at the epoch. Returns
    (east_offsets, north_offsets, loglik) with loglik shaped (n_north, n_east).
    """
    if spacing_m <= 0:
        raise ValueError("spacing must be positive")
    _, epochs, truth = load_scenario(scenario_path)
    if not (0 <= epoch_index < len(epochs)):
        raise ValueError(f"epoch_index {epoch_index} outside the scenario")
    ep = epochs[epoch_index]
    if not ep.satellites:
        raise ValueError(f"epoch {epoch_index} has no observations")
    cfg = cfg or FilterConfig()
    half = extent_m / 2.0
    n_axis = int(math.floor(half / spacing_m))
    offsets = np.arange(-n_axis, n_axis + 1) * spacing_m
    if offsets.size**2 > MAX_GRID_CELLS:
        raise ValueError(
            f"grid would have {offsets.size**2} cells (> {MAX_GRID_CELLS}); use coarser spacing"
        )
    c = truth.positions[epoch_index] if center is None else center.as_array()
    rot = enu_rotation(truth.base_lat, truth.base_lon)
    east_axis = rot[0]
    north_axis = rot[1]
    ee, nn = np.meshgrid(offsets, offsets)
    pos = c[None, :] + ee.reshape(-1, 1) * east_axis[None, :] + nn.reshape(-1, 1) * north_axis[None, :]
    arrays = pack_epoch(ep, truth.base)
    kern = get_kernels()
    logl = kern.log_likelihood(
        np.ascontiguousarray(pos), arrays.sat_pos, arrays.ref_pos, arrays.base_terms,
        arrays.pr, arrays.cp, arrays.has_pr, arrays.has_cp,
        arrays.wavelength, cfg.sigma_phi, cfg.sigma_rho, cfg.use_pseudorange_likelihood,
    ).reshape(ee.shape)
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["east", "north", "log_likelihood"])
            for r in range(offsets.size):
                for cidx in range(offsets.size):
                    w.writerow([repr(float(offsets[cidx])), repr(float(offsets[r])), repr(float(logl[r, cidx]))])
    return offsets, offsets, logl
