"""Command-line entry point.

Verbs: ``simulate``, ``run``, ``compare``, ``sweep``, ``gridmap``. Flag
values override config-file values. Exit codes: 0 success, 1 usage or
parse error, 2 filter divergence (partial outputs are still written).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .filters import FilterConfig
from .harness import (
    FILTER_KINDS,
    RunReport,
    compare,
    grid_likelihood_map,
    particle_sweep,
    run_filter,
)
from .sim import ScenarioConfig, ScenarioError, generate_scenario, save_scenario

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DIVERGED = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_filter_config(path: str | None, seed: int | None) -> FilterConfig:
    if path is None:
        cfg = FilterConfig()
    else:
        cfg = FilterConfig.from_dict(json.loads(Path(path).read_text()))
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def _cmd_simulate(args) -> int:
    raw = json.loads(Path(args.scenario).read_text())
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = ScenarioConfig.from_dict(raw)
    epochs, truth = generate_scenario(cfg)
    save_scenario(args.out_dir, cfg, epochs, truth)
    print(f"wrote scenario bundle to {args.out_dir} ({len(epochs)} epochs, "
          f"{len(cfg.constellation)} satellites, pivot {truth.reference_sat})")
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = _load_filter_config(args.config, args.seed)
    report = run_filter(args.scenario, args.filter, cfg, out_dir=args.out_dir)
    s = report.summary()
    pos = s["position"]
    print(f"{args.filter}: {s['num_epochs']} epochs"
          + (f", position rmse {pos['rmse']:.4f} m" if "rmse" in pos else "")
          + (", DIVERGED" if report.diverged else ""))
    return EXIT_DIVERGED if report.diverged else EXIT_OK


def _cmd_compare(args) -> int:
    rep_a = RunReport.load(args.a)
    rep_b = RunReport.load(args.b)
    result = compare(rep_a, rep_b, out_dir=args.out_dir)
    for metric in ("position", "velocity"):
        m = result[metric]
        print(f"{metric}: under {m['threshold']}: "
              f"a={m['fraction_under_a']:.4f} b={m['fraction_under_b']:.4f} "
              f"delta={m['delta']:+.4f}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    counts = [int(c) for c in args.counts.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    cfg = _load_filter_config(args.config, None)
    sweep = particle_sweep(args.scenario, counts, seeds, cfg, out_dir=args.out_dir)
    for row in sweep.aggregate():
        print(f"{row['filter']:<16} N={row['num_particles']:<6} "
              f"under-0.3m {row['mean_fraction_under']:.4f} +/- {row['std_fraction_under']:.4f}")
    return EXIT_OK


def _cmd_gridmap(args) -> int:
    cfg = _load_filter_config(args.config, None)
    out = Path(args.out_dir) / "gridmap.csv"
    east, north, logl = grid_likelihood_map(
        args.scenario, args.epoch, extent_m=args.extent, spacing_m=args.spacing,
        cfg=cfg, out_path=out,
    )
    idx = logl.argmax()
    r, c = divmod(int(idx), east.size)
    print(f"wrote {out} ({east.size}x{north.size} cells); "
          f"argmax at east {east[c]:+.3f} m, north {north[r]:+.3f} m")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="carrierpf", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a scenario bundle from a JSON config")
    sim.add_argument("--scenario", required=True, help="scenario config JSON")
    sim.add_argument("--seed", type=int, default=None, help="override the config seed")
    sim.add_argument("--out-dir", required=True)
    sim.set_defaults(func=_cmd_simulate)

    run = sub.add_parser("run", help="run one estimator over a scenario bundle")
    run.add_argument("--scenario", required=True, help="scenario bundle directory")
    run.add_argument("--filter", required=True, choices=FILTER_KINDS)
    run.add_argument("--config", default=None, help="filter config JSON")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--out-dir", required=True)
    run.set_defaults(func=_cmd_run)

    cmp_p = sub.add_parser("compare", help="pair two run outputs")
    cmp_p.add_argument("--a", required=True, help="run output directory A")
    cmp_p.add_argument("--b", required=True, help="run output directory B")
    cmp_p.add_argument("--out-dir", required=True)
    cmp_p.set_defaults(func=_cmd_compare)

    sw = sub.add_parser("sweep", help="particle-count sweep over both particle filters")
    sw.add_argument("--scenario", required=True)
    sw.add_argument("--counts", required=True, help="comma-separated particle counts")
    sw.add_argument("--seeds", required=True, help="comma-separated filter seeds")
    sw.add_argument("--config", default=None)
    sw.add_argument("--out-dir", required=True)
    sw.set_defaults(func=_cmd_sweep)

    gm = sub.add_parser("gridmap", help="likelihood field on an east-north grid at one epoch")
    gm.add_argument("--scenario", required=True)
    gm.add_argument("--epoch", type=int, required=True)
    gm.add_argument("--extent", type=float, default=1.0, help="grid width, m")
    gm.add_argument("--spacing", type=float, default=0.01, help="cell spacing, m")
    gm.add_argument("--config", default=None)
    gm.add_argument("--out-dir", required=True)
    gm.set_defaults(func=_cmd_gridmap)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
