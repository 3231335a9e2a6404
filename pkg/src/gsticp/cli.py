"""Command-line entry point: ``gsticp simulate | sweep | cdf``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config import ALGORITHMS, ConfigError, ScenarioConfig, load_config
from .evaluation import (CdfCurve, MonteCarloError, ScenarioError, _fmt, cdf_from_errors,
                         compute_cdf, parse_range, read_results, resolve_scene, run_monte_carlo,
                         sweep, write_results)
from .scene import SceneFormatError

log = logging.getLogger("gsticp")

DEFAULT_EPS = "0:20:0.1"


def _algorithms(arg: Optional[str], config: ScenarioConfig) -> List[str]:
    if not arg:
        return [config.algorithm]
    names = [a.strip() for a in arg.split(",") if a.strip()]
    bad = [a for a in names if a not in ALGORITHMS]
    if bad:
        raise ConfigError(f"unknown algorithm(s) {bad}; choose from {list(ALGORITHMS)}")
    return names


def _base_config(args) -> ScenarioConfig:
    config = load_config(args.config)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "oracle_nlos", False):
        changes["oracle_nlos"] = True
    if getattr(args, "all_slots", False):
        changes["all_slots"] = True
    return config.with_(**changes).validate() if changes else config


def cmd_simulate(args) -> int:
    config = _base_config(args)
    algorithms = _algorithms(args.algorithm, config)
    eps = parse_range(args.eps)
    scene = resolve_scene(config)
    out = Path(args.out)
    curves = []
    for alg in algorithms:
        cfg = config.with_(algorithm=alg).validate()
        log.info("running %s: %d runs x %d slots", alg, cfg.mc_runs, cfg.n_slots)
        results = run_monte_carlo(cfg, scene=scene, workers=args.workers)
        curve = compute_cdf(results, eps, label=alg, all_slots=cfg.all_slots)
        curves.append(curve)
        target = out if len(algorithms) == 1 else out / alg
        write_results(results, [curve], target, cfg)
        p = curve.at(5.0)
        print(f"{alg}: median error {np.median(np.concatenate([r.errors(cfg.all_slots) for r in results])):.3f} m, "
              f"P(e<=5m) {p:.3f} -> {target}")
    if len(algorithms) > 1:
        _write_cdf(curves, out / "cdf.csv")
    return 0


def _write_cdf(curves: List[CdfCurve], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["algorithm", "epsilon", "p"])
        for c in curves:
            for e, p in zip(c.epsilons, c.p):
                w.writerow([c.label, _fmt(e), _fmt(p)])


def _parse_vary(text: str):
    if "=" not in text:
        raise ConfigError(f"--vary expects name=start:stop:step, got {text!r}")
    name, rng_text = text.split("=", 1)
    return name.strip(), parse_range(rng_text)


def cmd_sweep(args) -> int:
    config = _base_config(args)
    name, values = _parse_vary(args.vary)
    eps = parse_range(args.eps)
    scene = resolve_scene(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    curves = []
    for value, results, curve in sweep(config, name, values, eps, scene=scene, workers=args.workers):
        errors = np.concatenate([r.errors(config.all_slots) for r in results])
        rows.append((value, float(np.median(errors)), curve.at(args.threshold)))
        curves.append(curve)
        print(f"{name}={value}: median {rows[-1][1]:.3f} m, P(e<={args.threshold:g}m) {rows[-1][2]:.3f}")
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([name, "median_error", f"p_le_{args.threshold:g}"])
        for value, med, p in rows:
            w.writerow([_fmt(value), _fmt(med), _fmt(p)])
    _write_cdf(curves, out / "cdf.csv")
    return 0


def cmd_cdf(args) -> int:
    parsed = read_results(args.results)
    if len(parsed.error) == 0:
        raise ValueError(f"{args.results}: no result rows")
    errors = parsed.error if args.all_slots else parsed.final_slot_errors()
    curve = cdf_from_errors(errors, parse_range(args.eps), label=args.label)
    if args.out:
        _write_cdf([curve], Path(args.out))
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["algorithm", "epsilon", "p"])
        for e, p in zip(curve.epsilons, curve.p):
            w.writerow([curve.label, _fmt(e), _fmt(p)])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gsticp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a Monte-Carlo experiment")
    sim.add_argument("--config", required=True)
    sim.add_argument("--out", required=True)
    sim.add_argument("--algorithm", help="one algorithm or a comma-separated list")
    sim.add_argument("--oracle-nlos", action="store_true", help="use true LOS/NLOS labels")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--eps", default=DEFAULT_EPS, help="CDF thresholds, start:stop:step")
    sim.add_argument("--all-slots", action="store_true")
    sim.add_argument("--workers", type=int, default=1)
    sim.set_defaults(func=cmd_simulate)

    sw = sub.add_parser("sweep", help="vary one config field")
    sw.add_argument("--config", required=True)
    sw.add_argument("--vary", required=True, help="name=start:stop:step, e.g. comm_range=200:600:100")
    sw.add_argument("--out", required=True)
    sw.add_argument("--seed", type=int)
    sw.add_argument("--eps", default=DEFAULT_EPS)
    sw.add_argument("--threshold", type=float, default=5.0, help="report P(e <= threshold)")
    sw.add_argument("--all-slots", action="store_true")
    sw.add_argument("--workers", type=int, default=1)
    sw.set_defaults(func=cmd_sweep)

    cdf = sub.add_parser("cdf", help="error CDF from a results.csv")
    cdf.add_argument("--results", required=True)
    cdf.add_argument("--eps", default=DEFAULT_EPS)
    cdf.add_argument("--label", default="gsticp")
    cdf.add_argument("--all-slots", action="store_true")
    cdf.add_argument("--out")
    cdf.set_defaults(func=cmd_cdf)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SceneFormatError, ScenarioError, MonteCarloError, ValueError, OSError) as exc:
        print(f"gsticp: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
