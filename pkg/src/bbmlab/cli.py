"""Command line: configure, run, verify, and report.

Subcommands
    simulate      evolve replicates, write snapshot dumps + manifest + stats
    verify        run acceptance suites, write a verdict table
    constants     quadrature report of the limit-law constants for a functional
    fluctuations  ensemble of fluctuation statistics: CSV samples + verdicts
    stopping-line killing-barrier ensemble: kill-time CSV + moment checks

Every experiment is described by a JSON config file (see ``--help`` of each
subcommand for the keys); command-line flags override single fields. The
resolved config is embedded in the output manifest, so rerunning a manifest
reproduces every output byte for byte.

Exit codes: 0 pass, 1 check failure, 2 usage/config error, 3 resource error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__
from .engine import ConfigError, ResourceBudgetError, backend_name, evolve, write_snapshots
from .stats import (RunManifest, default_workers, run_fluctuation_ensemble,
                    run_stopping_ensemble, stoppingline_moment_check, verdict,
                    write_samples_csv, write_verdicts, hill_index, hill_sensitivity)

CONFIG_KEYS = """\
config file keys (JSON; defaults in parentheses):
  kind            experiment kind; set by the subcommand
  t               census horizon / statistic time T (required)
  reps            replicate count (100)
  seed            master seed, 64-bit (0)
  dt              step size for barrier-resolved motion (0.01)
  x0              start position (0.0)
  offspring       reproduction pmf, e.g. {"2": 1.0} (binary)
  functional      catalog key like "one", "inv_x", "exp:-1", or a
                  term descriptor {"terms": [[coef, power, rate], ...]}
  mode            fluctuation statistic: "additive-cauchy" | "general-F"
  proxy_gap       limit-mass proxy is read at T = t + proxy_gap (5.0)
  barrier         {"level": g, "t_start": a, "t_end": b|"inf",
                   "floor": -M|null, "continue_tagged": bool} (none)
  x_max           pruning ceiling; null disables (40.0)
  max_segments    per-replicate lineage budget (5000000)
  snapshot_times  census times for simulate (default [t])
  phi_window_start  stopping-line: also check the count killed from this
                    time on (4.0)
"""


def _load_config(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")


def _resolved(args, kind: str) -> dict:
    cfg = _load_config(args.config) if args.config else {}
    cfg["kind"] = kind
    for key in ("seed", "reps", "t", "out"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    cfg.setdefault("reps", 100)
    cfg.setdefault("seed", 0)
    cfg.setdefault("out", "bbmlab-out")
    if "t" not in cfg and kind not in ("verify",):
        raise ConfigError("missing field 't' (set in the config file or with --t)")
    return cfg


def _manifest(cfg: dict) -> RunManifest:
    bar = cfg.get("barrier") or {}
    t_end = bar.get("t_end", math.inf)
    if t_end == "inf":
        t_end = math.inf
    try:
        return RunManifest(
            kind=cfg["kind"], t=float(cfg["t"]), replicates=int(cfg["reps"]),
            seed=int(cfg["seed"]), proxy_gap=float(cfg.get("proxy_gap", 5.0)),
            functional=cfg.get("functional", "one"),
            mode=cfg.get("mode", "additive-cauchy"),
            dt=float(cfg.get("dt", 1e-2)), x0=float(cfg.get("x0", 0.0)),
            offspring=cfg.get("offspring", {"2": 1.0}),
            barrier_level=bar.get("level"),
            barrier_t_start=float(bar.get("t_start", 0.0)),
            barrier_t_end=float(t_end),
            floor=bar.get("floor"),
            continue_tagged=bool(bar.get("continue_tagged", False)),
            x_max=cfg.get("x_max", 40.0),
            max_segments=int(cfg.get("max_segments", 5_000_000)),
            snapshot_times=tuple(cfg.get("snapshot_times", ())),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config value: {exc}")


def _outdir(cfg) -> str:
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    return out


def _write_manifest(out, manifest: RunManifest) -> str:
    path = os.path.join(out, "manifest.json")
    with open(path, "w") as fh:
        fh.write(manifest.to_json())
        fh.write("\n")
    return manifest.hash()


def cmd_simulate(args) -> int:
    cfg = _resolved(args, "simulate")
    m = _manifest(cfg)
    if not m.snapshot_times:
        m.snapshot_times = (m.t,)
    out = _outdir(cfg)
    h = _write_manifest(out, m)
    stats = []
    for rep in range(m.replicates):
        try:
            res = evolve(m.engine_config(rep, m.snapshot_times))
        except ResourceBudgetError as exc:
            print(f"replicate {rep}: {exc}", file=sys.stderr)
            return 3
        write_snapshots(os.path.join(out, f"snapshots-r{rep:05d}.bin"), res)
        stats.append({"replicate": rep, **res.stats})
    with open(os.path.join(out, "run-stats.json"), "w") as fh:
        json.dump({"format": "bbmlab-runstats-v1", "manifest": h,
                   "backend": backend_name(), "replicates": stats},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {m.replicates} snapshot dump(s) to {out} (manifest {h})")
    return 0


def cmd_verify(args) -> int:
    from .acceptance import SUITES, run_criteria
    cfg = _resolved(args, "verify") if args.config else {"out": args.out or "bbmlab-out"}
    names = [s.strip() for s in (args.suite or "hard-gates").split(",")]
    numbers = []
    for name in names:
        if name not in SUITES:
            raise ConfigError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
        numbers.extend(SUITES[name])
    verdicts = run_criteria(numbers, workers=args.workers)
    out = cfg.get("out", "bbmlab-out")
    os.makedirs(out, exist_ok=True)
    write_verdicts(os.path.join(out, "verdicts.json"), verdicts)
    width = max(len(v["check"]) for v in verdicts)
    ok = True
    for v in verdicts:
        ok &= v["pass"]
        print(f"[{'PASS' if v['pass'] else 'FAIL'}] criterion {v['criterion']:2d} "
              f"{v['check']:{width}s}  {v['runtime_s']:8.1f}s")
    print(f"verdicts written to {out}/verdicts.json")
    return 0 if ok else 1


def cmd_constants(args) -> int:
    from .functionals import FunctionalSpec, get_functional
    from .limits import logt_coefficient, prop_constants
    cfg = _load_config(args.config) if args.config else {}
    key = args.functional or cfg.get("functional", "one")
    if isinstance(key, dict):
        F = FunctionalSpec.from_descriptor(key)
    else:
        try:
            F = get_functional(key)
        except KeyError as exc:
            raise ConfigError(str(exc))
    mu_z = float(cfg.get("mu_z", args.mu_z if args.mu_z is not None else 0.0))
    p = prop_constants(F, mu_z=mu_z)
    report = {
        "functional": F.name, "c1": p.c1, "c2": p.c2, "c3": p.c3,
        "mu_z": mu_z, "logt_coeff": logt_coefficient(F),
        "quadrature_error": p.quad_error,
    }
    print(json.dumps(report, indent=2, sort_keys=True))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, f"constants-{F.name}.json"), "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def cmd_fluctuations(args) -> int:
    cfg = _resolved(args, "fluctuations")
    m = _manifest(cfg)
    out = _outdir(cfg)
    h = _write_manifest(out, m)
    t0 = time.time()
    try:
        samples = run_fluctuation_ensemble(m, workers=args.workers)
    except ResourceBudgetError as exc:
        print(str(exc), file=sys.stderr)
        return 3
    write_samples_csv(os.path.join(out, "samples.csv"), m, samples)
    stats = np.array([s.statistic for s in samples if s.ok])
    verdicts = []
    if stats.size >= 200:
        k = max(10, stats.size // 100)
        alpha, se = hill_index(stats, k, "abs")
        verdicts.append(verdict("tail-index", {"hill": alpha, "se": se, "k": k},
                                "~1 for the 1-stable class", "[0.7, 1.4]",
                                0.7 <= alpha <= 1.4,
                                sensitivity=[(kk, round(a, 3)) for kk, a, _ in
                                             hill_sensitivity(stats)]))
    # second proxy distance when the horizon fits the budget
    two_t_T = 2.0 * m.t
    feasible = 3.0 * math.exp(two_t_T / 2.0) < m.max_segments
    note = {"proxy_T": m.t + m.proxy_gap,
            "proxy_2t": two_t_T if feasible else
            f"skipped: expected lineage count exceeds max_segments={m.max_segments}"}
    write_verdicts(os.path.join(out, "verdicts.json"), verdicts)
    with open(os.path.join(out, "notes.json"), "w") as fh:
        json.dump(note, fh, indent=2, sort_keys=True)
        fh.write("\n")
    n_bad = sum(not s.ok for s in samples)
    print(f"{len(samples)} replicates ({n_bad} over budget) in "
          f"{time.time() - t0:.1f}s -> {out}/samples.csv (manifest {h})")
    return 0 if all(v["pass"] for v in verdicts) else 1


def cmd_stopping_line(args) -> int:
    cfg = _resolved(args, "stopping-line")
    if "barrier" not in cfg:
        cfg["barrier"] = {"level": 0.0}
    if cfg.get("x0", 0.0) <= cfg["barrier"].get("level", 0.0):
        raise ConfigError("x0 must start above the barrier level "
                          "(set x0 in the config)")
    m = _manifest(cfg)
    out = _outdir(cfg)
    h = _write_manifest(out, m)
    try:
        counts, times_by_rep, _, failed = run_stopping_ensemble(m, workers=args.workers)
    except ResourceBudgetError as exc:
        print(str(exc), file=sys.stderr)
        return 3
    x = m.x0 - (m.barrier_level or 0.0)
    horizon = m.t
    chk1 = stoppingline_moment_check(times_by_rep, x, None, horizon=horizon)
    s0 = float(cfg.get("phi_window_start", 4.0))
    chk2 = stoppingline_moment_check(
        times_by_rep, x, lambda r: np.asarray(r >= s0, dtype=float),
        horizon=horizon)
    verdicts = [
        verdict("killed-count", chk1["mc_mean"], chk1["closed_form"],
                "3 s.e.", abs(chk1["z"]) < 3.0, z=chk1["z"]),
        verdict(f"killed-count-from-{s0:g}", chk2["mc_mean"], chk2["closed_form"],
                "3 s.e.", abs(chk2["z"]) < 3.0, z=chk2["z"]),
    ]
    write_verdicts(os.path.join(out, "verdicts.json"), verdicts)
    with open(os.path.join(out, "kill-times.csv"), "w") as fh:
        fh.write("format,bbmlab-killtimes-v1\n")
        fh.write("manifest,replicate,time\n")
        for rep, ts in enumerate(times_by_rep):
            for t in ts:
                fh.write(f"{h},{rep},{t!r}\n")
    for v in verdicts:
        print(f"[{'PASS' if v['pass'] else 'FAIL'}] {v['check']}: "
              f"{v['observed']:.5f} vs {v['predicted']:.5f} (z={v['z']:.2f})")
    if failed:
        print(f"{len(failed)} replicate(s) over budget", file=sys.stderr)
    return 0 if all(v["pass"] for v in verdicts) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="bbm-lab",
        description="Monte Carlo laboratory for critical branching Brownian "
                    "motion: simulate, verify identities, compute limit "
                    "constants, measure fluctuations.",
        epilog=CONFIG_KEYS,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"bbm-lab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_t=True):
        sp.add_argument("--config", metavar="PATH", help="JSON config file")
        sp.add_argument("--seed", type=int, metavar="U64",
                        help="master seed (default 0)")
        sp.add_argument("--reps", type=int, metavar="N",
                        help="replicate count (default 100)")
        if needs_t:
            sp.add_argument("--t", type=float, metavar="REAL",
                            help="census horizon / statistic time t")
        sp.add_argument("--out", metavar="DIR",
                        help="output directory (default bbmlab-out)")
        sp.add_argument("--workers", type=int, metavar="N",
                        default=None,
                        help="parallel workers (default: BBM_LAB_WORKERS "
                             "or CPU count); results never depend on it")

    sp = sub.add_parser("simulate", help="evolve replicates and dump snapshots",
                        epilog=CONFIG_KEYS,
                        formatter_class=argparse.RawDescriptionHelpFormatter)
    common(sp)
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("verify", help="run acceptance suites")
    common(sp, needs_t=False)
    sp.add_argument("--suite", metavar="NAME[,NAME...]",
                    help="suites to run (default hard-gates); see "
                         "bbmlab.acceptance.SUITES: normalization, "
                         "many-to-one, stopping-line, global-min, "
                         "appendix-identities, cauchy, g-expansion, "
                         "decomposition, bessel-density, dt-robustness, "
                         "gibbs-convergence, fluctuations, quadrature, "
                         "hard-gates, all")
    sp.set_defaults(fn=cmd_verify)

    sp = sub.add_parser("constants", help="limit-law constants by quadrature")
    sp.add_argument("--config", metavar="PATH", help="JSON config file")
    sp.add_argument("--functional", metavar="KEY",
                    help="catalog key (one, x, x2, x2_centered, exp_half, "
                         "exp_neg, inv_x, inv_sqrt_x, inv_x32) or exp:<r>/pow:<p>")
    sp.add_argument("--mu-z", type=float, default=None, metavar="REAL",
                    help="centering constant entering the drift c3 (default 0; "
                         "pass a Monte Carlo estimate to center the drift)")
    sp.add_argument("--out", metavar="DIR", help="also write JSON report here")
    sp.set_defaults(fn=cmd_constants)

    sp = sub.add_parser("fluctuations", help="fluctuation-statistic ensemble",
                        epilog=CONFIG_KEYS,
                        formatter_class=argparse.RawDescriptionHelpFormatter)
    common(sp)
    sp.set_defaults(fn=cmd_fluctuations)

    sp = sub.add_parser("stopping-line", help="killing-barrier ensemble",
                        epilog=CONFIG_KEYS,
                        formatter_class=argparse.RawDescriptionHelpFormatter)
    common(sp)
    sp.set_defaults(fn=cmd_stopping_line)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ResourceBudgetError as exc:
        print(f"resource error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
