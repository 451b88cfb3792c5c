"""Command-line front end.

Every command reads a config file (or a bundled name: table1..table4),
applies ``--set dotted.path=value`` overrides, and writes CSV files plus a
``manifest.json`` into ``--out-dir``. Floats are printed with 17 significant
digits and lines end with a bare newline, so repeated runs give identical
bytes. Exit codes: 0 success, 2 config error, 3 regime or degeneracy error,
4 I/O error.

Set MFETREE_THREADS to solve sweep rows in parallel.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analytics import (DEFAULT_TIMES, continuity_probe, expected_price_curve, joint_law,
                        strategy_rms, sweep, terminal_distribution, time_index)
from .engine import solve_mc_mfe
from .errors import (ConfigError, DegeneracyError, ExperimentError, HigherOrderPole, InvalidParams,
                     MFEError, NotSingular, PathModeCapExceeded, ProbabilityBound, RegimeError,
                     SimplePoleRequired)
from .linalg import laurent_eval_error
from .mcsim import clearing_error
from .model import (apply_overrides, classify_regime, config_digest, interaction_matrix,
                    load_document, read_config_bytes, spec_from_dict)

EXIT_CONFIG, EXIT_REGIME, EXIT_IO = 2, 3, 4


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def parse_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InvalidParams(f"cannot read a number list from {text!r}") from None


class Run:
    """Loaded config plus bookkeeping for the manifest."""

    def __init__(self, args):
        self.args = args
        self.started = time.time()
        self.raw = read_config_bytes(args.config)
        self.doc = apply_overrides(load_document(self.raw), args.set or [])
        self.outputs = []
        self.out_dir = Path(args.out_dir)

    def spec(self):
        return spec_from_dict(self.doc)

    def write(self, name: str, text: str):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / name
        with open(path, "w", newline="") as fh:
            fh.write(text)
        self.outputs.append(str(path))

    def finish(self, seed=None):
        manifest = {
            "command": self.args.command,
            "config": self.args.config,
            "config_digest": config_digest(self.raw),
            "overrides": list(self.args.set or []),
            "seed": seed,
            "outputs": list(self.outputs),
            "wall_clock_seconds": round(time.time() - self.started, 3),
            "version": __version__,
        }
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.out_dir / "manifest.json", "w", newline="") as fh:
            fh.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_solve(run: Run):
    spec = run.spec()
    sol = solve_mc_mfe(spec, keep_strategies=True)
    lat = sol.lattice
    rows = []
    for rec in sol.steps:
        s_vals = lat.values(rec.t)
        y_vals = spec.y_chain.states[rec.t]
        for s in range(rec.p.shape[0]):
            for y in range(rec.p.shape[1]):
                rows.append((rec.t, s, s_vals[s], y, y_vals[y], rec.p[s, y]))
    run.write("transition_probs.csv", csv_text(["n", "s_index", "s_value", "y_index", "y_value", "p_up"], rows))
    run.write("diagnostics.json", json.dumps(sol.diagnostics(), indent=2, sort_keys=True) + "\n")


def cmd_distribution(run: Run):
    sol = solve_mc_mfe(run.spec(), keep_strategies=False)
    dist = terminal_distribution(sol)
    run.write("distribution.csv", csv_text(["s_value", "probability"], zip(sol.lattice.node_values[-1], dist)))


def cmd_price_curve(run: Run):
    sol = solve_mc_mfe(run.spec(), keep_strategies=False)
    curve = expected_price_curve(sol)
    run.write("price_curve.csv", csv_text(["t", "expected_price"], zip(sol.spec.lattice.times(), curve)))


def cmd_rms(run: Run):
    spec = run.spec()
    times = parse_floats(run.args.times) if run.args.times else list(DEFAULT_TIMES)
    pops = [int(p) for p in run.args.populations.split(",")] if run.args.populations else list(range(1, spec.m + 1))
    for p in pops:
        if not 1 <= p <= spec.m:
            raise InvalidParams(f"population {p} outside 1..{spec.m}")
    steps = [time_index(spec, t) for t in times]
    sol = solve_mc_mfe(spec)
    law = joint_law(sol)
    rows = [(t, p, strategy_rms(sol, p - 1, n, law)) for t, n in zip(times, steps) for p in pops]
    run.write("rms.csv", csv_text(["t", "population", "rms"], rows))


def cmd_sweep(run: Run):
    paths = [p.strip() for p in run.args.axis.split(",") if p.strip()]
    values = parse_floats(run.args.values)
    outputs = [o.strip() for o in run.args.outputs.split(",") if o.strip()]
    times = parse_floats(run.args.times) if run.args.times else list(DEFAULT_TIMES)
    workers = int(os.environ.get("MFETREE_THREADS", "1") or 1)
    res = sweep(run.doc, paths, values, outputs=outputs, times=times, workers=workers)
    rms_keys = sorted({k for row in res.rows for k in row.rms})
    header = ["value", "regime", "kind", "terminal_mean", "terminal_std"]
    header += [f"rms_pop{p + 1}_t{fmt(t)}" for p, t in rms_keys] + ["error"]
    rows = [[r.value, r.regime, r.kind, r.terminal_mean, r.terminal_std]
            + [r.rms.get(k, float("nan")) for k in rms_keys] + [r.error] for r in res.rows]
    run.write("sweep.csv", csv_text(header, rows))
    if "distribution" in outputs:
        dist_rows = []
        for r in res.rows:
            if r.distribution is not None:
                dist_rows.extend((r.value, k, pr) for k, pr in enumerate(r.distribution))
        run.write("sweep_distribution.csv", csv_text(["value", "node", "probability"], dist_rows))
    if "price_curve" in outputs:
        curve_rows = []
        for r in res.rows:
            if r.price_curve is not None:
                curve_rows.extend((r.value, n, pr) for n, pr in enumerate(r.price_curve))
        run.write("sweep_price_curve.csv", csv_text(["value", "n", "expected_price"], curve_rows))


def cmd_clearing(run: Run):
    sizes = [int(s) for s in parse_floats(run.args.sizes)]
    if len(sizes) < 2:
        raise ExperimentError("need at least two sizes")
    spec = run.spec()
    sol = solve_mc_mfe(spec)
    ex = clearing_error(spec, sol, sizes, run.args.reps, run.args.seed, time=run.args.time)
    rows = [(n, a, b, c, ex.slope, ex.slope_ci[0], ex.slope_ci[1])
            for n, a, b, c in zip(ex.sizes, ex.mse, ex.mse_total, ex.mean_excess)]
    run.write("clearing.csv", csv_text(["size", "mse", "mse_total", "mean_excess", "slope", "slope_lo", "slope_hi"], rows))
    return run.args.seed


def cmd_resolvent(run: Run):
    theta = interaction_matrix(run.spec())
    rows = []
    for eps in parse_floats(run.args.eps):
        for k in range(run.args.order + 1):
            rows.append((eps, k, laurent_eval_error(theta, eps, k)))
    run.write("resolvent.csv", csv_text(["eps", "order", "error"], rows))


def cmd_continuity(run: Run):
    rows = continuity_probe(run.spec(), parse_floats(run.args.eps))
    run.write("continuity.csv", csv_text(["eps", "p_deviation", "strategy_deviation"],
                                         [(r.eps, r.p_deviation, r.strategy_deviation) for r in rows]))


def cmd_regime(run: Run):
    theta = interaction_matrix(run.spec())
    reg = classify_regime(theta)
    out = {"kind": reg.kind, "kernel_dim": reg.kernel_dim, "theta": theta.tolist(),
           "singular_values": reg.singular_values.tolist()}
    if reg.kind == "Regular":
        out["inverse"] = reg.inv.tolist()
    elif reg.kind == "SingularRank1":
        out.update(v=reg.v.tolist(), kappa=reg.kappa.tolist(), pseudo_inverse=reg.G.tolist(),
                   simple_pole=reg.simple_pole)
    text = json.dumps(out, indent=2, sort_keys=True) + "\n"
    run.write("regime.json", text)
    sys.stdout.write(text)


COMMANDS = {
    "solve": cmd_solve, "distribution": cmd_distribution, "price-curve": cmd_price_curve,
    "rms": cmd_rms, "sweep": cmd_sweep, "clearing": cmd_clearing, "resolvent": cmd_resolvent,
    "continuity": cmd_continuity, "regime": cmd_regime,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfetree", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", help="config file, or one of table1..table4")
        p.add_argument("--set", action="append", metavar="PATH=VALUE", help="override a config field")
        p.add_argument("--out-dir", default=".", help="directory for outputs (default: current)")
        return p

    add("solve", "equilibrium transition probabilities and diagnostics")
    add("distribution", "terminal stock price distribution")
    add("price-curve", "expected stock price at every time")
    p = add("rms", "root mean square of equilibrium positions")
    p.add_argument("--times", help="comma-separated years (default 0.5,1.0,1.5)")
    p.add_argument("--populations", help="comma-separated 1-based population numbers (default all)")
    p = add("sweep", "solve across values of one config field")
    p.add_argument("--axis", required=True, help="dotted path; several comma-separated paths move together")
    p.add_argument("--values", required=True, help="comma-separated increasing values")
    p.add_argument("--outputs", default="distribution", help="any of distribution,price_curve,rms")
    p.add_argument("--times", help="RMS times in years (default 0.5,1.0,1.5)")
    p = add("clearing", "finite-population market-clearing error experiment")
    p.add_argument("--sizes", required=True, help="comma-separated increasing population sizes")
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--time", type=int, default=None, help="fix the decision step (default: random per replication)")
    p = add("resolvent", "truncation error of the resolvent expansion of the config's Theta")
    p.add_argument("--eps", default="0.001", help="comma-separated perturbation sizes")
    p.add_argument("--order", type=int, default=3, help="largest truncation order")
    p = add("continuity", "deviation of perturbed regular solves from the singular solve")
    p.add_argument("--eps", default="0.01,0.001,0.0001")
    add("regime", "classify the interaction matrix")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run = Run(args)
        seed = COMMANDS[args.command](run)
        run.finish(seed)
    except (ConfigError, InvalidParams, ExperimentError, PathModeCapExceeded) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RegimeError, DegeneracyError, HigherOrderPole, NotSingular, SimplePoleRequired, ProbabilityBound) as exc:
        print(f"regime error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_REGIME
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except MFEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
