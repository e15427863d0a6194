"""Command-line entry point: ``fairfreq <command> ...``.

Commands
  calibrate   participation probability, minimum delta and feasibility
  simulate    one protocol run with estimate and transcript summary
  weights     group weights for a list of budgets and sizes
  experiment  seeded sweep from a JSON config, CSV on stdout or a file
  ingest      raw check-ins or incomes to the canonical dataset format
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from typing import List, Optional

from . import mechanisms as mech
from . import weighting
from .datasets import (
    GOWALLA_LAT,
    GOWALLA_LON,
    ingest_checkins,
    ingest_income,
    load_dataset,
    save_dataset,
    synth_checkin_dataset,
    synth_normal,
    synth_uniform,
)
from .experiments import ConfigError, ExperimentConfig, run_experiment, write_csv, write_trials_csv
from .protocols import run_dpds, run_tss, run_tss_prime
from .streams import DEFAULT_SEED


def _floats(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _pair(text: str):
    vals = _floats(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got {text!r}")
    return tuple(vals)


def _fmt(x: float) -> str:
    return f"{x:.6g}" if abs(x) >= 1e-4 or x == 0 else f"{x:.6e}"


# ---------------------------------------------------------------------------


def cmd_calibrate(args, out) -> int:
    if not (args.thm1 or args.thm2 or args.crossover):
        args.thm1 = True
    if args.thm1:
        p = mech.calibrate_p_thm1(args.epsilon)
        print(f"p={p:.6f}", file=out)
        if args.n is not None and args.N is not None and args.beta is not None:
            try:
                d = mech.min_delta_thm1(args.n, args.N, args.epsilon, args.beta)
                print(f"delta_min={_fmt(d)}", file=out)
                if args.delta is not None:
                    ok = mech.satisfies_thm1(args.n, args.N, args.epsilon, args.delta, args.beta)
                    print(f"feasible={str(ok).lower()}", file=out)
            except mech.InfeasibleCalibration as exc:
                print(f"feasible=false ({exc})", file=out)
    if args.thm2:
        missing = [k for k in ("n", "N", "delta", "beta") if getattr(args, k) is None]
        if missing:
            raise SystemExit(f"--thm2 needs {', '.join('--' + k for k in missing)}")
        if args.z is None:
            try:
                z = mech.largest_feasible_z(args.n, args.N, args.epsilon, args.delta, args.beta)
            except mech.InfeasibleCalibration as exc:
                print(f"feasible=false ({exc})", file=out)
                return 0
        else:
            z = args.z
        chk = mech.check_thm2(args.n, args.N, args.epsilon, args.delta, args.beta, z)
        print(f"z={z:.6f}", file=out)
        print(f"beta_min={_fmt(chk.beta_min)}", file=out)
        print(f"z_max={_fmt(chk.z_max)}", file=out)
        print(f"feasible={str(chk.feasible).lower()}", file=out)
        if chk.feasible:
            print(f"p={chk.p:.6f}", file=out)
        elif chk.reason:
            print(f"reason={chk.reason}", file=out)
    if args.crossover:
        delta = args.delta if args.delta is not None else 1e-5
        print(f"n_star={mech.gaussian_crossover_n(args.epsilon, delta)}", file=out)
    return 0


def _dataset_from_args(args):
    if args.dataset:
        return load_dataset(args.dataset)
    if args.synthetic == "uniform":
        return synth_uniform(args.n, args.N, args.data_seed)
    if args.synthetic == "normal":
        return synth_normal(args.n, args.N, args.data_seed)
    ds = synth_checkin_dataset(int(args.n * 1.2) + 10, args.data_seed)
    return ds.subsample(min(args.n, ds.n), args.data_seed)


def cmd_simulate(args, out) -> int:
    data = _dataset_from_args(args)
    if args.p is not None:
        p = args.p
    elif args.epsilon is not None:
        p = mech.calibrate_p_thm1(args.epsilon)
    else:
        raise SystemExit("simulate needs --p or --epsilon")
    if args.protocol == "dpds":
        run = run_dpds(data, p, args.seed)
    else:
        params = mech.MechanismParams(p=p, alpha=args.alpha, chi=args.chi, gamma=args.gamma, phi=args.phi)
        runner = run_tss_prime if args.protocol == "tss_prime" else run_tss
        run = runner(data, params, args.seed)
    summary = run.transcript.summary()
    summary["p"] = p
    summary["seed"] = args.seed
    print(json.dumps(summary, sort_keys=True), file=out)
    if args.log:
        run.transcript.write_log(args.log)
    return 0


def cmd_weights(args, out) -> int:
    eps = args.eps
    sizes = args.sizes if args.sizes is not None else [1] * len(eps)
    if len(sizes) != len(eps):
        raise SystemExit("--eps and --sizes need the same length")
    variances = weighting.sampling_group_variance(eps)
    if args.method == "closed_form":
        w = weighting.closed_form_weights(variances)
    elif args.method == "optimized":
        w = weighting.optimize_weights(sizes, variances)
    else:
        w = weighting.unweighted(len(eps))
    print("weights=" + ",".join(f"{x:.4f}" for x in w.weights), file=out)
    print(f"method={w.method}", file=out)
    print(f"relative_error={_fmt(weighting.expected_squared_error(w.weights, sizes, variances))}", file=out)
    return 0


def cmd_experiment(args, out) -> int:
    try:
        cfg = ExperimentConfig.from_json(args.config)
    except (OSError, ConfigError) as exc:
        raise SystemExit(f"invalid config: {exc}")
    if args.workers is not None:
        from dataclasses import replace
        cfg = replace(cfg, workers=args.workers)
    rows = run_experiment(cfg)
    writer = write_trials_csv if args.per_trial else write_csv
    if args.output:
        with open(args.output, "w", encoding="utf-8", newline="") as fh:
            writer(rows, cfg.grid_keys, fh)
    else:
        writer(rows, cfg.grid_keys, out)
    return 0


def cmd_ingest(args, out) -> int:
    if args.kind == "checkins":
        ds = ingest_checkins(args.input, lat_range=args.lat, lon_range=args.lon,
                             cell_size=args.cell, grid=args.grid, delimiter=args.delimiter)
    else:
        ds = ingest_income(args.input, width=args.width, column=args.column, delimiter=args.delimiter)
    save_dataset(ds, args.output)
    print(f"wrote {ds.n} users, N={ds.N} to {args.output}", file=out)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fairfreq", description="Private frequency estimation by sampling.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", help="privacy calibration")
    c.add_argument("--thm1", action="store_true", help="participation bound: p and minimum delta")
    c.add_argument("--thm2", action="store_true", help="tighter bound with slack z")
    c.add_argument("--crossover", action="store_true", help="population size where sampling beats Gaussian noise")
    c.add_argument("--epsilon", type=float, required=True)
    c.add_argument("--delta", type=float)
    c.add_argument("--n", type=int)
    c.add_argument("--N", type=int)
    c.add_argument("--beta", type=float)
    c.add_argument("--z", type=float)
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("simulate", help="run one protocol")
    s.add_argument("--protocol", choices=("dpds", "tss", "tss_prime"), default="dpds")
    s.add_argument("--dataset", help="canonical dataset file")
    s.add_argument("--synthetic", choices=("uniform", "normal", "checkins"), default="uniform")
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--N", type=int, default=10)
    s.add_argument("--data-seed", type=int, default=0)
    s.add_argument("--p", type=float)
    s.add_argument("--epsilon", type=float)
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--chi", choices=(mech.UNIFORM, mech.ADAPTIVE), default=mech.UNIFORM)
    s.add_argument("--gamma", type=float, default=1.0)
    s.add_argument("--phi", type=int, default=0)
    s.add_argument("--seed", type=int, default=DEFAULT_SEED)
    s.add_argument("--log", help="write the transcript as JSON lines")
    s.set_defaults(func=cmd_simulate)

    w = sub.add_parser("weights", help="group weights")
    w.add_argument("--eps", type=_floats, required=True)
    w.add_argument("--sizes", type=_ints)
    w.add_argument("--method", choices=("closed_form", "optimized", "unweighted"), default="closed_form")
    w.set_defaults(func=cmd_weights)

    e = sub.add_parser("experiment", help="seeded sweep from a JSON config")
    e.add_argument("--config", required=True)
    e.add_argument("--output", help="CSV path (stdout by default)")
    e.add_argument("--workers", type=int)
    e.add_argument("--per-trial", action="store_true", help="one row per trial instead of means")
    e.set_defaults(func=cmd_experiment)

    g = sub.add_parser("ingest", help="convert raw data to the canonical format")
    g.add_argument("kind", choices=("checkins", "income"))
    g.add_argument("input")
    g.add_argument("output")
    g.add_argument("--delimiter")
    g.add_argument("--lat", type=_pair, default=GOWALLA_LAT)
    g.add_argument("--lon", type=_pair, default=GOWALLA_LON)
    g.add_argument("--cell", type=_pair, default=(5.0, 5.0), help="cell size in degrees")
    g.add_argument("--grid", type=_ints, help="ROWS,COLS instead of a cell size")
    g.add_argument("--width", type=float, default=100)
    g.add_argument("--column", type=int)
    g.set_defaults(func=cmd_ingest)
    return ap


def main(argv: Optional[List[str]] = None, out=None) -> int:
    out = out if out is not None else sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, out)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
