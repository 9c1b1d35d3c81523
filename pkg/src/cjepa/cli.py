"""``cjepa`` command line: gradcheck, dynamics, train, diagnose, compare, config.

Exit codes: 0 success, 1 computational failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint, config as configfile
from .diagnostics import compare_runs
from .dynamics import DynamicsConfig, Regime, coupled_simulate, integrate_mode, write_coupled_csv, write_mode_csv
from .errors import CJepaError, ConfigError, LogParseError, NonFiniteLoss
from .gradcheck import TOLERANCE, check_loss_terms, check_network
from .metrics import COLUMNS, MetricsLog
from .network import param_shapes
from .trainer import summary, train, write_summary

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
LOSS_COMPONENTS = ("variance", "covariance", "invariance", "vicreg", "cross_block", "jepa", "combined")

CSV_HELP = f"""\
CSV layouts (column order is fixed):
  train metrics.csv : {", ".join(COLUMNS)}
                      (the last five are filled only on diagnostic steps)
  dynamics --lambda : time, mode, value
  dynamics --coupled: time, mode, value, lambda   (value = correlation eigenvalue)
  compare           : step, then one a-b delta column per metric
"""


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="run-config file ([model] [masking] [vicreg] [schedules] [data] [run])")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cjepa",
        description="Desk-scale C-JEPA lab.",
        epilog=CSV_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    _add_config_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=_positive_int, default=3, help="number of seeds, starting at --seed")
    p.add_argument("--perturb-grad", metavar="NAME", help="corrupt one gradient (loss term or parameter name)")

    p = sub.add_parser("dynamics", help="eigenmode dynamics of the linear-predictor model", epilog=CSV_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--regime", default="stop-grad", help="stop-grad | no-stop-grad | no-predictor")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--lambda", dest="lam", type=float, help="integrate one mode with this predictor eigenvalue")
    mode.add_argument("--coupled", action="store_true", help="co-evolve a random batch with its predictor")
    p.add_argument("--eta", type=float, default=0.1)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--dt", type=float, help="step length (default 0.01, or 1.0 with --coupled)")
    p.add_argument("--z0", type=float, default=1.0)
    p.add_argument("--fixed-step", action="store_true", help="one RK4 step per dt (no substepping); may fail as unstable")
    p.add_argument("--n", type=int, default=64, help="batch rows for --coupled")
    p.add_argument("--d", type=int, default=8, help="embedding dim for --coupled")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("train", help="train on synthetic data and write metrics, summary, checkpoint, report",
                       epilog=CSV_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_config_args(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("diagnose", help="validate a metrics CSV and report its last diagnostics")
    p.add_argument("log", type=Path)
    p.add_argument("--out", type=Path, help="write the report as JSON")

    p = sub.add_parser("compare", help="per-step a-b deltas of two metrics CSVs")
    p.add_argument("a", type=Path)
    p.add_argument("b", type=Path)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("config", help="print the effective configuration")
    _add_config_args(p)
    return parser


# ---------------------------------------------------------------- commands


def cmd_gradcheck(args) -> int:
    cfg = configfile.load(args.config, args.overrides)
    if args.perturb_grad is not None and args.perturb_grad not in LOSS_COMPONENTS:
        if args.perturb_grad not in param_shapes(cfg.model):
            print(f"error: unknown gradient {args.perturb_grad!r} for --perturb-grad", file=sys.stderr)
            return EXIT_USAGE
    worst: dict[str, float] = {}
    for trial in range(args.trials):
        seed = args.seed + trial
        results = check_loss_terms(seed, perturb=args.perturb_grad if args.perturb_grad in LOSS_COMPONENTS else None)
        results += check_network(
            seed,
            cfg.model,
            grid=cfg.masking.grid_h,
            wiring=cfg.run.wiring,
            stop_grad=cfg.run.stop_grad,
            perturb=args.perturb_grad if args.perturb_grad not in LOSS_COMPONENTS else None,
        )
        for r in results:
            worst[r.name] = max(worst.get(r.name, 0.0), r.error)
    failed = [name for name, err in worst.items() if err > TOLERANCE]
    for name, err in worst.items():
        print(f"{name:28s} {err:.3e} {'FAIL' if err > TOLERANCE else 'ok'}")
    if failed:
        print(f"gradcheck FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    print(f"gradcheck passed: {len(worst)} components, max relative error {max(worst.values()):.3e}")
    return EXIT_OK


def _verdict(values: np.ndarray) -> str:
    z0 = values[0]
    if np.all(values == z0):
        return "constant"
    mags = np.abs(values)
    if np.all(np.diff(mags) <= 0):
        return "decays"
    if np.all(np.diff(mags) >= 0):
        return "grows"
    return "mixed"


def cmd_dynamics(args) -> int:
    try:
        regime = Regime(args.regime)
    except ValueError:
        print(f"error: unknown regime {args.regime!r}; choose from {[r.value for r in Regime]}", file=sys.stderr)
        return EXIT_FAIL
    dt = args.dt if args.dt is not None else (1.0 if args.coupled else 0.01)
    cfg = DynamicsConfig(eta=args.eta, dt=dt, steps=args.steps, regime=regime, adaptive=not args.fixed_step)
    if args.coupled:
        batch = np.random.default_rng(args.seed).normal(size=(args.n, args.d))
        result = coupled_simulate(batch, args.alpha, cfg)
        if args.out:
            write_coupled_csv(args.out, result)
        final = result.lambdas[-1]
        print(f"regime {regime.value}, alpha {args.alpha}, {args.steps} steps")
        print(f"final lambda: {' '.join(f'{x:.6g}' for x in final)}")
        print(f"final max|lambda-1| = {np.max(np.abs(final - 1.0)):.6g}")
        print(f"final min corr eigenvalue = {np.min(result.corr_eigenvalues[-1]):.6g}")
        return EXIT_OK
    traj = integrate_mode(args.lam, cfg, args.z0)
    if args.out:
        write_mode_csv(args.out, [traj])
    print(f"regime {regime.value}, lambda {traj.lam}, fixed-point distance |lambda-1| = {abs(traj.lam - 1.0):.6g}")
    print(f"z(0) = {traj.values[0]:.6g}, z(T) = {traj.values[-1]:.6g}")
    print(f"summary: {_verdict(traj.values)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = configfile.load(args.config, args.overrides)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(configfile.dumps(cfg))

    def progress(step, row, params):
        if not args.quiet and row["eff_rank"] is not None:
            print(f"step {step:6d} loss {row['loss']:.6g} min_std {row['min_std']:.4g} eff_rank {row['eff_rank']:.4g}")

    start = time.perf_counter()
    try:
        result = train(cfg, on_step=progress)
    except NonFiniteLoss as exc:
        failure = {"schema": 1, "failed_step": exc.step, "error": str(exc), "snapshot": exc.snapshot}
        write_summary(out / "summary.json", failure)
        print(f"error: non-finite loss at step {exc.step}", file=sys.stderr)
        return EXIT_FAIL
    elapsed = time.perf_counter() - start
    result.log.write_csv(out / "metrics.csv")
    write_summary(out / "summary.json", summary(cfg, result, elapsed))
    checkpoint.save(out / "checkpoint.bin", result.params)
    (out / "report.json").write_text(result.report.to_json() + "\n")
    r = result.report
    print(f"done in {elapsed:.1f}s: min_std {r.min_std:.4g}, eff_rank {r.effective_rank:.4g}, collapsed {r.collapsed}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    try:
        log = MetricsLog.read_csv(args.log)
    except LogParseError as exc:
        print(f"error: {args.log}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    snaps = log.snapshots()
    if not snaps:
        print("error: log has no diagnostic rows", file=sys.stderr)
        return EXIT_FAIL
    last = snaps[-1]
    report = {k: last[k] for k in ("step", "min_std", "mean_std", "offdiag_cov", "eff_rank", "collapsed")}
    report["rows"] = len(log.rows)
    report["finite"] = log.is_finite()
    text = json.dumps(report, indent=2)
    if args.out:
        args.out.write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        a, b = MetricsLog.read_csv(args.a), MetricsLog.read_csv(args.b)
    except LogParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    comp = compare_runs(a, b)
    if args.out:
        args.out.write_text(comp.to_csv())
    for name, delta in comp.final.items():
        print(f"{name:12s} final a-b = {'n/a' if delta is None else f'{delta:+.6g}'}")
    return EXIT_OK


def cmd_config(args) -> int:
    print(configfile.dumps(configfile.load(args.config, args.overrides)), end="")
    return EXIT_OK


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "dynamics": cmd_dynamics,
    "train": cmd_train,
    "diagnose": cmd_diagnose,
    "compare": cmd_compare,
    "config": cmd_config,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CJepaError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
