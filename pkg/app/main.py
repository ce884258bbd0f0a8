"""
Command line entry point: `python -m app <verb> ...`

    run          simulate an ensemble of noise paths and write the report
    oracle       deterministic validation cases (exit 0 only if all pass)
    fit          re-run the blow-up rate fit on a stored series CSV
    groundstate  tabulate the ground-state profile Q(r)

Exit codes: 0 success, 1 a check failed or a path errored, 2 bad input or a
simulation error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import structlog

from app.core.config import settings
from app.core.errors import SimulationError
from app.core.logging import configure_logging
from app.schemas.config import parse_config
from app.services.ensemble import path_seeds, run_ensemble
from app.services.ground_state import ground_state_for, radial_table
from app.services.grid_field import make_grid
from app.services.oracles import ORACLES, run_oracles
from app.services.rate_fit import fit_series
from app.storage import tables
from app.storage.reports import write_json

logger = structlog.get_logger(__name__)


def _seed_range(value: str) -> list[int]:
    """'7' or '3..9' (inclusive)."""
    try:
        if ".." in value:
            a, b = (int(v) for v in value.split("..", 1))
        else:
            a = b = int(value)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"seeds must look like 'a..b', got {value!r}") from e
    if a < 0 or b < a:
        raise argparse.ArgumentTypeError(f"empty or negative seed range {value!r}")
    return list(range(a, b + 1))


def _parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    p = argparse.ArgumentParser(prog="python -m app", description="Stochastic mass-critical NLS blow-up lab")
    p.add_argument("--log-level", default=None, help="overrides SNLS_LOG_LEVEL")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an ensemble of noise paths")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--out", type=Path, default=None)
    run.add_argument("--seeds", type=_seed_range, default=None, help="inclusive range a..b")
    run.add_argument("--workers", type=int, default=None)

    oracle = sub.add_parser("oracle", help="deterministic validation suite")
    oracle.add_argument("--case", choices=[*ORACLES, "all"], default="all")

    fit = sub.add_parser("fit", help="fit the blow-up rate of a stored series")
    fit.add_argument("--traj", required=True, type=Path, help="CSV with t and lambda columns")
    fit.add_argument("--lambda-hi", type=float, default=0.05)
    fit.add_argument("--lambda-lo", type=float, default=2e-4)
    fit.add_argument("--min-samples", type=int, default=20)
    fit.add_argument("--out", type=Path, default=None, help="write the fit JSON here")

    gs = sub.add_parser("groundstate", help="tabulate Q(r)")
    gs.add_argument("--d", type=int, choices=(1, 2), required=True)
    gs.add_argument("--out", type=Path, default=None, help="CSV path (stdout when omitted)")
    gs.add_argument("--r-max", type=float, default=12.0)
    gs.add_argument("--points", type=int, default=1201)
    return p.parse_args(argv)


def _cmd_run(args: argparse.Namespace) -> int:
    config = parse_config(args.config)
    out = args.out or (Path(config.output.directory) if config.output.directory else settings.output_dir)
    workers = args.workers or settings.effective_workers(config.ensemble.workers)
    seeds = args.seeds if args.seeds is not None else path_seeds(config)
    summary = run_ensemble(config, out_dir=out, seeds=seeds, workers=workers)
    fraction = "n/a" if summary.blowup_fraction is None else f"{summary.blowup_fraction:.3f}"
    print(
        f"paths={summary.n_paths} blowup={summary.n_blowup} horizon={summary.n_horizon} "
        f"rejected={summary.n_rejected} numeric={summary.n_numeric_failure} "
        f"blowup_fraction={fraction} out={out}"
    )
    return 1 if any(p.error for p in summary.paths) else 0


def _cmd_oracle(args: argparse.Namespace) -> int:
    names = None if args.case == "all" else [args.case]
    results = run_oracles(names)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.message}")
    return 0 if all(r.passed for r in results) else 1


def _cmd_fit(args: argparse.Namespace) -> int:
    frame = tables.read_table(args.traj)
    missing = {"t", "lambda"} - set(frame.columns)
    if missing:
        raise SimulationError(f"{args.traj.name} lacks columns {sorted(missing)}", code="io-error")
    if "status" in frame.columns:
        frame = frame[frame["status"] != "newton-divergence"]
    fit = fit_series(frame, lambda_hi=args.lambda_hi, lambda_lo=args.lambda_lo, min_samples=args.min_samples)
    out = fit.to_out()
    if args.out is not None:
        write_json(out, args.out)
    print(out.model_dump_json(indent=2))
    return 0


def _cmd_groundstate(args: argparse.Namespace) -> int:
    table = radial_table(args.d, r_max=args.r_max, n=args.points)
    gs = ground_state_for(make_grid(args.d, 30.0 if args.d == 1 else 12.0, 1024 if args.d == 1 else 256))
    logger.info("ground_state", d=args.d, mass=gs.mass, central=gs.central, residual=gs.residual())
    if args.out is None:
        table.to_csv(sys.stdout, index=False, float_format=tables.FLOAT_FORMAT, lineterminator="\n")
    else:
        tables.write_table(table, args.out, tables.GROUND_STATE_COLUMNS)
        print(f"mass={gs.mass:.10f} Q(0)={gs.central:.12f} out={args.out}")
    return 0


COMMANDS = {
    "run": _cmd_run,
    "oracle": _cmd_oracle,
    "fit": _cmd_fit,
    "groundstate": _cmd_groundstate,
}


def main(argv: list[str] | None = None) -> int:
    args = _parse_args(argv)
    configure_logging(args.log_level or settings.log_level, settings.log_json)
    try:
        return COMMANDS[args.command](args)
    except SimulationError as e:
        print(f"error [{e.code}]: {e.message}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
