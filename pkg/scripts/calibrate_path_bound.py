"""
Calibrate the noise path bound for a run config.

Samples many seeds, records the worst coefficient M-norm of each path over the
horizon, and reports the rejection fraction at C = factor * median.

Usage:
    python scripts/calibrate_path_bound.py --config configs/loglog_1d.toml --paths 100 --out path_bound.json
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.core.config import settings  # noqa: E402
from app.core.logging import configure_logging  # noqa: E402
from app.schemas.config import parse_config  # noqa: E402
from app.services.grid_field import make_grid  # noqa: E402
from app.services.noise import PhiFamily, calibrate_path_bound  # noqa: E402


def _parse_args() -> argparse.Namespace:
    p = argparse.ArgumentParser(description="Calibrate noise.path_bound for a config")
    p.add_argument("--config", required=True)
    p.add_argument("--paths", type=int, default=100)
    p.add_argument("--factor", type=float, default=3.0)
    p.add_argument("--out", default="")
    return p.parse_args()


def main() -> None:
    args = _parse_args()
    configure_logging(settings.log_level, settings.log_json)
    config = parse_config(args.config)
    if not config.noise.enabled:
        raise SystemExit("noise is disabled in this config")

    d = config.grid.d
    bumps = [(b.amplitude, b.center, b.width) for b in config.noise.bumps]
    phi = PhiFamily.from_bumps(bumps, d).scaled(config.noise.amplitude)
    grid = make_grid(d, config.grid.L, config.noise.bound_grid_N)
    span = config.time.horizon - config.time.t_start
    n_nodes = int(math.ceil(span / config.time.dt0 - 1e-9)) + 1
    times = config.time.dt0 * np.arange(n_nodes)

    seeds = range(config.ensemble.base_seed, config.ensemble.base_seed + args.paths)
    result = calibrate_path_bound(phi, grid, times, seeds, args.factor)
    text = json.dumps(asdict(result), indent=2)
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


if __name__ == "__main__":
    main()
