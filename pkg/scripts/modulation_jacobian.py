"""
Condition number of the modulation Newton matrix at eps = 0 over a range of b.

Usage:
    python scripts/modulation_jacobian.py --d 1 --b-max 0.3 --points 7
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.services.modulation import condition_table  # noqa: E402


def _parse_args() -> argparse.Namespace:
    p = argparse.ArgumentParser(description="Newton matrix conditioning of the modulation solve")
    p.add_argument("--d", type=int, choices=(1, 2), default=1)
    p.add_argument("--lam", type=float, default=0.2)
    p.add_argument("--b-max", type=float, default=0.3)
    p.add_argument("--points", type=int, default=7)
    p.add_argument("--out", default="")
    return p.parse_args()


def main() -> None:
    args = _parse_args()
    table = condition_table(args.d, args.lam, np.linspace(0.0, args.b_max, args.points))
    print(table.to_string(index=False))
    if args.out:
        table.to_csv(args.out, index=False, float_format="%.17g")


if __name__ == "__main__":
    main()
