"""
CSV persistence for per-path series and aggregate tables.

Every table has a documented column list; writers refuse frames whose columns
differ from it, and floats are written with 17 significant digits so re-emitting
the same frame gives the same bytes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd

from app.core.errors import StorageError

FLOAT_FORMAT = "%.17g"

AGGREGATE_COLUMNS = ["t", "inv_lambda_median", "inv_lambda_q25", "inv_lambda_q75", "n_paths"]
GROUND_STATE_COLUMNS = ["r", "Q"]
REGRID_COLUMNS = ["t", "kind", "old_N", "new_N", "old_L", "new_L", "mass_change"]
VIRIAL_COLUMNS = ["t", "s", "b", "b_s", "lam2_E", "q", "q_over_gamma"]


def _axes(prefix: str, d: int) -> list[str]:
    return [f"{prefix}_{j + 1}" for j in range(d)]


def trajectory_columns(d: int) -> list[str]:
    return ["t", "step", "dt", "N", "L", *_axes("center", d), "mass", "h1_x", "lambda_est"]


def modulation_columns(d: int) -> list[str]:
    return [
        "t", "s", "lambda", "b", *_axes("x_c", d), "gamma",
        "eps_l2", "eps_weighted", "residual_max", "valid", "status",
    ]


def diagnostics_columns(d: int) -> list[str]:
    return [
        "t", "s", "mass", "energy", *_axes("P", d), "h1", "lambda", "b", "gamma_b",
        "lam2_E", "lam_P", "drift_budget", "mass_excess", "l2_beta", "l2_c",
    ]


def brownian_columns(K: int) -> list[str]:
    return ["t", *[f"B_{k + 1}" for k in range(K)]]


def write_table(frame: pd.DataFrame, path: str | Path, columns: list[str]) -> Path:
    if list(frame.columns) != list(columns):
        raise StorageError(f"{Path(path).name}: columns {list(frame.columns)} != documented {columns}")
    p = Path(path)
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(p, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    except OSError as e:
        raise StorageError(f"cannot write {p}: {e}") from e
    return p


def read_table(path: str | Path, columns: list[str] | None = None) -> pd.DataFrame:
    p = Path(path)
    try:
        frame = pd.read_csv(p, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise StorageError(f"cannot read {p}: {e}") from e
    if columns is not None and list(frame.columns) != list(columns):
        raise StorageError(f"{p.name}: header {list(frame.columns)} != documented {columns}")
    return frame


def brownian_frame(times: np.ndarray, bpaths: np.ndarray) -> pd.DataFrame:
    bpaths = np.atleast_2d(bpaths)
    K = bpaths.shape[1]
    data = {"t": np.asarray(times, dtype=float)}
    data.update({f"B_{k + 1}": bpaths[:, k] for k in range(K)})
    return pd.DataFrame(data, columns=brownian_columns(K))


def regrid_frame(events: list) -> pd.DataFrame:
    rows = [{c: getattr(e, c) for c in REGRID_COLUMNS} for e in events]
    return pd.DataFrame(rows, columns=REGRID_COLUMNS)


def aggregate_inverse_lambda(frames: list[pd.DataFrame]) -> pd.DataFrame:
    """Median and quartiles of 1/lambda across paths on the union of sample times.

    A path contributes at t only when t lies inside its own sampled range.
    """
    usable = []
    for f in frames:
        keep = f[np.isfinite(f["lambda"]) & (f["lambda"] > 0)]
        if len(keep):
            keep = keep.sort_values("t", kind="mergesort").drop_duplicates("t", keep="last")
            usable.append((keep["t"].to_numpy(dtype=float), 1.0 / keep["lambda"].to_numpy(dtype=float)))
    if not usable:
        return pd.DataFrame(columns=AGGREGATE_COLUMNS)

    t = np.unique(np.concatenate([tt for tt, _ in usable]))
    stack = np.full((len(usable), t.size), np.nan)
    for i, (tt, inv) in enumerate(usable):
        inside = (t >= tt[0]) & (t <= tt[-1])
        stack[i, inside] = np.interp(t[inside], tt, inv)
    counts = np.sum(np.isfinite(stack), axis=0)
    q25, med, q75 = np.nanpercentile(stack, [25.0, 50.0, 75.0], axis=0)
    return pd.DataFrame(
        {
            "t": t,
            "inv_lambda_median": med,
            "inv_lambda_q25": q25,
            "inv_lambda_q75": q75,
            "n_paths": counts.astype(int),
        },
        columns=AGGREGATE_COLUMNS,
    )
