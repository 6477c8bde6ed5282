"""File formats.

``samples.csv``
    header ``y0[,y1][,log_weight]``, one row per point, ``%.17g`` numbers.
``values.grid``
    one JSON header line, then raw little-endian float64 values in C order.
``*.json``
    sorted keys; non-finite floats are written as the strings ``"inf"``,
    ``"-inf"`` and ``"nan"``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Optional

import numpy as np

FLOAT_FMT = "%.17g"
CSV_SCHEMA = {"samples": "samples/1", "sweep": "sweep/1"}
SWEEP_COLUMNS = ["axis", "value", "mean_reward", "reward_std", "kl_to_pre", "tv_to_target", "runtime_s", "seed"]


def fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return FLOAT_FMT % float(x)


def write_samples_csv(path, points: np.ndarray, log_weights: Optional[np.ndarray] = None) -> None:
    points = np.atleast_2d(points)
    cols = [f"y{j}" for j in range(points.shape[1])]
    if log_weights is not None:
        cols.append("log_weight")
        points = np.column_stack([points, log_weights])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        np.savetxt(fh, points, fmt=FLOAT_FMT, delimiter=",")


def read_samples_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if header[-1] == "log_weight":
        return data[:, :-1], data[:, -1]
    return data, None


def write_grid(path, header: dict, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype="<f8")
    header = dict(header, shape=list(values.shape))
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        fh.write(values.tobytes(order="C"))


def read_grid(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        values = np.frombuffer(fh.read(), dtype="<f8").reshape(header["shape"])
    return header, values


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps_json(obj))


def sweep_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for row in rows:
        w.writerow(["" if row.get(c) is None else fmt(row[c]) for c in SWEEP_COLUMNS])
    return buf.getvalue()
