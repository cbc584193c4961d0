"""
Deterministic text outputs: JSON with sorted keys and CSV with
round-trippable floats.  Nothing written here carries a timestamp, so equal
inputs give byte-identical files.
"""
import csv
import json
from pathlib import Path

import numpy as np

from .exit import ExitRecord



def fmt(v):
    """Shortest text that reads back to the same double."""
    return repr(float(v))


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


def write_matrix(path, rows, header=None):
    """2-D array as CSV (one row per time or sample, one column per node)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = np.asarray(rows, dtype=float)
    if rows.ndim == 1:
        rows = rows[:, None]
    with path.open("w", newline="") as fh:
        if header is not None:
            fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(map(fmt, row)) + "\n")
    return path


def read_matrix(path, header=False):
    return np.loadtxt(path, delimiter=",", skiprows=1 if header else 0, ndmin=2)


def write_path(path, traj):
    """Trajectory as CSV: a time column followed by the flattened state."""
    states = traj.states.reshape(len(traj.states), -1)
    data = np.column_stack([traj.times, states])
    header = ["t"] + [f"x{j}" for j in range(states.shape[1])]
    return write_matrix(path, data, header)


def write_table(path, rows, columns):
    """List of dicts as CSV with the given column order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for r in rows:
            writer.writerow([fmt(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return path


RECORD_COLUMNS = ["epsilon", "seed", "trajectory", "tau", "nearest_saddle", "saddle_distance",
                  "blowup", "censored", "verdict", "checkpoint_step", "shape_file", "shape_row"]


def write_records(directory, records, name="records"):
    """Exit records as ``<name>.csv`` with shapes in the sidecar ``<name>_shapes.csv``."""
    directory = Path(directory)
    shape_file = f"{name}_shapes.csv"
    rows = []
    for k, r in enumerate(records):
        row = r.row()
        row.update(shape_file=shape_file, shape_row=k)
        rows.append(row)
    write_table(directory / f"{name}.csv", rows, RECORD_COLUMNS)
    shapes = np.array([r.exit_shape.ravel() for r in records]) if records else np.zeros((0, 0))
    write_matrix(directory / shape_file, shapes)
    return directory / f"{name}.csv"


def read_records(csv_path, grid_shape):
    csv_path = Path(csv_path)
    with csv_path.open() as fh:
        rows = list(csv.DictReader(fh))
    shapes = {}
    out = []
    for row in rows:
        fname = row["shape_file"]
        if fname not in shapes:
            shapes[fname] = read_matrix(csv_path.parent / fname)
        shape = shapes[fname][int(row["shape_row"])].reshape(grid_shape)
        out.append(ExitRecord(float(row["epsilon"]), int(row["seed"]), int(row["trajectory"]),
                              float(row["tau"]), shape, row["nearest_saddle"],
                              float(row["saddle_distance"]), bool(int(row["blowup"])),
                              bool(int(row["censored"])), row["verdict"],
                              int(row["checkpoint_step"])))
    return out
