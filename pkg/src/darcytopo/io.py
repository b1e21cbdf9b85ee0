"""File output: legacy VTK snapshots, CSV convergence logs and checkpoints."""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from dataclasses import asdict, is_dataclass

import numpy as np

from .optimizer import CHECKPOINT_VERSION, IterationRecord, final_continuation


def _atomic_write(path, write):
    """Write through a temporary file so failures leave no partial output."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            write(fh)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


# ----------------------------------------------------------------- VTK


def write_vtk(path, mesh, cell_data=None, point_data=None, title="darcytopo"):
    """Legacy ASCII STRUCTURED_GRID file with cell and point scalars.

    Values are written with 17 significant digits so they re-parse exactly.
    """
    cell_data = dict(cell_data or {})
    point_data = dict(point_data or {})
    if not cell_data and not point_data:
        raise ValueError("no fields to write")
    for name, arr in cell_data.items():
        if np.shape(arr) != (mesh.n_elements,):
            raise ValueError(f"cell field {name!r} has shape {np.shape(arr)}, "
                             f"expected ({mesh.n_elements},)")
    for name, arr in point_data.items():
        if np.shape(arr) != (mesh.n_nodes,):
            raise ValueError(f"point field {name!r} has shape {np.shape(arr)}, "
                             f"expected ({mesh.n_nodes},)")

    def write(fh):
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"{title}\nASCII\nDATASET STRUCTURED_GRID\n")
        nx, ny, nz = mesh.node_shape
        fh.write(f"DIMENSIONS {nx} {ny} {nz}\n")
        fh.write(f"POINTS {mesh.n_nodes} double\n")
        np.savetxt(fh, mesh.node_coords(), fmt="%.17g")
        for header, n, data in (("CELL_DATA", mesh.n_elements, cell_data),
                                ("POINT_DATA", mesh.n_nodes, point_data)):
            if not data:
                continue
            fh.write(f"{header} {n}\n")
            for name, arr in data.items():
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                np.savetxt(fh, np.asarray(arr, dtype=float), fmt="%.17g")

    _atomic_write(path, write)


def read_vtk(path):
    """Parse a file written by :func:`write_vtk`.

    Returns ``(dimensions, points, cell_data, point_data)``.
    """
    with open(path) as fh:
        tokens = fh.read().split("\n")
    it = iter(tokens[4:])
    dims = points = None
    cell, point = {}, {}
    target = None
    for line in it:
        parts = line.split()
        if not parts:
            continue
        key = parts[0]
        if key == "DIMENSIONS":
            dims = tuple(int(v) for v in parts[1:4])
        elif key == "POINTS":
            n = int(parts[1])
            points = np.array([[float(v) for v in next(it).split()] for _ in range(n)])
        elif key == "CELL_DATA":
            target, n = cell, int(parts[1])
        elif key == "POINT_DATA":
            target, n = point, int(parts[1])
        elif key == "SCALARS":
            next(it)  # LOOKUP_TABLE
            target[parts[1]] = np.array([float(next(it)) for _ in range(n)])
    return dims, points, cell, point


def snapshot_fields(workspace, gamma_full, gamma_physical, state, mat=None):
    """Cell and point fields of one design/state pair."""
    mesh = workspace.mesh
    if mat is None:
        mat = workspace.materials(gamma_physical, final_continuation(workspace.spec))
    u = workspace.asm.velocity(state, mat)
    n = mesh.n_nodes
    cells = {"gamma": gamma_full, "gamma_filtered": gamma_physical,
             "velocity_magnitude": np.linalg.norm(u, axis=1),
             "region": workspace.tags.region.astype(float)}
    points = {"T": state[n:], "P": state[:n]}
    return cells, points


# ----------------------------------------------------------------- CSV


class CsvLog:
    """Append-only convergence log with a single header row."""

    def __init__(self, path, fields=IterationRecord.CSV_FIELDS):
        self.path = os.fspath(path)
        self.fields = tuple(fields)

    def write_row(self, record):
        row = record.row() if hasattr(record, "row") else dict(record)
        missing = set(self.fields) - set(row)
        if missing:
            raise ValueError(f"log record lacks {sorted(missing)}")
        for k in self.fields:
            v = row[k]
            if isinstance(v, float) and math.isnan(v):
                raise ValueError(f"refusing to log NaN in column {k!r} "
                                 f"(iteration {row.get('iteration')})")
        new = not os.path.exists(self.path) or os.path.getsize(self.path) == 0
        with open(self.path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(self.fields)
            w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k]
                        for k in self.fields])

    def read(self):
        with open(self.path, newline="") as fh:
            return list(csv.DictReader(fh))


def write_log_row(record, path):
    CsvLog(path).write_row(record)


# ---------------------------------------------------------- checkpoints


def _record_dict(r):
    return asdict(r) if is_dataclass(r) else dict(r)


def save_checkpoint(path, checkpoint):
    """Binary ``.npz`` checkpoint; arrays are stored bit-exactly."""
    mma = dict(checkpoint["mma"])
    arrays = {f"mma_{k}": np.asarray(mma.pop(k)) for k in ("low", "upp", "x1", "x2")
              if mma.get(k) is not None}
    for k in ("low", "upp", "x1", "x2"):
        mma.pop(k, None)
    meta = {"format_version": CHECKPOINT_VERSION, "iteration": int(checkpoint["iteration"]),
            "mma": mma, "history": [_record_dict(r) for r in checkpoint["history"]]}
    path = os.fspath(path)
    tmp = path + ".tmp.npz"
    np.savez(tmp, gamma=np.asarray(checkpoint["gamma"]), state=np.asarray(checkpoint["state"]),
             meta=np.array(json.dumps(meta)), **arrays)
    os.replace(tmp, path)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint {path} has format version "
                             f"{meta.get('format_version')}, expected {CHECKPOINT_VERSION}")
        mma = dict(meta["mma"])
        for k in ("low", "upp", "x1", "x2"):
            mma[k] = data[f"mma_{k}"].copy() if f"mma_{k}" in data.files else None
        return {"format_version": meta["format_version"], "gamma": data["gamma"].copy(),
                "state": data["state"].copy(), "mma": mma, "iteration": meta["iteration"],
                "history": [IterationRecord(**r) for r in meta["history"]]}


def write_metadata(path, data):
    def default(o):
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(f"cannot serialize {type(o).__name__}")

    _atomic_write(path, lambda fh: json.dump(data, fh, indent=2, default=default))


def read_metadata(path):
    with open(path) as fh:
        return json.load(fh)
