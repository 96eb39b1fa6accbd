"""Legacy ASCII VTK field export/import and CSV writers."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, Iterable, Sequence

import numpy as np

from .grid import Grid

FMT = "%.17g"


def _points(a):
    """(comp..., n1, n2, n3) -> (n_points, comp) with x fastest."""
    ncomp = int(np.prod(a.shape[:-3])) if a.ndim > 3 else 1
    return a.reshape(ncomp, -1, order="C").reshape((ncomp,) + a.shape[-3:]).reshape(ncomp, -1, order="F").T


def export_vtk(path, grid: Grid, vectors: Dict[str, np.ndarray] = None, tensors: Dict[str, np.ndarray] = None,
               scalars: Dict[str, np.ndarray] = None, title="dbfft fields"):
    """Write STRUCTURED_POINTS point data; voxel centers are the points."""
    path = Path(path)
    h = grid.voxel_size
    lines = [
        "# vtk DataFile Version 3.0",
        title.replace("\n", " ")[:255],
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        "DIMENSIONS {} {} {}".format(*grid.n),
        "ORIGIN {} {} {}".format(*(FMT % (v / 2) for v in h)),
        "SPACING {} {} {}".format(*(FMT % v for v in h)),
        f"POINT_DATA {grid.size}",
    ]
    for name, a in (scalars or {}).items():
        a = np.asarray(a)
        kind = "int" if np.issubdtype(a.dtype, np.integer) else "double"
        lines += [f"SCALARS {name} {kind} 1", "LOOKUP_TABLE default"]
        lines += [str(v) if kind == "int" else FMT % v for v in np.ravel(a, order="F")]
    for name, a in (vectors or {}).items():
        lines.append(f"VECTORS {name} double")
        lines += [" ".join(FMT % v for v in row) for row in _points(np.asarray(a, float))]
    for name, a in (tensors or {}).items():
        lines.append(f"TENSORS {name} double")
        lines += [" ".join(FMT % v for v in row) for row in _points(np.asarray(a, float))]
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write VTK file {path}: {exc.strerror}") from None


def read_vtk(path):
    """Read a file written by :func:`export_vtk`; returns (dims, {name: array}).

    Arrays come back as (comp..., n1, n2, n3).
    """
    tokens = Path(path).read_text().split("\n")
    dims = None
    npts = None
    fields = {}
    i = 0
    while i < len(tokens):
        line = tokens[i].strip()
        i += 1
        if line.startswith("DIMENSIONS"):
            dims = tuple(int(v) for v in line.split()[1:4])
        elif line.startswith("POINT_DATA"):
            npts = int(line.split()[1])
        elif line.startswith(("SCALARS", "VECTORS", "TENSORS")):
            kind, name = line.split()[:2]
            if kind == "SCALARS":
                i += 1  # lookup table
            width = {"SCALARS": 1, "VECTORS": 3, "TENSORS": 9}[kind]
            rows = np.array([np.array(tokens[i + k].split(), float) for k in range(npts)])
            i += npts
            rows = rows.reshape(npts, width)
            arr = rows.T.reshape((width,) + dims, order="F")
            if kind == "TENSORS":
                arr = arr.reshape((3, 3) + dims)
            elif kind == "SCALARS":
                arr = arr[0]
            fields[name] = arr
    if dims is None or npts is None:
        raise ValueError(f"{path}: not a STRUCTURED_POINTS file")
    return dims, fields


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence], comment: str = ""):
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([FMT % v if isinstance(v, (float, np.floating)) else v for v in row])


def trace_rows(report):
    return [(k, *t.as_tuple()) for k, t in enumerate(report.trace, start=1)]


TRACE_HEADER = ["iteration", "equilibrium", "compatibility", "loading"]
