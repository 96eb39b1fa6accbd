"""Voxel phase maps: benchmark generators and the DBFM binary format.

DBFM layout (little endian)::

    b"DBFM" | version u16 | n1 n2 n3 u32 | l1 l2 l3 f64 | phase_count u16 | ids u16[n1*n2*n3]

with the voxel ids written x-fastest.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import GenerationError, ParameterError, PhaseMapFormatError
from .grid import Grid, make_grid

MAGIC = b"DBFM"
VERSION = 1
_HEADER = struct.Struct("<4sH3I3dH")
MAX_ATTEMPTS = 1_000_000


@dataclass(frozen=True)
class PhaseMap:
    grid: Grid
    phase_id: np.ndarray
    phase_count: int

    def __post_init__(self):
        ids = np.asarray(self.phase_id)
        if ids.shape != tuple(self.grid.n):
            raise ParameterError(f"phase map shape {ids.shape} does not match grid {self.grid.n}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.phase_count):
            raise PhaseMapFormatError(
                f"phase id {int(ids.max())} out of range for phase_count={self.phase_count}")

    @property
    def volume_fractions(self) -> np.ndarray:
        counts = np.bincount(np.ravel(self.phase_id), minlength=self.phase_count)
        return counts / counts.sum()


def sphere_inclusion(grid: Grid, vf: float) -> PhaseMap:
    """Centered spherical inclusion (phase 1) of volume fraction ``vf`` in a matrix (phase 0).

    A voxel belongs to the sphere when its center lies inside it.
    """
    if not 0 < vf < np.pi / 6:
        raise ParameterError(f"volume fraction {vf} outside (0, pi/6)")
    volume = float(np.prod(grid.l))
    if max(grid.l) != min(grid.l):
        # the sphere has to fit the shortest edge
        if 4 / 3 * np.pi * (min(grid.l) / 2) ** 3 < vf * volume:
            raise ParameterError(f"volume fraction {vf} does not fit in the domain")
    r = (3 * vf * volume / (4 * np.pi)) ** (1 / 3)
    x = grid.coordinates()
    c = np.asarray(grid.l)[:, None, None, None] / 2
    inside = np.sum((x - c) ** 2, axis=0) <= r * r
    return PhaseMap(grid, inside.astype(np.int64), 2)


def _periodic_dist2(a, b, l):
    d = np.abs(a - b)
    d = np.minimum(d, l - d)
    return np.sum(d * d, axis=-1)


def random_spheres(grid: Grid, count: int, porosity: float, seed: int,
                   max_attempts: int = MAX_ATTEMPTS) -> PhaseMap:
    """Equal, non-overlapping periodic spheres placed by rejection sampling.

    Phase 0 is the matrix, phase 1 the spheres (pores).
    """
    if count < 1:
        raise ParameterError("count must be at least 1")
    if not 0 < porosity < 1:
        raise ParameterError(f"porosity {porosity} outside (0, 1)")
    l = np.asarray(grid.l, dtype=float)
    r = (3 * porosity * float(np.prod(l)) / (4 * np.pi * count)) ** (1 / 3)
    if 2 * r > l.min():
        raise GenerationError(f"sphere diameter {2 * r:.3g} exceeds the cell; use more or smaller spheres")
    rng = np.random.default_rng(seed)
    centers = []
    attempts = 0
    while len(centers) < count:
        if attempts >= max_attempts:
            raise GenerationError(
                f"placed {len(centers)} of {count} spheres in {max_attempts} attempts; "
                "reduce the sphere count or the porosity")
        attempts += 1
        c = rng.uniform(0, l)
        if all(_periodic_dist2(c, o, l) >= (2 * r) ** 2 for o in centers):
            centers.append(c)
    centers = np.array(centers)
    x = np.moveaxis(grid.coordinates(), 0, -1)
    inside = np.zeros(grid.n, dtype=bool)
    for c in centers:
        inside |= _periodic_dist2(x, c, l) <= r * r
    pm = PhaseMap(grid, inside.astype(np.int64), 2)
    object.__setattr__(pm, "centers", centers)
    object.__setattr__(pm, "radius", r)
    return pm


def save_phase_map(pm: PhaseMap, path) -> None:
    ids = np.asarray(pm.phase_id)
    if pm.phase_count > 0xFFFF or (ids.size and ids.max() > 0xFFFF):
        raise PhaseMapFormatError("phase ids do not fit in u16")
    header = _HEADER.pack(MAGIC, VERSION, *pm.grid.n, *pm.grid.l, pm.phase_count)
    payload = ids.astype("<u2").ravel(order="F").tobytes()
    Path(path).write_bytes(header + payload)


def load_phase_map(path) -> PhaseMap:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise PhaseMapFormatError(f"{path}: truncated header")
    magic, version, n1, n2, n3, l1, l2, l3, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise PhaseMapFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise PhaseMapFormatError(f"{path}: unsupported version {version}")
    try:
        grid = make_grid((n1, n2, n3), (l1, l2, l3))
    except Exception as exc:
        raise PhaseMapFormatError(f"{path}: invalid grid in header ({exc})") from None
    payload = raw[_HEADER.size:]
    expected = 2 * grid.size
    if len(payload) != expected:
        raise PhaseMapFormatError(
            f"{path}: size mismatch, header declares {grid.size} voxels "
            f"({expected} bytes) but payload has {len(payload)} bytes")
    ids = np.frombuffer(payload, dtype="<u2").reshape(grid.n, order="F").astype(np.int64)
    if ids.size and ids.max() >= count:
        raise PhaseMapFormatError(f"{path}: voxel phase id {int(ids.max())} >= phase_count {count}")
    return PhaseMap(grid, ids, count)
