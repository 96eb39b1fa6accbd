"""Voxel grid, frequency lattice and real <-> spectral transforms.

Fields are stored component-first: a vector field has shape ``(3, n1, n2, n3)``
and a second-order tensor field ``(3, 3, n1, n2, n3)``.  Symmetric tensors keep
all nine entries (tensor components, no engineering factor 2).

The forward transform is unnormalized, the inverse divides by ``n1*n2*n3``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
import scipy.fft as sfft

from .errors import ContractError, ConjugateSymmetryError, InvalidGridError

# number of threads handed to scipy.fft; the CLI overrides this
WORKERS = 1

RANKS = {"vector": 1, "tensor2": 2}


def set_workers(n: int) -> None:
    global WORKERS
    WORKERS = max(1, int(n))


@dataclass(frozen=True)
class Grid:
    """Regular periodic voxel grid with odd voxel counts.

    ``freq[i]`` holds the angular frequencies of axis ``i`` in the native FFT
    output order (zero first).  ``centered_freq(i)`` gives the same list in
    ascending order.
    """

    n: Tuple[int, int, int]
    l: Tuple[float, float, float]
    freq: Tuple[np.ndarray, np.ndarray, np.ndarray] = field(repr=False, compare=False)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.n

    @property
    def size(self) -> int:
        return int(np.prod(self.n))

    @property
    def voxel_size(self) -> np.ndarray:
        return np.asarray(self.l) / np.asarray(self.n)

    def centered_freq(self, axis: int) -> np.ndarray:
        return np.fft.fftshift(self.freq[axis])

    def freq_mesh(self, half: bool = False):
        """Broadcastable frequency components (xi1, xi2, xi3).

        With ``half=True`` the last axis is truncated to the ``rfftn`` layout.
        """
        f3 = self.freq[2][: self.n[2] // 2 + 1] if half else self.freq[2]
        return (
            self.freq[0][:, None, None],
            self.freq[1][None, :, None],
            f3[None, None, :],
        )

    def coordinates(self) -> np.ndarray:
        """Voxel-center coordinates, shape ``(3, n1, n2, n3)``."""
        axes = [(np.arange(n) + 0.5) * h for n, h in zip(self.n, self.voxel_size)]
        return np.stack(np.meshgrid(*axes, indexing="ij"))


def make_grid(n, l=(1.0, 1.0, 1.0)) -> Grid:
    n = tuple(int(v) for v in n)
    l = tuple(float(v) for v in l)
    if len(n) != 3 or len(l) != 3:
        raise InvalidGridError("grid needs exactly three axes")
    for i, ni in enumerate(n):
        if ni < 3 or ni % 2 == 0:
            raise InvalidGridError(f"n[{i}]={ni}: voxel counts must be odd and >= 3")
    for i, li in enumerate(l):
        if not li > 0:
            raise InvalidGridError(f"l[{i}]={li}: lengths must be positive")
    freq = []
    for ni, li in zip(n, l):
        k = np.arange(ni)
        centered = 2.0 * np.pi * (k + 1 - (ni + 1) / 2) / li
        xi = np.fft.ifftshift(centered)
        xi.setflags(write=False)
        freq.append(xi)
    return Grid(n, l, tuple(freq))


@dataclass
class TensorField:
    """Dense per-voxel vector or tensor field in real or spectral domain."""

    grid: Grid
    data: np.ndarray
    rank: str = "vector"
    symmetry: str = "none"
    domain: str = "real"

    def __post_init__(self):
        if self.rank not in RANKS:
            raise ContractError(f"unknown rank {self.rank!r}")
        expected = (3,) * RANKS[self.rank] + tuple(self.grid.n)
        if self.data.shape != expected:
            raise ContractError(f"data shape {self.data.shape} != {expected}")
        if self.domain not in ("real", "spectral"):
            raise ContractError(f"unknown domain {self.domain!r}")

    @property
    def stored_components(self) -> int:
        if self.rank == "vector":
            return 3
        return 6 if self.symmetry == "symmetric" else 9

    @classmethod
    def zeros(cls, grid, rank="vector", domain="real", symmetry="none"):
        dtype = complex if domain == "spectral" else float
        data = np.zeros((3,) * RANKS[rank] + tuple(grid.n), dtype=dtype)
        return cls(grid, data, rank, symmetry, domain)

    def mean(self) -> np.ndarray:
        if self.domain != "real":
            raise ContractError("mean of a spectral field: use the DC entry")
        return self.data.mean(axis=(-3, -2, -1))


def fftn(a: np.ndarray) -> np.ndarray:
    return sfft.fftn(a, axes=(-3, -2, -1), workers=WORKERS)


def ifftn(a: np.ndarray) -> np.ndarray:
    return sfft.ifftn(a, axes=(-3, -2, -1), workers=WORKERS)


def rfftn(a: np.ndarray) -> np.ndarray:
    return sfft.rfftn(a, axes=(-3, -2, -1), workers=WORKERS)


def irfftn(a: np.ndarray, shape) -> np.ndarray:
    return sfft.irfftn(a, s=tuple(shape), axes=(-3, -2, -1), workers=WORKERS)


def forward(f: TensorField) -> TensorField:
    if f.domain != "real":
        raise ContractError("forward expects a real-domain field")
    return TensorField(f.grid, fftn(f.data), f.rank, f.symmetry, "spectral")


def inverse(f: TensorField, rtol: float = 1e-12) -> TensorField:
    """Inverse transform; fails if the imaginary residue exceeds ``rtol``."""
    if f.domain != "spectral":
        raise ContractError("inverse expects a spectral field")
    out = ifftn(f.data)
    scale = np.abs(out).max(initial=0.0)
    residue = np.abs(out.imag).max(initial=0.0)
    if residue > rtol * max(scale, np.finfo(float).tiny):
        raise ConjugateSymmetryError(
            f"imaginary residue {residue:.3e} relative to {scale:.3e}: "
            "spectrum is not conjugate symmetric"
        )
    return TensorField(f.grid, np.ascontiguousarray(out.real), f.rank, f.symmetry, "real")


_UPPER = [(0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1)]


def rfftn_tensor(a: np.ndarray, symmetric: bool = False) -> np.ndarray:
    """Half-spectrum transform of a (3, 3, ...) field; symmetric fields move 6 components."""
    if not symmetric:
        return rfftn(a)
    packed = rfftn(np.stack([a[i, j] for i, j in _UPPER]))
    return _unpack(packed)


def irfftn_tensor(ah: np.ndarray, shape, symmetric: bool = False) -> np.ndarray:
    if not symmetric:
        return irfftn(ah, shape)
    packed = irfftn(np.stack([ah[i, j] for i, j in _UPPER]), shape)
    return _unpack(packed)


def _unpack(packed):
    out = np.empty((3, 3) + packed.shape[1:], dtype=packed.dtype)
    for c, (i, j) in enumerate(_UPPER):
        out[i, j] = packed[c]
        out[j, i] = packed[c]
    return out
