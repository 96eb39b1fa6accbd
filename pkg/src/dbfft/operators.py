"""Spectral differential operators and the voxelwise stiffness contraction.

The kernels (``*_hat`` functions) act on raw complex arrays and a tuple of
broadcastable frequency components, so they work both on the full spectrum
and on the ``rfftn`` half spectrum.  The operator tensors themselves are never
stored; they are applied on the fly from the grid frequencies.
"""
from __future__ import annotations

import numpy as np

from .errors import ContractError
from .grid import TensorField

# Levi-Civita index triples with sign
_LEVI = [
    (0, 1, 2, 1.0), (1, 2, 0, 1.0), (2, 0, 1, 1.0),
    (0, 2, 1, -1.0), (2, 1, 0, -1.0), (1, 0, 2, -1.0),
]


def _ctype(a):
    # complex128, or the extended complex type for long double input
    return np.result_type(a.dtype, np.complex128)


def sym_grad_hat(u, xi):
    """eps_ij = 1/2 i (xi_j u_i + xi_i u_j)."""
    shape = (3, 3) + np.broadcast_shapes(u.shape[1:], *(x.shape for x in xi))
    out = np.empty(shape, dtype=_ctype(u))
    for i in range(3):
        out[i, i] = 1j * xi[i] * u[i]
        for j in range(i + 1, 3):
            out[i, j] = 0.5j * (xi[j] * u[i] + xi[i] * u[j])
            out[j, i] = out[i, j]
    return out


def grad_hat(u, xi):
    """G_ij = i xi_j u_i."""
    shape = (3, 3) + np.broadcast_shapes(u.shape[1:], *(x.shape for x in xi))
    out = np.empty(shape, dtype=_ctype(u))
    for i in range(3):
        for j in range(3):
            out[i, j] = 1j * xi[j] * u[i]
    return out


def div_hat(s, xi):
    """d_i = i sum_j s_ij xi_j."""
    shape = (3,) + np.broadcast_shapes(s.shape[2:], *(x.shape for x in xi))
    out = np.empty(shape, dtype=_ctype(s))
    for i in range(3):
        out[i] = 1j * (s[i, 0] * xi[0] + s[i, 1] * xi[1] + s[i, 2] * xi[2])
    return out


def curl_hat(a, xi):
    """(curl A)_ij = i eps_jkl xi_k A_il, i.e. the curl of every row."""
    shape = (3, 3) + np.broadcast_shapes(a.shape[2:], *(x.shape for x in xi))
    out = np.zeros(shape, dtype=_ctype(a))
    for j, k, l, sgn in _LEVI:
        for i in range(3):
            out[i, j] += (sgn * 1j) * xi[k] * a[i, l]
    return out


def incompatibility_hat(e, xi):
    """Double curl ``curl(curl(e)^T)``; vanishes on symmetric gradients."""
    return curl_hat(np.swapaxes(curl_hat(e, xi), 0, 1), xi)


def _check(f: TensorField, rank: str):
    if f.domain != "spectral":
        raise ContractError("spectral operators expect a spectral field")
    if f.rank != rank:
        raise ContractError(f"expected a {rank} field, got {f.rank}")


def sym_grad(u: TensorField) -> TensorField:
    _check(u, "vector")
    out = sym_grad_hat(u.data, u.grid.freq_mesh())
    return TensorField(u.grid, out, "tensor2", "symmetric", "spectral")


def grad(u: TensorField) -> TensorField:
    _check(u, "vector")
    return TensorField(u.grid, grad_hat(u.data, u.grid.freq_mesh()), "tensor2", "none", "spectral")


def div(s: TensorField) -> TensorField:
    _check(s, "tensor2")
    return TensorField(s.grid, div_hat(s.data, s.grid.freq_mesh()), "vector", "none", "spectral")


def curl(a: TensorField) -> TensorField:
    _check(a, "tensor2")
    return TensorField(a.grid, curl_hat(a.data, a.grid.freq_mesh()), "tensor2", "none", "spectral")


def incompatibility(e: TensorField) -> TensorField:
    _check(e, "tensor2")
    out = incompatibility_hat(e.data, e.grid.freq_mesh())
    return TensorField(e.grid, out, "tensor2", "symmetric", "spectral")


def ddot42(C, e):
    """Voxelwise C_ijkl e_kl for a single (3,3,3,3) tensor or a per-voxel field."""
    C = np.asarray(C)
    if C.ndim == 4:
        return np.tensordot(C, e, axes=([2, 3], [0, 1]))
    return np.einsum("ijkl...,kl...->ij...", C, e, optimize=True)


def contract_stiffness(C, eps, phase_id=None):
    """Voxelwise stress ``C(x) : eps(x)``.

    ``C`` is a per-voxel tensor4 array ``(3,3,3,3,n1,n2,n3)``, a single tensor4,
    or -- when ``phase_id`` is given -- a phase table ``(nphase,3,3,3,3)``.
    Accepts and returns either raw arrays or real-domain TensorFields.
    """
    wrap = isinstance(eps, TensorField)
    if wrap:
        if eps.domain != "real" or eps.rank != "tensor2":
            raise ContractError("contract_stiffness expects a real tensor2 field")
        e = eps.data
    else:
        e = np.asarray(eps)
    C = np.asarray(C)
    if phase_id is None:
        out = ddot42(C, e)
    else:
        phase_id = np.asarray(phase_id)
        if phase_id.size and (phase_id.min() < 0 or phase_id.max() >= C.shape[0]):
            raise ContractError(
                f"phase id {int(phase_id.max())} outside stiffness table of {C.shape[0]} entries"
            )
        out = np.empty_like(e, dtype=float)
        flat_e = e.reshape(3, 3, -1)
        flat_o = out.reshape(3, 3, -1)
        ids = phase_id.reshape(-1)
        for p in range(C.shape[0]):
            idx = np.flatnonzero(ids == p)
            if idx.size:
                flat_o[:, :, idx] = np.tensordot(C[p], flat_e[:, :, idx], axes=([2, 3], [0, 1]))
    if wrap:
        return TensorField(eps.grid, out, "tensor2", eps.symmetry, "real")
    return out
