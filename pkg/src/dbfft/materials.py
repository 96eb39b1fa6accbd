"""Constitutive models.

Every model exposes ``evaluate(strain, state) -> (stress, tangent, new_state)``
on flat voxel batches: ``strain`` has shape ``(3, 3, m)``, the tangent
``(3, 3, 3, 3, m)`` and ``state`` ``(state_size, m)``.  Small-strain models take
the infinitesimal strain and return Cauchy stress; finite-strain models take
the deformation gradient and return the first Piola-Kirchhoff stress together
with ``dP/dF``.
"""
from __future__ import annotations

import numpy as np

from .errors import InvertedElementError, ParameterError

I2 = np.eye(3)
I4 = np.einsum("ik,jl->ijkl", I2, I2)
I4T = np.einsum("il,jk->ijkl", I2, I2)
I4S = 0.5 * (I4 + I4T)
II = np.einsum("ij,kl->ijkl", I2, I2)
I4D = I4S - II / 3.0
YIELD_RTOL = 1e-12


def lame(E, nu):
    """Lame constants (lambda, mu) from Young's modulus and Poisson ratio."""
    if not E > 0:
        raise ParameterError(f"Young's modulus must be positive, got {E}")
    if not -1.0 < nu < 0.5:
        raise ParameterError(f"Poisson ratio must lie in (-1, 0.5), got {nu}")
    lam = E * nu / ((1 + nu) * (1 - 2 * nu))
    mu = E / (2 * (1 + nu))
    return lam, mu


def isotropic_stiffness(E, nu):
    lam, mu = lame(E, nu)
    return lam * II + 2 * mu * I4S


def svk_stress_tangent(F, C):
    """First Piola-Kirchhoff stress and dP/dF of a Saint Venant-Kirchhoff solid.

    ``F`` has shape ``(3, 3, ...)``; ``C`` is a single (3,3,3,3) stiffness.
    """
    F = np.asarray(F, dtype=float)
    det = np.linalg.det(np.moveaxis(F, (0, 1), (-2, -1)))
    bad = np.flatnonzero(np.ravel(det) <= 0)
    if bad.size:
        raise InvertedElementError(
            f"det F <= 0 at {bad.size} voxel(s), first flat index {int(bad[0])}",
            voxel=int(bad[0]),
        )
    Egl = 0.5 * (np.einsum("ki...,kj...->ij...", F, F) - np.expand_dims(I2, tuple(range(2, F.ndim))))
    S = np.tensordot(C, Egl, axes=([2, 3], [0, 1]))
    P = np.einsum("im...,mj...->ij...", F, S)
    K = np.einsum("ik,jl...->ijkl...", I2, S)
    # F_im C_mjnl F_kn
    CF = np.tensordot(C, F, axes=([2], [1]))  # m j l k ...
    K = K + np.einsum("im...,mjlk...->ijkl...", F, CF)
    return P, K


def j2_update(eps, state, E, nu, sigma_y, H):
    """Radial-return J2 plasticity with linear isotropic hardening.

    ``state`` rows 0..8 hold the plastic strain tensor, row 9 the accumulated
    equivalent plastic strain.  Returns stress, algorithmic tangent, new state.
    """
    if not sigma_y > 0:
        raise ParameterError(f"yield stress must be positive, got {sigma_y}")
    lam, G = lame(E, nu)
    Kb = lam + 2.0 * G / 3.0
    eps = np.asarray(eps, dtype=float)
    m = eps.shape[2:]
    ep = state[:9].reshape((3, 3) + m)
    pbar = state[9]

    ee = eps - ep
    tr = ee[0, 0] + ee[1, 1] + ee[2, 2]
    s_tr = 2 * G * (ee - tr / 3.0 * I2.reshape((3, 3) + (1,) * len(m)))
    norm_s = np.sqrt(np.einsum("ij...,ij...->...", s_tr, s_tr))
    q_tr = np.sqrt(1.5) * norm_s
    f = q_tr - (sigma_y + H * pbar)
    # roundoff-level overstress at a committed yield state stays elastic
    plastic = f > YIELD_RTOL * (sigma_y + H * pbar)

    dgam = np.where(plastic, f / (3 * G + H), 0.0)
    safe = np.where(norm_s > 0, norm_s, 1.0)
    n = s_tr / safe
    s = s_tr - 2 * G * np.sqrt(1.5) * dgam * n
    sig = s + Kb * tr * I2.reshape((3, 3) + (1,) * len(m))

    new = np.array(state, copy=True)
    new[:9] = (ep + np.sqrt(1.5) * dgam * n).reshape((9,) + m)
    new[9] = pbar + dgam

    Ce = np.broadcast_to((Kb * II + 2 * G * I4D).reshape((3, 3, 3, 3) + (1,) * len(m)), (3, 3, 3, 3) + m)
    q_safe = np.where(q_tr > 0, q_tr, 1.0)
    a = 2 * G * (1 - dgam * 3 * G / q_safe)
    b = 6 * G**2 * (dgam / q_safe - 1.0 / (3 * G + H))
    Cp = (a * I4D.reshape((3, 3, 3, 3) + (1,) * len(m))
          + b * np.einsum("ij...,kl...->ijkl...", n, n)
          + Kb * II.reshape((3, 3, 3, 3) + (1,) * len(m)))
    tangent = np.where(plastic, Cp, Ce)
    return sig, tangent, new


def average_tangent(K):
    """Voxel average of a per-voxel tensor4 field ``(3,3,3,3,...)``."""
    K = np.asarray(K)
    if K.ndim == 4:
        return K.copy()
    return K.reshape(3, 3, 3, 3, -1).mean(axis=-1)


class LinearElastic:
    kind = "linear_elastic"
    kinematics = "small"
    state_size = 0

    def __init__(self, E, nu=0.3):
        self.E, self.nu = float(E), float(nu)
        self.stiffness = isotropic_stiffness(self.E, self.nu)

    def scaled(self, k):
        return type(self)(self.E * k, self.nu)

    def evaluate(self, strain, state=None):
        sig = np.tensordot(self.stiffness, strain, axes=([2, 3], [0, 1]))
        tangent = np.broadcast_to(self.stiffness.reshape((3, 3, 3, 3) + (1,) * (strain.ndim - 2)),
                                  (3, 3, 3, 3) + strain.shape[2:])
        return sig, tangent, state

    def __repr__(self):
        return f"LinearElastic(E={self.E}, nu={self.nu})"


class SaintVenantKirchhoff(LinearElastic):
    kind = "svk_hyperelastic"
    kinematics = "finite"

    def evaluate(self, F, state=None):
        P, K = svk_stress_tangent(F, self.stiffness)
        return P, K, state

    def __repr__(self):
        return f"SaintVenantKirchhoff(E={self.E}, nu={self.nu})"


class J2Plastic:
    """Small-strain J2 plasticity; defaults are the documented exemplar values."""

    kind = "j2_plastic"
    kinematics = "small"
    state_size = 10

    def __init__(self, E=70.0, nu=0.3, sigma_y=0.1, H=None):
        self.E, self.nu, self.sigma_y = float(E), float(nu), float(sigma_y)
        self.H = self.E / 20.0 if H is None else float(H)
        if not self.sigma_y > 0:
            raise ParameterError(f"yield stress must be positive, got {sigma_y}")
        if self.H < 0:
            raise ParameterError(f"hardening modulus must be >= 0, got {H}")
        self.stiffness = isotropic_stiffness(self.E, self.nu)

    def scaled(self, k):
        return type(self)(self.E * k, self.nu, self.sigma_y * k, self.H * k)

    def evaluate(self, strain, state):
        return j2_update(strain, state, self.E, self.nu, self.sigma_y, self.H)

    def __repr__(self):
        return f"J2Plastic(E={self.E}, nu={self.nu}, sigma_y={self.sigma_y}, H={self.H})"


MODELS = {
    "linear_elastic": LinearElastic,
    "svk_hyperelastic": SaintVenantKirchhoff,
    "j2_plastic": J2Plastic,
}


def make_material(kind, **params):
    try:
        cls = MODELS[kind]
    except KeyError:
        raise ParameterError(f"unknown material kind {kind!r}") from None
    return cls(**params)


class StateField:
    """Committed and trial copies of the per-voxel internal variables."""

    def __init__(self, size, nvox):
        self.committed = np.zeros((size, nvox))
        self.trial = self.committed.copy()

    def commit(self):
        self.committed = self.trial.copy()

    def rollback(self):
        self.trial = self.committed.copy()


class MaterialSet:
    """Phase table bound to a phase map; evaluates every voxel.

    ``phase_id`` is any integer array over the grid.  Internally voxels are
    flattened in C order, matching ``field.reshape(3, 3, -1)``.
    """

    def __init__(self, materials, phase_id):
        self.materials = list(materials)
        self.phase_id = np.asarray(phase_id)
        self.shape = self.phase_id.shape
        ids = self.phase_id.reshape(-1)
        if ids.size and ids.max() >= len(self.materials):
            raise ParameterError(
                f"phase id {int(ids.max())} has no material (table has {len(self.materials)})"
            )
        self.index = [np.flatnonzero(ids == p) for p in range(len(self.materials))]
        kin = {m.kinematics for m, idx in zip(self.materials, self.index) if idx.size}
        if len(kin) > 1:
            raise ParameterError("cannot mix small- and finite-strain materials")
        self.kinematics = kin.pop() if kin else "small"
        self.nvox = ids.size
        self.states = [
            StateField(m.state_size, idx.size) if m.state_size else None
            for m, idx in zip(self.materials, self.index)
        ]

    @property
    def linear(self):
        return all(type(m) is LinearElastic for m in self.materials)

    def phase_stiffness(self):
        return np.stack([m.stiffness for m in self.materials])

    def evaluate(self, strain):
        """Evaluate all voxels from the committed state; fills the trial state."""
        e = strain.reshape(3, 3, -1)
        stress = np.empty_like(e)
        tangent = np.empty((3, 3, 3, 3, e.shape[-1]))
        for m, idx, st in zip(self.materials, self.index, self.states):
            if not idx.size:
                continue
            try:
                s, t, new = m.evaluate(e[:, :, idx], st.committed if st else None)
            except InvertedElementError as exc:
                vox = int(idx[exc.voxel]) if exc.voxel is not None else None
                loc = np.unravel_index(vox, self.shape) if vox is not None else None
                raise InvertedElementError(f"det F <= 0 at voxel {loc}", voxel=loc) from None
            stress[:, :, idx] = s
            tangent[..., idx] = t
            if st is not None:
                st.trial = new
        return stress.reshape(strain.shape), tangent.reshape((3, 3) + strain.shape)

    def commit(self):
        for st in self.states:
            if st is not None:
                st.commit()

    def rollback(self):
        for st in self.states:
            if st is not None:
                st.rollback()

    def snapshot(self):
        return [None if st is None else (st.committed.copy(), st.trial.copy()) for st in self.states]

    def restore(self, snap):
        for st, sn in zip(self.states, snap):
            if st is not None:
                st.committed, st.trial = sn[0].copy(), sn[1].copy()

    def internal_state(self, row):
        """Per-voxel field of one internal variable (zero where absent)."""
        out = np.zeros(self.nvox)
        for st, idx in zip(self.states, self.index):
            if st is not None and st.committed.shape[0] > row:
                out[idx] = st.committed[row]
        return out.reshape(self.shape)
