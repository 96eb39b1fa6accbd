"""Matrix-free displacement-based spectral system and its preconditioned CG solver.

Unknowns are the real-space, zero-mean displacement fluctuation ``u`` plus the
coefficients ``c`` of the macroscopic strain (or ``F - I``) components that are
stress controlled.  The operator is written with the sign that makes it
symmetric positive definite on that space::

    A(u, c) = ( -div(K : (D u + E(c))),   B_a : <K : (D u + E(c))> )

with ``D`` the symmetric gradient (small strain) or full gradient (finite
strain), ``E(c) = sum_a c_a B_a`` and ``B_a`` an orthonormal basis of the
stress-controlled components.  The inner product is the voxel mean of ``u . v``
plus ``c . d``; with it ``A`` is self-adjoint whenever ``K`` is major symmetric.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import ContractError, NumericalBreakdownError, ParameterError, PreconditionerError
from .grid import Grid, irfftn, irfftn_tensor, rfftn, rfftn_tensor
from .operators import contract_stiffness, ddot42, div_hat, grad_hat, sym_grad_hat
from .residuals import (GUARD, ResidualTriple, compatibility_residual, l2_norm, loading_residual,
                        residual_triple)

log = logging.getLogger(__name__)

TOL_EQUILIBRIUM = 1e-8
TOL_COMPATIBILITY = 1e-10
TOL_LOADING = 1e-10
MAX_ITER = 10_000
STAGNATION = 1e-14
CONTRAST_FLOOR = 1e-8
RESYNC_EVERY = 100

COMPONENTS6 = [(0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1)]


@dataclass
class LoadSpec:
    """Macroscopic load: per-component strain or stress control.

    ``stress_mask[i, j]`` is True where the stress (Cauchy or first Piola)
    component is prescribed; elsewhere the strain (or deformation gradient)
    component is.  For finite strain ``strain_target`` is the full F target
    (identity on untouched components).
    """

    stress_mask: np.ndarray
    strain_target: np.ndarray
    stress_target: np.ndarray
    finite: bool = False
    increments: int = 1
    time_per_increment: float = 1.0

    def __post_init__(self):
        self.stress_mask = np.asarray(self.stress_mask, dtype=bool).reshape(3, 3)
        self.strain_target = np.asarray(self.strain_target, dtype=float).reshape(3, 3)
        self.stress_target = np.asarray(self.stress_target, dtype=float).reshape(3, 3)
        if int(self.increments) < 1:
            raise ParameterError("increments must be a positive integer")
        self.increments = int(self.increments)
        if not self.finite:
            for name, a in (("stress_mask", self.stress_mask), ("strain_target", self.strain_target),
                            ("stress_target", self.stress_target)):
                if not np.array_equal(a, a.T):
                    raise ParameterError(f"{name} must be symmetric under small strain")
        ref = np.eye(3) if self.finite else np.zeros((3, 3))
        # unused slots are pinned so that averages and targets stay comparable
        self.strain_target = np.where(self.stress_mask, ref, self.strain_target)
        self.stress_target = np.where(self.stress_mask, self.stress_target, 0.0)

    @classmethod
    def strain(cls, target, finite=False, **kw):
        return cls(np.zeros((3, 3), bool), target, np.zeros((3, 3)), finite, **kw)

    @classmethod
    def stress(cls, target, finite=False, **kw):
        ref = np.eye(3) if finite else np.zeros((3, 3))
        return cls(np.ones((3, 3), bool), ref, target, finite, **kw)

    @property
    def strain_mask(self):
        return ~self.stress_mask

    def basis(self):
        """Orthonormal basis tensors (m, 3, 3) of the stress-controlled components."""
        out = []
        if self.finite:
            for i in range(3):
                for j in range(3):
                    if self.stress_mask[i, j]:
                        b = np.zeros((3, 3))
                        b[i, j] = 1.0
                        out.append(b)
        else:
            for i, j in COMPONENTS6:
                if self.stress_mask[i, j]:
                    b = np.zeros((3, 3))
                    if i == j:
                        b[i, i] = 1.0
                    else:
                        b[i, j] = b[j, i] = 1.0 / np.sqrt(2.0)
                    out.append(b)
        return np.array(out).reshape(-1, 3, 3)

    def at_fraction(self, start, t):
        """Targets interpolated between the LoadSpec ``start`` and this one."""
        return LoadSpec(
            self.stress_mask,
            start.strain_target + t * (self.strain_target - start.strain_target),
            start.stress_target + t * (self.stress_target - start.stress_target),
            self.finite, 1, self.time_per_increment,
        )


@dataclass
class SolutionVector:
    """Zero-mean fluctuation field plus stress-controlled macro coefficients."""

    fluctuation: np.ndarray
    macro: np.ndarray
    basis: np.ndarray

    @property
    def macro_extra(self):
        if not len(self.macro):
            return np.zeros((3, 3))
        return np.tensordot(self.macro, self.basis, axes=1)

    def flat(self):
        return np.concatenate([self.fluctuation.ravel(), self.macro])

    @classmethod
    def from_flat(cls, x, shape, basis):
        n = 3 * int(np.prod(shape))
        return cls(x[:n].reshape((3,) + tuple(shape)), x[n:].copy(), basis)


class Stiffness:
    """Stiffness or tangent: a phase table with a phase map, or a per-voxel field."""

    def __init__(self, table=None, phase_id=None, field=None):
        if field is not None:
            self.field = np.asarray(field, dtype=float)
            self.table = self.phase_id = None
        else:
            self.table = np.asarray(table, dtype=float)
            if self.table.ndim == 4:
                self.table = self.table[None]
            self.phase_id = None if phase_id is None else np.asarray(phase_id)
            self.field = None
            if self.phase_id is not None and self.phase_id.max() >= len(self.table):
                raise ContractError(f"phase id {int(self.phase_id.max())} outside stiffness table")

    def contract(self, e):
        if self.field is not None:
            return ddot42(self.field, e)
        if self.phase_id is None:
            return ddot42(self.table[0], e)
        return contract_stiffness(self.table, e, self.phase_id)

    def mean(self):
        if self.field is not None:
            return self.field.reshape(3, 3, 3, 3, -1).mean(axis=-1)
        if self.phase_id is None:
            return self.table[0].copy()
        counts = np.bincount(self.phase_id.ravel(), minlength=len(self.table))
        return np.tensordot(counts / counts.sum(), self.table, axes=1)


def as_stiffness(C, phase_id=None):
    if isinstance(C, Stiffness):
        return C
    C = np.asarray(C, dtype=float)
    if phase_id is not None:
        return Stiffness(table=C, phase_id=phase_id)
    if C.ndim == 4:
        return Stiffness(table=C)
    return Stiffness(field=C)


class LinearizedSystem:
    """Operator, right-hand side and field bookkeeping for one linear solve.

    ``strain0``/``stress0`` are the strain measure and stress at ``x = 0``: the
    applied macroscopic strain and its stress in the linear case, the current
    Newton iterate otherwise.  The fields at ``x`` are
    ``strain0 + D u + E(c)`` and ``stress0 + K : (D u + E(c))``.
    """

    def __init__(self, grid: Grid, stiffness: Stiffness, load: LoadSpec, strain0, stress0):
        self.grid = grid
        self.K = stiffness
        self.load = load
        self.finite = load.finite
        self.basis = load.basis()
        self.m = len(self.basis)
        self.xi = grid.freq_mesh(half=True)
        self.shape = grid.n
        self.N = grid.size
        self.nu = 3 * self.N
        self.strain0 = np.broadcast_to(np.asarray(strain0, dtype=float)[..., None, None, None]
                                       if np.ndim(strain0) == 2 else strain0, (3, 3) + self.shape)
        self.stress0 = np.broadcast_to(np.asarray(stress0, dtype=float)[..., None, None, None]
                                       if np.ndim(stress0) == 2 else stress0, (3, 3) + self.shape)
        self._grad = grad_hat if self.finite else sym_grad_hat
        self.sym = not self.finite
        # magnitudes the residual guards compare vanishing denominators against
        ref = np.eye(3) if self.finite else np.zeros((3, 3))
        self.stress_scale = max(float(np.abs(self.stress0).max()), float(np.abs(load.stress_target).max()))
        self.strain_scale = max(float(np.abs(self.strain0 - ref[..., None, None, None]).max()),
                                float(np.abs(load.strain_target - ref).max()))

    # -- vector algebra -------------------------------------------------
    def dot(self, x, y):
        nu = self.nu
        return float(x[:nu] @ y[:nu]) / self.N + float(x[nu:] @ y[nu:])

    def split(self, x):
        u = x[: self.nu].reshape((3,) + self.shape)
        c = x[self.nu:]
        return u, c

    def join(self, u, c):
        return np.concatenate([u.ravel(), np.asarray(c, dtype=float).ravel()])

    def macro_tensor(self, c):
        if not self.m:
            return np.zeros((3, 3))
        return np.tensordot(c, self.basis, axes=1)

    # -- operator ----------------------------------------------------------
    def strain_of(self, x, precise=False):
        """Linear strain-measure increment D u + E(c).

        ``precise`` transforms in extended precision before rounding back to
        double, which keeps the incompatibility of the result at the level of
        the final rounding.
        """
        u, c = self.split(x)
        if precise:
            u = u.astype(np.longdouble)
        e = irfftn_tensor(self._grad(rfftn(u), self.xi), self.shape, self.sym).astype(float)
        if self.m:
            e += self.macro_tensor(c)[..., None, None, None]
        return e

    def image(self, sigma):
        """Map a stress field to the operator image (fluctuation rows, macro rows)."""
        d = -irfftn(div_hat(rfftn_tensor(sigma, self.sym), self.xi), self.shape)
        d -= d.mean(axis=(1, 2, 3), keepdims=True)
        mean = sigma.mean(axis=(2, 3, 4))
        c = np.einsum("aij,ij->a", self.basis, mean) if self.m else np.zeros(0)
        return self.join(d, c)

    def apply(self, x, return_fields=False):
        e = self.strain_of(x)
        s = self.K.contract(e)
        y = self.image(s)
        if return_fields:
            return y, e, s
        return y

    def rhs(self):
        """Right-hand side: div(stress0) rows and [target - <stress0>]_IJ rows."""
        b = -self.image(self.stress0)
        if self.m:
            mean = self.stress0.mean(axis=(2, 3, 4))
            b[self.nu:] = np.einsum("aij,ij->a", self.basis, self.load.stress_target - mean)
        return b

    def zero(self):
        return np.zeros(self.nu + self.m)

    def residuals(self, strain, stress, precise=True) -> ResidualTriple:
        return residual_triple(stress, strain, stress.mean(axis=(2, 3, 4)),
                               strain.mean(axis=(2, 3, 4)), self.load, self.grid,
                               self.stress_scale, self.strain_scale, precise)

    def residuals_from(self, r, strain, stress) -> ResidualTriple:
        """Residual triple reusing the CG residual, whose fluctuation block is div(stress)."""
        mean_s = stress.mean(axis=(2, 3, 4))
        num = l2_norm(r[: self.nu].reshape((3,) + self.shape))
        den = float(np.linalg.norm(mean_s))
        flags = []
        if den < GUARD * self.stress_scale or den == 0.0:
            eq = num
            flags.append("equilibrium")
        else:
            eq = num / den
        co, a2 = compatibility_residual(strain, self.grid, finite=self.finite, return_mode=True,
                                        scale=self.strain_scale, precise=False)
        lo, a3 = loading_residual(strain.mean(axis=(2, 3, 4)), mean_s, self.load, return_mode=True)
        if a2:
            flags.append("compatibility")
        if a3:
            flags.append("loading")
        return ResidualTriple(eq, co, lo, tuple(flags))


class Preconditioner:
    """Per-frequency inverse acoustic tensors plus the macro-block inverse."""

    def __init__(self, grid: Grid, M_hat, macro_inv, xi_zero):
        self.grid = grid
        self.M_hat = M_hat
        self.macro_inv = macro_inv
        self.xi_zero = xi_zero

    def matrix_at(self, index):
        return self.M_hat[(slice(None), slice(None)) + tuple(index)]

    def apply_system(self, system: LinearizedSystem, r):
        u, c = system.split(r)
        uh = rfftn(u)
        zh = np.einsum("ik...,k...->i...", self.M_hat, uh)
        z = irfftn(zh, system.shape)
        z -= z.mean(axis=(1, 2, 3), keepdims=True)
        zc = self.macro_inv @ c if system.m else np.zeros(0)
        return system.join(z, zc)


def acoustic_tensor(Cbar, xi):
    """Q_ik(xi) = xi_j C_ijkl xi_l, shape (3, 3, ...)."""
    out = 0.0
    for j in range(3):
        for l in range(3):
            out = out + np.multiply.outer(Cbar[:, j, :, l], xi[j] * xi[l])
    return out


def build_preconditioner(Cbar, grid: Grid, load: Optional[LoadSpec] = None, half=True):
    """Inverse acoustic tensors of the average stiffness at every frequency.

    At the zero frequency the all-ones vector replaces xi; that row is
    projected out under the zero-mean constraint.
    """
    Cbar = np.asarray(Cbar, dtype=float)
    xi = grid.freq_mesh(half=half)
    xi_b = np.broadcast_arrays(*xi)
    Q = acoustic_tensor(Cbar, xi_b)
    zero = (xi_b[0] == 0) & (xi_b[1] == 0) & (xi_b[2] == 0)
    ones = np.ones(3)
    Q[:, :, zero] = np.einsum("j,ijkl,l->ik", ones, Cbar, ones)[..., None]
    Qm = np.moveaxis(Q, (0, 1), (-2, -1))
    det = np.linalg.det(Qm)
    scale = np.abs(Qm).max(axis=(-2, -1)) ** 3
    if np.any(~np.isfinite(det)) or np.any(np.abs(det) <= 1e-13 * scale):
        raise PreconditionerError("singular acoustic tensor: average stiffness is degenerate")
    M = np.moveaxis(np.linalg.inv(Qm), (-2, -1), (0, 1))
    macro_inv = np.zeros((0, 0))
    if load is not None and load.stress_mask.any():
        B = load.basis()
        G = np.einsum("aij,ijkl,bkl->ab", B, Cbar, B)
        try:
            macro_inv = np.linalg.inv(G)
        except np.linalg.LinAlgError:
            raise PreconditionerError("singular macro block of the average stiffness") from None
    return Preconditioner(grid, np.ascontiguousarray(M), macro_inv, zero)


class IdentityPreconditioner:
    def apply_system(self, system, r):
        return r.copy()


@dataclass
class SolveReport:
    iterations: int = 0
    converged: bool = False
    status: str = ""
    trace: List[ResidualTriple] = field(default_factory=list)
    initial: Optional[ResidualTriple] = None
    final: Optional[ResidualTriple] = None
    wall_time: float = 0.0
    symmetry_gap: Optional[float] = None

    def summary(self):
        f = self.final.as_tuple() if self.final else (np.nan,) * 3
        return (f"{self.status}: {self.iterations} it, eq={f[0]:.2e} "
                f"comp={f[1]:.2e} load={f[2]:.2e}")


def pcg_solve(system: LinearizedSystem, M=None, b=None, tol=(TOL_EQUILIBRIUM, TOL_COMPATIBILITY, TOL_LOADING),
              max_iter=MAX_ITER, x0=None, callback=None):
    """Preconditioned conjugate gradient driven by the three field residuals.

    Every iteration tracks the strain and stress fields of the iterate and
    evaluates the equilibrium, compatibility and loading residuals on them.
    Iteration stops once all three meet ``tol``, when the algebraic residual
    has stagnated below ``1e-14 ||b||``, or after ``max_iter`` iterations (a
    non-converged report, not an exception).
    """
    t0 = time.perf_counter()
    M = IdentityPreconditioner() if M is None else M
    b = system.rhs() if b is None else b
    report = SolveReport()
    x = system.zero() if x0 is None else np.array(x0, dtype=float)

    if x0 is None:
        strain = np.array(system.strain0)
        stress = np.array(system.stress0)
        r = b.copy()
    else:
        ax, e, s = system.apply(x, return_fields=True)
        strain = system.strain0 + e
        stress = system.stress0 + s
        r = b - ax
    bnorm = np.sqrt(system.dot(b, b))
    if not np.isfinite(bnorm):
        raise NumericalBreakdownError("non-finite right-hand side")

    res = system.residuals(strain, stress)
    report.initial = report.final = res
    if res.satisfied(*tol):
        report.converged, report.status = True, "converged"
        report.wall_time = time.perf_counter() - t0
        return x, report

    z = M.apply_system(system, r)
    p = z.copy()
    rz = system.dot(r, z)
    for it in range(1, max_iter + 1):
        q, e_p, s_p = system.apply(p, return_fields=True)
        pq = system.dot(p, q)
        if not np.isfinite(pq) or not np.isfinite(rz):
            raise NumericalBreakdownError(f"non-finite value in CG at iteration {it}")
        if pq <= 0:
            raise NumericalBreakdownError(
                f"operator not positive definite along the search direction (p.Ap={pq:.3e})")
        alpha = rz / pq
        x += alpha * p
        r -= alpha * q
        strain += alpha * e_p
        stress += alpha * s_p
        if not np.all(np.isfinite(x)):
            raise NumericalBreakdownError(f"NaN in iterate at iteration {it}")

        res = system.residuals_from(r, strain, stress)
        eq_load_ok = res.equilibrium <= tol[0] and res.loading <= tol[2]
        if it % RESYNC_EVERY == 0 or eq_load_ok:
            # recurrences accumulate transform roundoff: rebuild fields and residual from x;
            # the candidate for convergence is rebuilt and checked in extended precision
            e = system.strain_of(x, precise=eq_load_ok)
            s = system.K.contract(e)
            strain = system.strain0 + e
            stress = system.stress0 + s
            r = b - system.image(s)
            if eq_load_ok:
                res = system.residuals(strain, stress)
        report.trace.append(res)
        report.iterations, report.final = it, res
        if callback is not None:
            callback(it, x, res)
        if res.satisfied(*tol):
            report.converged, report.status = True, "converged"
            break
        rnorm = np.sqrt(system.dot(r, r))
        if rnorm <= STAGNATION * bnorm:
            report.status = "stagnated"
            break
        z = M.apply_system(system, r)
        rz_new = system.dot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    else:
        report.status = "max_iter"
    report.wall_time = time.perf_counter() - t0
    log.debug("pcg: %s", report.summary())
    return x, report


# -- public single-operation API --------------------------------------------

def _zero_load(finite=False):
    return LoadSpec.strain(np.eye(3) if finite else np.zeros((3, 3)), finite=finite)


def apply_operator(u: SolutionVector, C, grid: Grid, load: Optional[LoadSpec] = None, phase_id=None):
    """Operator image of ``u``; returns a SolutionVector of the same layout."""
    load = load or _zero_load()
    if u.fluctuation.shape != (3,) + tuple(grid.n):
        raise ContractError("solution does not match the grid")
    system = LinearizedSystem(grid, as_stiffness(C, phase_id), load,
                              np.zeros((3, 3)), np.zeros((3, 3)))
    y = system.apply(u.flat())
    return SolutionVector.from_flat(y, grid.n, system.basis)


def build_rhs(load: LoadSpec, C, grid: Grid, phase_id=None):
    K = as_stiffness(C, phase_id)
    system = _system_for_load(grid, K, load)
    return SolutionVector.from_flat(system.rhs(), grid.n, system.basis)


def _system_for_load(grid, K, load):
    eps_u = np.where(load.stress_mask, 0.0, load.strain_target)
    if load.finite:
        eps_u = eps_u - np.where(load.stress_mask, 0.0, np.eye(3))
    e0 = np.broadcast_to(eps_u[..., None, None, None], (3, 3) + tuple(grid.n))
    s0 = K.contract(np.ascontiguousarray(e0))
    if load.finite:
        e0 = e0 + np.eye(3)[..., None, None, None]
    return LinearizedSystem(grid, K, load, e0, s0)


@dataclass
class SmallStrainResult:
    displacement: np.ndarray      # fluctuation field u~
    strain: np.ndarray
    stress: np.ndarray
    mean_strain: np.ndarray
    mean_stress: np.ndarray
    macro_strain: np.ndarray      # eps_U + eps_f
    report: SolveReport
    solution: SolutionVector


def floor_contrast(table, floor=CONTRAST_FLOOR):
    """Raise phase stiffnesses below ``floor`` times the stiffest phase."""
    table = np.array(table, dtype=float)
    norms = np.array([np.linalg.norm(t) for t in table])
    lo = floor * norms.max()
    for p, n in enumerate(norms):
        if n < lo:
            log.warning("phase %d stiffness raised to the contrast floor %.1e", p, floor)
            table[p] *= lo / n
    return table


def solve_small_strain(load: LoadSpec, phase_id, materials, precondition=True,
                       tol=(TOL_EQUILIBRIUM, TOL_COMPATIBILITY, TOL_LOADING),
                       max_iter=MAX_ITER, grid: Optional[Grid] = None, callback=None):
    """Linear-elastic small-strain homogenization under strain/stress/mixed control.

    ``phase_id`` is an integer array (or a PhaseMap); ``materials`` holds one
    linear model per phase (anything with a ``stiffness`` attribute).
    """
    if load.finite:
        raise ContractError("solve_small_strain needs a small-strain LoadSpec")
    if hasattr(phase_id, "phase_id"):
        grid = grid or phase_id.grid
        phase_id = phase_id.phase_id
    if grid is None:
        raise ContractError("grid is required when phase_id is a plain array")
    for m in materials:
        if getattr(m, "kinematics", "small") != "small" or getattr(m, "state_size", 0):
            raise ContractError(f"solve_small_strain requires linear elastic phases, got {m!r}")
    table = floor_contrast([m.stiffness for m in materials])
    K = Stiffness(table=table, phase_id=phase_id)
    system = _system_for_load(grid, K, load)
    M = build_preconditioner(K.mean(), grid, load) if precondition else None
    x, report = pcg_solve(system, M, tol=tol, max_iter=max_iter, callback=callback)
    sol = SolutionVector.from_flat(x, grid.n, system.basis)
    e = system.strain0 + system.strain_of(x, precise=True)
    s = K.contract(e)
    report.final = system.residuals(e, s)
    macro = np.where(load.stress_mask, 0.0, load.strain_target) + sol.macro_extra
    return SmallStrainResult(sol.fluctuation, e, s, e.mean(axis=(2, 3, 4)), s.mean(axis=(2, 3, 4)),
                             macro, report, sol)
