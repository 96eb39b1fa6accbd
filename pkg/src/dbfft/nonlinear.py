"""Incremental Newton driver for nonlinear (finite-strain or path-dependent) RVEs.

The iterate is the zero-mean fluctuation ``u`` plus the full macroscopic
tensor ``Fbar`` (deformation gradient, or small strain).  Strain-controlled
components of ``Fbar`` are imposed at the start of each increment, the
stress-controlled ones are unknowns solved together with ``u``.  Every Newton
step solves the tangent system with :func:`pcg_solve`.
"""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import ContractError, ConvergenceError, DBFFTError
from .grid import Grid, irfftn, irfftn_tensor, rfftn
from .linear_solver import (MAX_ITER, TOL_COMPATIBILITY, TOL_EQUILIBRIUM, TOL_LOADING, LinearizedSystem,
                            LoadSpec, SolveReport, Stiffness, build_preconditioner, pcg_solve)
from .materials import MaterialSet, average_tangent
from .operators import grad_hat, sym_grad_hat
from .residuals import ResidualTriple, residual_triple

log = logging.getLogger(__name__)

NEWTON_TOL = 1e-6
MAX_NEWTON = 25
DIVERGENCE_FACTOR = 10.0
SYMMETRY_WARN = 1e-8


class _Diverging(DBFFTError):
    pass


@dataclass
class IncrementState:
    """Accepted (or in-progress) solution: fluctuation, macro tensor, fields."""

    grid: Grid
    finite: bool
    u: np.ndarray
    macro: np.ndarray
    k: int = 0
    strain: Optional[np.ndarray] = None
    stress: Optional[np.ndarray] = None

    @classmethod
    def initial(cls, grid: Grid, finite: bool):
        macro = np.eye(3) if finite else np.zeros((3, 3))
        st = cls(grid, finite, np.zeros((3,) + grid.n), macro)
        st.strain = np.broadcast_to(macro[..., None, None, None], (3, 3) + grid.n).copy()
        st.stress = np.zeros((3, 3) + grid.n)
        return st

    def copy(self):
        return copy.deepcopy(self)

    @property
    def mean_strain(self):
        return self.strain.mean(axis=(2, 3, 4))

    @property
    def mean_stress(self):
        return self.stress.mean(axis=(2, 3, 4))

    def strain_field(self, u=None, macro=None):
        u = self.u if u is None else u
        macro = self.macro if macro is None else macro
        xi = self.grid.freq_mesh(half=True)
        if self.finite:
            g = irfftn(grad_hat(rfftn(u), xi), self.grid.n)
        else:
            g = irfftn_tensor(sym_grad_hat(rfftn(u), xi), self.grid.n, True)
        return g + macro[..., None, None, None]


@dataclass
class NewtonOptions:
    newton_tol: float = NEWTON_TOL
    max_newton: int = MAX_NEWTON
    cg_tol: tuple = (TOL_EQUILIBRIUM, TOL_COMPATIBILITY, TOL_LOADING)
    max_iter: int = MAX_ITER
    precondition: bool = True
    refresh_every: int = 0          # rebuild the preconditioner every n Newton steps (0: once per increment)
    bisect: bool = True
    symmetry_check: bool = True


@dataclass
class IncrementReport:
    k: int
    converged: bool = False
    newton_iterations: int = 0
    cg_iterations: List[int] = field(default_factory=list)
    update_norms: List[float] = field(default_factory=list)
    solves: List[SolveReport] = field(default_factory=list)
    residuals: Optional[ResidualTriple] = None
    symmetry_gap: float = 0.0
    bisected: bool = False
    wall_time: float = 0.0
    message: str = ""

    @property
    def total_cg(self):
        return int(sum(self.cg_iterations))


@dataclass
class HistoryRow:
    k: int
    mean_stress: np.ndarray
    mean_strain: np.ndarray
    report: IncrementReport
    state: Optional[IncrementState] = None


@dataclass
class LoadPathResult:
    history: List[HistoryRow]
    completed: bool
    state: IncrementState
    failure: Optional[str] = None


def _symmetry_gap(system, seed=0):
    rng = np.random.default_rng(seed)
    x, y = (rng.standard_normal(system.nu + system.m) for _ in range(2))
    for v in (x, y):
        u, _ = system.split(v)
        u -= u.mean(axis=(1, 2, 3), keepdims=True)
    ax, ay = system.apply(x), system.apply(y)
    lhs, rhs = system.dot(ax, y), system.dot(x, ay)
    scale = np.sqrt(system.dot(ax, ax) * system.dot(y, y))
    return abs(lhs - rhs) / scale if scale else 0.0


def newton_step(state: IncrementState, materials: MaterialSet, load: LoadSpec, M=None,
                options: Optional[NewtonOptions] = None):
    """One linearized solve at the current iterate.

    Returns ``(du, dmacro, report, system)`` where ``du`` is the fluctuation
    update and ``dmacro`` the update of the stress-controlled macro components.
    """
    opt = options or NewtonOptions()
    F = state.strain_field()
    P, K = materials.evaluate(F)
    system = LinearizedSystem(state.grid, Stiffness(field=K), load, F, P)
    if M is None and opt.precondition:
        M = build_preconditioner(average_tangent(K), state.grid, load)
    dx, report = pcg_solve(system, M, tol=opt.cg_tol, max_iter=opt.max_iter)
    if opt.symmetry_check:
        report.symmetry_gap = _symmetry_gap(system)
        if report.symmetry_gap > SYMMETRY_WARN:
            log.warning("tangent operator asymmetry %.2e; CG retained", report.symmetry_gap)
    du, c = system.split(dx)
    return du.copy(), system.macro_tensor(c), report, system


def _increment_load(state: IncrementState, load: LoadSpec):
    macro = np.where(load.stress_mask, state.macro, load.strain_target)
    return macro


def run_increment(state: IncrementState, materials: MaterialSet, load: LoadSpec,
                  newton_tol=NEWTON_TOL, max_newton=MAX_NEWTON, options: Optional[NewtonOptions] = None):
    """Newton iterations for one increment; returns ``(new_state, report)``.

    On success the material state is committed.  On failure the material trial
    state is rolled back and :class:`ConvergenceError` is raised with the report.
    """
    opt = copy.copy(options) if options else NewtonOptions()
    opt.newton_tol, opt.max_newton = newton_tol, max_newton
    t0 = time.perf_counter()
    it_state = state.copy()
    it_state.k = state.k + 1
    it_state.macro = _increment_load(state, load)
    report = IncrementReport(k=it_state.k)
    M = None
    try:
        for i in range(1, opt.max_newton + 1):
            if opt.precondition and (M is None or (opt.refresh_every and (i - 1) % opt.refresh_every == 0)):
                _, K = materials.evaluate(it_state.strain_field())
                M = build_preconditioner(average_tangent(K), state.grid, load)
            du, dmacro, rep, system = newton_step(it_state, materials, load, M, opt)
            report.solves.append(rep)
            report.cg_iterations.append(rep.iterations)
            report.symmetry_gap = max(report.symmetry_gap, rep.symmetry_gap or 0.0)
            if rep.status == "stagnated":
                # the algebraic residual hit roundoff: the direction is as exact as it can be
                log.info("increment %d newton %d: inner CG stagnated (%s)", it_state.k, i, rep.summary())
            elif not rep.converged:
                raise ConvergenceError(
                    f"increment {it_state.k}: inner CG {rep.status} at Newton iteration {i} "
                    f"({rep.summary()})", report)
            it_state.u += du
            it_state.macro = it_state.macro + dmacro
            dF = system.strain_of(system.join(du, np.zeros(system.m)))
            norm = float(np.abs(dF + dmacro[..., None, None, None]).max())
            report.update_norms.append(norm)
            report.newton_iterations = i
            log.info("increment %d newton %d: |dF|max=%.3e cg=%d", it_state.k, i, norm, rep.iterations)
            if norm < opt.newton_tol:
                break
            prev = report.update_norms[-2] if len(report.update_norms) > 1 else None
            if opt.bisect and prev is not None and prev > 0 and norm > DIVERGENCE_FACTOR * prev:
                raise _Diverging(f"increment {it_state.k}: Newton update grew from {prev:.2e} to {norm:.2e}")
        else:
            raise ConvergenceError(
                f"increment {it_state.k}: Newton did not converge in {opt.max_newton} iterations "
                f"(last update {report.update_norms[-1]:.2e})", report)
    except DBFFTError:
        materials.rollback()
        report.wall_time = time.perf_counter() - t0
        raise

    F = it_state.strain_field()
    P, _ = materials.evaluate(F)
    materials.commit()
    it_state.strain, it_state.stress = F, P
    report.residuals = residual_triple(P, F, P.mean(axis=(2, 3, 4)), F.mean(axis=(2, 3, 4)), load, state.grid,
                                       system.stress_scale, system.strain_scale)
    report.converged = True
    report.wall_time = time.perf_counter() - t0
    return it_state, report


def _start_spec(state: IncrementState, mask, finite):
    strain = state.macro
    stress = state.mean_stress
    if not finite:
        strain = 0.5 * (strain + strain.T)
        stress = 0.5 * (stress + stress.T)
    return LoadSpec(mask, strain, stress, finite)


def _advance(state, materials, start, seg, t0, t1, options, depth):
    load = seg.at_fraction(start, t1)
    snap = materials.snapshot()
    try:
        return [run_increment(state, materials, load, options.newton_tol, options.max_newton, options)]
    except _Diverging as exc:
        materials.restore(snap)
        if depth >= 1:
            raise ConvergenceError(str(exc) + " (after bisection)") from None
        log.warning("%s; bisecting the increment", exc)
        tm = 0.5 * (t0 + t1)
        first = _advance(state, materials, start, seg, t0, tm, options, depth + 1)
        second = _advance(first[-1][0], materials, start, seg, tm, t1, options, depth + 1)
        for _, rep in second:
            rep.k = state.k + 1
            rep.bisected = True
        merged = first[-1][1]
        second[-1][1].newton_iterations += merged.newton_iterations
        second[-1][1].cg_iterations = merged.cg_iterations + second[-1][1].cg_iterations
        second[-1][0].k = state.k + 1
        return [second[-1]]


def run_load_path(loads, phase_id, materials, grid: Optional[Grid] = None,
                  options: Optional[NewtonOptions] = None, keep_fields=False, callback=None,
                  state: Optional[IncrementState] = None) -> LoadPathResult:
    """Run one or more load segments, each split into ``load.increments`` steps.

    ``loads`` is a LoadSpec or a sequence of them (e.g. loading then
    unloading); each segment starts from the state reached by the previous
    one.  The first failing increment stops the path and the partial history
    is returned.
    """
    segments = [loads] if isinstance(loads, LoadSpec) else list(loads)
    if not segments:
        raise ContractError("empty load path")
    finite = segments[0].finite
    if any(s.finite != finite for s in segments):
        raise ContractError("all load segments must share the kinematics")
    if hasattr(phase_id, "phase_id"):
        grid = grid or phase_id.grid
        phase_id = phase_id.phase_id
    if grid is None:
        raise ContractError("grid is required when phase_id is a plain array")
    mats = materials if isinstance(materials, MaterialSet) else MaterialSet(materials, phase_id)
    if (mats.kinematics == "finite") != finite:
        raise ContractError(f"{mats.kinematics}-strain materials with a "
                            f"{'finite' if finite else 'small'}-strain load")
    opt = options or NewtonOptions()
    state = state or IncrementState.initial(grid, finite)
    history: List[HistoryRow] = []
    for seg in segments:
        start = _start_spec(state, seg.stress_mask, finite)
        n = seg.increments
        for j in range(1, n + 1):
            try:
                ((state, rep),) = _advance(state, mats, start, seg, (j - 1) / n, j / n, opt, 0)
            except (ConvergenceError, DBFFTError) as exc:
                log.error("load path stopped: %s", exc)
                return LoadPathResult(history, False, state, str(exc))
            row = HistoryRow(state.k, state.mean_stress, state.mean_strain, rep,
                             state.copy() if keep_fields else None)
            history.append(row)
            if callback is not None:
                callback(row)
    return LoadPathResult(history, True, state)
