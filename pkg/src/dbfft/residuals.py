"""Convergence monitors: equilibrium, compatibility and loading residuals.

Field norms are root-mean-square over voxels of the Frobenius norm, so values
do not depend on grid resolution.  When a denominator vanishes (relative to
the field's own magnitude) the unnormalized numerator is reported instead and
the residual is flagged as absolute.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .grid import TensorField, irfftn, irfftn_tensor, rfftn, rfftn_tensor
from .operators import curl_hat, div_hat, incompatibility_hat

GUARD = 1e-14


@dataclass(frozen=True)
class ResidualTriple:
    equilibrium: float
    compatibility: float
    loading: float
    absolute: Tuple[str, ...] = field(default=())

    def as_tuple(self):
        return (self.equilibrium, self.compatibility, self.loading)

    def satisfied(self, tol_eq, tol_comp, tol_load):
        return (self.equilibrium <= tol_eq and self.compatibility <= tol_comp
                and self.loading <= tol_load)


def _data(f):
    return f.data if isinstance(f, TensorField) else np.asarray(f)


def _grid(f, grid):
    if grid is None:
        if not isinstance(f, TensorField):
            raise TypeError("grid is required for raw arrays")
        return f.grid
    return grid


def l2_norm(a) -> float:
    a = _data(a)
    n = int(np.prod(a.shape[-3:]))
    return float(np.sqrt(np.sum(np.abs(a) ** 2) / n))


def _ratio(num, den, scale):
    """(value, absolute_mode) with the denominator guard applied."""
    if den < GUARD * scale or den == 0.0:
        return float(num), True
    return float(num / den), False


def equilibrium_residual(stress, grid=None, return_mode=False, scale=None):
    """||div(stress)||_L2 / ||<stress>||; works for Cauchy or first Piola stress.

    ``scale`` is the stress magnitude the guard compares the denominator
    against (default: the field's largest entry).
    """
    s = _data(stress)
    g = _grid(stress, grid)
    sym = np.array_equal(s, np.swapaxes(s, 0, 1))
    d = irfftn(div_hat(rfftn_tensor(s, sym), g.freq_mesh(half=True)), g.n)
    num = l2_norm(d)
    den = float(np.linalg.norm(s.mean(axis=(-3, -2, -1))))
    out = _ratio(num, den, np.abs(s).max(initial=0.0) if scale is None else scale)
    return out if return_mode else out[0]


def compatibility_residual(strain, grid=None, finite=False, return_mode=False, scale=None, precise=True):
    """Max-component incompatibility over the norm of the mean strain.

    Small strain: ``max|curl(curl(eps)^T)| / ||<eps>||``.
    Finite strain (``strain`` is F): ``max|curl F| / ||<F> - I||``.

    The double curl scales transform roundoff by ``|xi|^2``, so by default
    the transforms run in extended precision (``np.longdouble``); pass
    ``precise=False`` for the cheaper double-precision estimate.
    """
    e = _data(strain)
    g = _grid(strain, grid)
    if precise:
        e = e.astype(np.longdouble)
    xi = g.freq_mesh(half=True)
    if finite:
        c = irfftn(curl_hat(rfftn(e), xi), g.n)
        mean = e.mean(axis=(-3, -2, -1)) - np.eye(3)
        field_scale = np.abs(e - np.eye(3).reshape(3, 3, 1, 1, 1)).max(initial=0.0)
    else:
        sym = np.array_equal(e, np.swapaxes(e, 0, 1))
        c = irfftn_tensor(incompatibility_hat(rfftn_tensor(e, sym), xi), g.n, sym)
        mean = e.mean(axis=(-3, -2, -1))
        field_scale = np.abs(e).max(initial=0.0)
    num = float(np.abs(c).max(initial=0.0))
    if scale is None:
        scale = float(field_scale)
    out = _ratio(num, float(np.linalg.norm(mean.astype(float))), scale)
    return out if return_mode else out[0]


def loading_residual(mean_strain, mean_stress, load, return_mode=False):
    """Macroscopic loading mismatch under strain, stress or mixed control.

    Strain-controlled components are compared with the strain targets and
    stress-controlled ones with the stress targets; each group is normalized
    by its own target norm and the two are combined root-sum-square.  A
    group whose targets are all zero contributes its absolute mismatch.
    """
    mask = np.asarray(load.stress_mask, dtype=bool)
    ref = np.eye(3) if load.finite else np.zeros((3, 3))
    terms = []
    absolute = False
    for sel, avg, target, offset in (
        (~mask, np.asarray(mean_strain), np.asarray(load.strain_target), ref),
        (mask, np.asarray(mean_stress), np.asarray(load.stress_target), 0.0),
    ):
        if not sel.any():
            continue
        num = float(np.linalg.norm((avg - target)[sel]))
        den = float(np.linalg.norm((target - offset)[sel]))
        r, ab = _ratio(num, den, den)
        absolute |= ab
        terms.append(r)
    out = (float(np.sqrt(np.sum(np.square(terms)))), absolute)
    return out if return_mode else out[0]


def field_diff(f, g, return_mode=False):
    """||f - g||_L2 / ||g||_L2."""
    a, b = _data(f), _data(g)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    num = l2_norm(a - b)
    den = l2_norm(b)
    out = _ratio(num, den, np.abs(b).max(initial=0.0))
    return out if return_mode else out[0]


def residual_triple(stress, strain, mean_stress, mean_strain, load, grid,
                    stress_scale=None, strain_scale=None, precise=True) -> ResidualTriple:
    eq, a1 = equilibrium_residual(stress, grid, return_mode=True, scale=stress_scale)
    co, a2 = compatibility_residual(strain, grid, finite=load.finite, return_mode=True, scale=strain_scale,
                                    precise=precise)
    lo, a3 = loading_residual(mean_strain, mean_stress, load, return_mode=True)
    flags = tuple(n for n, a in zip(("equilibrium", "compatibility", "loading"), (a1, a2, a3)) if a)
    return ResidualTriple(eq, co, lo, flags)
