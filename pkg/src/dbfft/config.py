"""Run configuration: strict YAML parsing into a validated :class:`RunConfig`.

Example::

    grid: {n: [31, 31, 31], l: [1.0, 1.0, 1.0]}
    microstructure: {generator: sphere_inclusion, vf: 0.2}
    materials:
      - {kind: linear_elastic, E: 70.0, nu: 0.3}
      - {kind: linear_elastic, E: 7.0e5, nu: 0.3}
    load:
      kinematics: small
      segments:
        - {strain: {"11": 1.0e-3}, increments: 1}

Macroscopic components are keyed "11".."33".  A component listed under
``stress`` is stress controlled; every other component is strain controlled,
with target 0 (small strain) or the identity entry (finite strain) when it is
not listed under ``strain`` either.  Small-strain keys "ij" and "ji" denote
the same component.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import yaml

from .errors import ConfigError, DBFFTError
from .linear_solver import MAX_ITER, TOL_COMPATIBILITY, TOL_EQUILIBRIUM, TOL_LOADING, LoadSpec
from .materials import MODELS
from .nonlinear import MAX_NEWTON, NEWTON_TOL

_COMPONENTS = {f"{i + 1}{j + 1}": (i, j) for i in range(3) for j in range(3)}

_GRID_KEYS = {"n", "l"}
_MICRO_KEYS = {
    "homogeneous": set(),
    "sphere_inclusion": {"vf"},
    "random_spheres": {"count", "porosity", "seed"},
}
_MATERIAL_PARAMS = {
    "linear_elastic": {"E", "nu"},
    "svk_hyperelastic": {"E", "nu"},
    "j2_plastic": {"E", "nu", "sigma_y", "H"},
}
_SEGMENT_KEYS = {"strain", "stress", "increments", "time_per_increment"}
_SOLVER_DEFAULTS = {
    "tol_equilibrium": TOL_EQUILIBRIUM,
    "tol_compatibility": TOL_COMPATIBILITY,
    "tol_loading": TOL_LOADING,
    "newton_tol": NEWTON_TOL,
    "max_iter": MAX_ITER,
    "max_newton": MAX_NEWTON,
    "preconditioner": True,
    "preconditioner_refresh": 0,
    "threads": 1,
}
_OUTPUT_DEFAULTS = {
    "directory": "output",
    "vtk": "last",              # "all", "last", "none" or a list of increment numbers
    "magnification": 1.0,
    "history": True,
    "trace": True,
}
_TOP_KEYS = {"grid", "microstructure", "materials", "load", "solver", "output", "seed"}


@dataclass
class RunConfig:
    n: tuple
    l: tuple
    microstructure: Dict[str, Any]
    materials: List[Dict[str, Any]]
    kinematics: str
    segments: List[LoadSpec]
    solver: Dict[str, Any]
    output: Dict[str, Any]
    seed: int = 0
    digest: str = ""
    source: Optional[Path] = None
    raw: Dict[str, Any] = field(default_factory=dict)

    @property
    def tolerances(self):
        s = self.solver
        return (s["tol_equilibrium"], s["tol_compatibility"], s["tol_loading"])


def _fail(key, msg):
    raise ConfigError(f"{key}: {msg}")


def _check_keys(where, given, allowed):
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        _fail(where + "." + unknown[0] if where else unknown[0],
              f"unknown key (allowed: {', '.join(sorted(allowed))})")


def _mapping(where, value):
    if not isinstance(value, dict):
        _fail(where, f"expected a mapping, got {type(value).__name__}")
    return value


def _number(where, value, positive=False, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        _fail(where, f"expected a number, got {value!r}")
    if integer and int(value) != value:
        _fail(where, f"expected an integer, got {value!r}")
    if positive and not value > 0:
        _fail(where, f"must be positive, got {value!r}")
    return int(value) if integer else float(value)


def _triple(where, value, integer=False):
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        _fail(where, f"expected a list of three values, got {value!r}")
    return tuple(_number(f"{where}[{i}]", v, positive=True, integer=integer) for i, v in enumerate(value))


def _components(where, spec, finite):
    spec = _mapping(where, spec or {})
    out = {}
    for key, val in spec.items():
        k = str(key)
        if k not in _COMPONENTS:
            _fail(f"{where}.{k}", "component keys are '11'..'33'")
        i, j = _COMPONENTS[k]
        v = _number(f"{where}.{k}", val)
        pairs = [(i, j)] if finite else {(i, j), (j, i)}
        for p in pairs:
            if p in out and out[p] != v:
                _fail(f"{where}.{k}", f"conflicts with the value given for component {p[0] + 1}{p[1] + 1}")
            out[p] = v
    return out


def _segment(where, seg, finite):
    seg = _mapping(where, seg)
    _check_keys(where, seg, _SEGMENT_KEYS)
    strain = _components(where + ".strain", seg.get("strain"), finite)
    stress = _components(where + ".stress", seg.get("stress"), finite)
    both = sorted(set(strain) & set(stress))
    if both:
        i, j = both[0]
        _fail(f"{where}.stress.{i + 1}{j + 1}", "component has both a strain and a stress target")
    mask = np.zeros((3, 3), bool)
    eps = np.eye(3) if finite else np.zeros((3, 3))
    sig = np.zeros((3, 3))
    for (i, j), v in strain.items():
        eps[i, j] = v
    for (i, j), v in stress.items():
        mask[i, j] = True
        sig[i, j] = v
    increments = _number(where + ".increments", seg.get("increments", 1), positive=True, integer=True)
    dt = _number(where + ".time_per_increment", seg.get("time_per_increment", 1.0), positive=True)
    try:
        return LoadSpec(mask, eps, sig, finite=finite, increments=increments, time_per_increment=dt)
    except DBFFTError as exc:
        _fail(where, str(exc))


def _material(where, m):
    m = _mapping(where, m)
    kind = m.get("kind")
    if kind not in MODELS:
        _fail(where + ".kind", f"unknown material kind {kind!r} (known: {', '.join(MODELS)})")
    _check_keys(where, m, _MATERIAL_PARAMS[kind] | {"kind"})
    if "E" not in m:
        _fail(where + ".E", "missing Young's modulus")
    params = {k: _number(f"{where}.{k}", v) for k, v in m.items() if k != "kind"}
    try:
        MODELS[kind](**params)
    except DBFFTError as exc:
        _fail(where, str(exc))
    return {"kind": kind, **params}


def digest_of(raw) -> str:
    """Short hash of the problem definition; where artifacts go does not count."""
    raw = dict(raw)
    if isinstance(raw.get("output"), dict):
        raw["output"] = {k: v for k, v in raw["output"].items() if k != "directory"}
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def config_from_dict(raw, source: Optional[Path] = None) -> RunConfig:
    raw = _mapping("config", raw)
    _check_keys("", raw, _TOP_KEYS)
    for key in ("grid", "microstructure", "materials", "load"):
        if key not in raw:
            _fail(key, "missing required section")

    grid = _mapping("grid", raw["grid"])
    _check_keys("grid", grid, _GRID_KEYS)
    if "n" not in grid:
        _fail("grid.n", "missing voxel counts")
    n = _triple("grid.n", grid["n"], integer=True)
    for i, v in enumerate(n):
        if v < 3 or v % 2 == 0:
            _fail(f"grid.n[{i}]", f"voxel counts must be odd and >= 3, got {v}")
    l = _triple("grid.l", grid.get("l", [1.0, 1.0, 1.0]))

    micro = dict(_mapping("microstructure", raw["microstructure"]))
    if "file" in micro:
        _check_keys("microstructure", micro, {"file"})
        path = Path(str(micro["file"]))
        if source is not None and not path.is_absolute():
            path = source.parent / path
        micro["file"] = path
    else:
        gen = micro.get("generator")
        if gen not in _MICRO_KEYS:
            _fail("microstructure.generator", f"unknown generator {gen!r} (known: {', '.join(_MICRO_KEYS)})")
        _check_keys("microstructure", micro, _MICRO_KEYS[gen] | {"generator"})
        for k in _MICRO_KEYS[gen]:
            if k not in micro:
                _fail(f"microstructure.{k}", "missing parameter")
        if gen == "random_spheres":
            micro["count"] = _number("microstructure.count", micro["count"], positive=True, integer=True)
            micro["seed"] = _number("microstructure.seed", micro["seed"], integer=True)

    mats = raw["materials"]
    if not isinstance(mats, list) or not mats:
        _fail("materials", "expected a non-empty list (one entry per phase id)")
    materials = [_material(f"materials[{i}]", m) for i, m in enumerate(mats)]

    load = raw["load"]
    if isinstance(load, list):
        load = {"segments": load}
    load = _mapping("load", load)
    shorthand = "segments" not in load
    if not shorthand:
        _check_keys("load", load, {"kinematics", "segments"})
        segs = load["segments"]
        if not isinstance(segs, list) or not segs:
            _fail("load.segments", "expected a non-empty list")
    else:
        _check_keys("load", load, _SEGMENT_KEYS | {"kinematics"})
        segs = [{k: v for k, v in load.items() if k != "kinematics"}]
    kin = load.get("kinematics", "small")
    if kin not in ("small", "finite"):
        _fail("load.kinematics", f"expected 'small' or 'finite', got {kin!r}")
    finite = kin == "finite"
    segments = [_segment("load" if shorthand else f"load.segments[{i}]", s, finite)
                for i, s in enumerate(segs)]
    kinds = {MODELS[m["kind"]].kinematics for m in materials}
    if kinds != {kin}:
        _fail("load.kinematics", f"{kin}-strain load with materials of kinematics {sorted(kinds)}")

    solver = dict(_SOLVER_DEFAULTS)
    given = _mapping("solver", raw.get("solver") or {})
    _check_keys("solver", given, _SOLVER_DEFAULTS)
    for k, v in given.items():
        if k == "preconditioner":
            if not isinstance(v, bool):
                _fail("solver.preconditioner", "expected true or false")
            solver[k] = v
        elif k in ("max_iter", "max_newton", "threads"):
            solver[k] = _number(f"solver.{k}", v, positive=True, integer=True)
        elif k == "preconditioner_refresh":
            solver[k] = _number(f"solver.{k}", v, integer=True)
            if solver[k] < 0:
                _fail("solver.preconditioner_refresh", "must be >= 0")
        else:
            solver[k] = _number(f"solver.{k}", v, positive=True)

    output = dict(_OUTPUT_DEFAULTS)
    given = _mapping("output", raw.get("output") or {})
    _check_keys("output", given, _OUTPUT_DEFAULTS)
    output.update(given)
    vtk = output["vtk"]
    if isinstance(vtk, list):
        output["vtk"] = [_number(f"output.vtk[{i}]", v, positive=True, integer=True) for i, v in enumerate(vtk)]
    elif vtk not in ("all", "last", "none"):
        _fail("output.vtk", "expected 'all', 'last', 'none' or a list of increments")
    output["magnification"] = _number("output.magnification", output["magnification"])
    for k in ("history", "trace"):
        if not isinstance(output[k], bool):
            _fail(f"output.{k}", "expected true or false")
    out_dir = Path(str(output["directory"]))
    if source is not None and not out_dir.is_absolute():
        out_dir = source.parent / out_dir
    output["directory"] = out_dir

    seed = _number("seed", raw.get("seed", 0), integer=True)
    return RunConfig(n, l, micro, materials, kin, segments, solver, output, seed, digest_of(raw), source, raw)


def check_phase_coverage(cfg: RunConfig, phase_count: int):
    if phase_count > len(cfg.materials):
        _fail("materials", f"microstructure uses phase ids 0..{phase_count - 1} but only "
                           f"{len(cfg.materials)} material(s) are defined (missing phase {len(cfg.materials)})")


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    return config_from_dict(raw, source=path)
