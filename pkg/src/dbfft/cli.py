"""Command line entry point: ``dbfft run | gen | diff``.

Exit codes: 0 converged, 1 usage or configuration error, 2 non-convergence.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import io
from .config import RunConfig, check_phase_coverage, parse_config
from .errors import ConfigError, DBFFTError
from .grid import Grid, make_grid, set_workers
from .linear_solver import SolveReport, solve_small_strain
from .materials import MODELS, MaterialSet
from .microstructure import PhaseMap, load_phase_map, random_spheres, save_phase_map, sphere_inclusion
from .nonlinear import NewtonOptions, run_load_path
from .residuals import field_diff

log = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2

_LABELS = [f"{i + 1}{j + 1}" for i in range(3) for j in range(3)]


@dataclass
class RunOutcome:
    exit_code: int
    directory: Path
    files: List[Path] = field(default_factory=list)
    message: str = ""


def build_phase_map(cfg: RunConfig) -> PhaseMap:
    grid = make_grid(cfg.n, cfg.l)
    micro = cfg.microstructure
    if "file" in micro:
        pm = load_phase_map(micro["file"])
        if pm.grid.n != grid.n:
            raise ConfigError(f"microstructure.file: voxel counts {pm.grid.n} differ from grid.n {grid.n}")
        return pm
    gen = micro["generator"]
    if gen == "homogeneous":
        return PhaseMap(grid, np.zeros(grid.n, dtype=np.int64), 1)
    if gen == "sphere_inclusion":
        return sphere_inclusion(grid, float(micro["vf"]))
    return random_spheres(grid, micro["count"], float(micro["porosity"]), micro["seed"])


def _macro_displacement(grid: Grid, macro, finite):
    grad = macro - np.eye(3) if finite else macro
    return np.einsum("ij,j...->i...", grad, grid.coordinates())


def _stress_label(finite):
    return "P" if finite else "sigma"


def _strain_label(finite):
    return "F" if finite else "eps"


class _Writer:
    def __init__(self, cfg: RunConfig, grid: Grid, phase_id):
        self.cfg = cfg
        self.grid = grid
        self.phase_id = phase_id
        self.dir = Path(cfg.output["directory"])
        self.dir.mkdir(parents=True, exist_ok=True)
        self.comment = f"dbfft config digest {cfg.digest}"
        self.files: List[Path] = []
        self.finite = cfg.kinematics == "finite"

    def wants_vtk(self, k, last):
        sel = self.cfg.output["vtk"]
        if sel == "none":
            return False
        if sel == "all":
            return True
        if sel == "last":
            return last
        return k in sel

    def vtk(self, k, u, macro, strain, stress):
        disp = (_macro_displacement(self.grid, macro, self.finite) + u) * self.cfg.output["magnification"]
        path = self.dir / f"fields_inc{k:04d}.vtk"
        io.export_vtk(path, self.grid, vectors={"displacement": disp},
                      tensors={_stress_label(self.finite): stress, _strain_label(self.finite): strain},
                      scalars={"phase": np.asarray(self.phase_id, dtype=np.int64)},
                      title=f"{self.comment} increment {k}")
        self.files.append(path)

    def traces(self, k, solves: List[SolveReport]):
        if not self.cfg.output["trace"]:
            return
        for j, rep in enumerate(solves, start=1):
            path = self.dir / f"trace_inc{k:04d}_solve{j:02d}.csv"
            io.write_csv(path, io.TRACE_HEADER, io.trace_rows(rep), self.comment)
            self.files.append(path)

    def history(self, rows):
        if not self.cfg.output["history"]:
            return
        s, e = _stress_label(self.finite), _strain_label(self.finite)
        header = (["increment"] + [f"{s}{c}" for c in _LABELS] + [f"{e}{c}" for c in _LABELS]
                  + ["newton_iterations", "cg_iterations", "equilibrium", "compatibility", "loading",
                     "wall_time"])
        path = self.dir / "history.csv"
        io.write_csv(path, header, rows, self.comment)
        self.files.append(path)


def _history_row(k, mean_stress, mean_strain, newton, cg, res, wall):
    triple = res.as_tuple() if res is not None else (np.nan,) * 3
    return ([k] + [float(v) for v in np.ravel(mean_stress)] + [float(v) for v in np.ravel(mean_strain)]
            + [int(newton), int(cg)] + [float(v) for v in triple] + [float(wall)])


def run(cfg: RunConfig) -> RunOutcome:
    """Solve the configured problem and write every selected artifact."""
    set_workers(cfg.solver["threads"])
    pm = build_phase_map(cfg)
    check_phase_coverage(cfg, int(pm.phase_id.max()) + 1)
    materials = [MODELS[m["kind"]](**{k: v for k, v in m.items() if k != "kind"}) for m in cfg.materials]
    grid = pm.grid
    writer = _Writer(cfg, grid, pm.phase_id)
    solver = cfg.solver
    linear = (cfg.kinematics == "small" and len(cfg.segments) == 1 and cfg.segments[0].increments == 1
              and all(m["kind"] == "linear_elastic" for m in cfg.materials))

    if linear:
        t0 = time.perf_counter()
        try:
            res = solve_small_strain(cfg.segments[0], pm.phase_id, materials,
                                     precondition=solver["preconditioner"], tol=cfg.tolerances,
                                     max_iter=solver["max_iter"], grid=grid)
        except DBFFTError as exc:
            return RunOutcome(EXIT_DIVERGED, writer.dir, writer.files, str(exc))
        rep = res.report
        writer.traces(1, [rep])
        writer.history([_history_row(1, res.mean_stress, res.mean_strain, 0, rep.iterations, rep.final,
                                     time.perf_counter() - t0)])
        if writer.wants_vtk(1, True):
            writer.vtk(1, res.displacement, res.macro_strain, res.strain, res.stress)
        code = EXIT_OK if rep.converged else EXIT_DIVERGED
        return RunOutcome(code, writer.dir, writer.files, rep.summary())

    options = NewtonOptions(newton_tol=solver["newton_tol"], max_newton=solver["max_newton"],
                            cg_tol=cfg.tolerances, max_iter=solver["max_iter"],
                            precondition=solver["preconditioner"],
                            refresh_every=solver["preconditioner_refresh"])
    total = sum(s.increments for s in cfg.segments)
    rows = []

    def on_increment(row):
        rep = row.report
        writer.traces(row.k, rep.solves)
        rows.append(_history_row(row.k, row.mean_stress, row.mean_strain, rep.newton_iterations,
                                 rep.total_cg, rep.residuals, rep.wall_time))
        if writer.wants_vtk(row.k, row.k == total):
            st = row.state
            writer.vtk(row.k, st.u, st.macro, st.strain, st.stress)
        log.info("increment %d: %d Newton, %d CG", row.k, rep.newton_iterations, rep.total_cg)

    mats = MaterialSet(materials, pm.phase_id)
    result = run_load_path(cfg.segments, pm.phase_id, mats, grid=grid, options=options,
                           keep_fields=cfg.output["vtk"] != "none", callback=on_increment)
    writer.history(rows)
    if result.completed:
        return RunOutcome(EXIT_OK, writer.dir, writer.files, f"{len(rows)} increments converged")
    # the failed increment still gets a snapshot of the last accepted state
    if cfg.output["vtk"] != "none" and rows:
        st = result.state
        path = writer.dir / f"fields_inc{st.k:04d}.vtk"
        if path not in writer.files:
            writer.vtk(st.k, st.u, st.macro, st.strain, st.stress)
    return RunOutcome(EXIT_DIVERGED, writer.dir, writer.files, result.failure or "load path failed")


# -- verbs ---------------------------------------------------------------------

def _cmd_run(args) -> int:
    cfg = parse_config(args.config)
    if args.output:
        cfg.output["directory"] = Path(args.output)
    if args.threads:
        cfg.solver["threads"] = args.threads
    outcome = run(cfg)
    print(f"{'converged' if outcome.exit_code == EXIT_OK else 'NOT converged'}: {outcome.message}")
    print(f"artifacts in {outcome.directory}")
    return outcome.exit_code


def _parse_params(items):
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"{item}: expected key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _floats(key, text, count=None):
    try:
        vals = [float(t) for t in text.split(",")]
    except ValueError:
        raise ConfigError(f"{key}: expected number(s), got {text!r}") from None
    if count and len(vals) == 1:
        vals = vals * count
    if count and len(vals) != count:
        raise ConfigError(f"{key}: expected {count} comma-separated values")
    return vals


_GEN_PARAMS = {
    "homogeneous": set(),
    "sphere_inclusion": {"vf"},
    "random_spheres": {"count", "porosity", "seed"},
}


def _cmd_gen(args) -> int:
    params = _parse_params(args.params)
    allowed = _GEN_PARAMS[args.generator] | {"n", "l"}
    unknown = sorted(set(params) - allowed)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown parameter for {args.generator} "
                          f"(allowed: {', '.join(sorted(allowed))})")
    missing = sorted((_GEN_PARAMS[args.generator] | {"n"}) - set(params))
    if missing:
        raise ConfigError(f"{missing[0]}: missing parameter")
    n = [int(v) for v in _floats("n", params["n"], 3)]
    l = _floats("l", params.get("l", "1"), 3)
    grid = make_grid(n, l)
    if args.generator == "homogeneous":
        pm = PhaseMap(grid, np.zeros(grid.n, dtype=np.int64), 1)
    elif args.generator == "sphere_inclusion":
        pm = sphere_inclusion(grid, _floats("vf", params["vf"])[0])
    else:
        pm = random_spheres(grid, int(_floats("count", params["count"])[0]),
                            _floats("porosity", params["porosity"])[0], int(_floats("seed", params["seed"])[0]))
    save_phase_map(pm, args.output)
    fr = ", ".join(f"{v:.6f}" for v in pm.volume_fractions)
    print(f"wrote {args.output}: grid {grid.n}, volume fractions [{fr}]")
    return EXIT_OK


def _cmd_diff(args) -> int:
    dims_a, fa = io.read_vtk(args.a)
    dims_b, fb = io.read_vtk(args.b)
    if dims_a != dims_b:
        raise ConfigError(f"grid mismatch: {dims_a} vs {dims_b}")
    common = [k for k in fa if k in fb]
    if not common:
        raise ConfigError("the files share no field names")
    for name in common:
        print(f"{name} {field_diff(fa[name], fb[name]):.17g}")
    for name in sorted(set(fa) ^ set(fb)):
        print(f"{name} only in {'A' if name in fa else 'B'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dbfft", description="FFT-based periodic homogenization solver")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="verb", required=True)

    r = sub.add_parser("run", help="solve the problem described by a YAML config")
    r.add_argument("config")
    r.add_argument("-o", "--output", help="override output.directory")
    r.add_argument("--threads", type=int, help="override solver.threads")
    r.set_defaults(func=_cmd_run)

    g = sub.add_parser("gen", help="generate a phase map and save it as DBFM")
    g.add_argument("generator", choices=sorted(_GEN_PARAMS))
    g.add_argument("params", nargs="*", help="key=value, e.g. n=31,31,31 vf=0.2")
    g.add_argument("-o", "--output", required=True)
    g.set_defaults(func=_cmd_gen)

    d = sub.add_parser("diff", help="relative L2 difference of every shared field in two VTK files")
    d.add_argument("a")
    d.add_argument("b")
    d.set_defaults(func=_cmd_diff)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DBFFTError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
