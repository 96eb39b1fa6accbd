import numpy as np
import pytest
from scipy.spatial.transform import Rotation

import dbfft.nonlinear as nl
from dbfft.errors import ConvergenceError
from dbfft.grid import make_grid
from dbfft.linear_solver import LoadSpec, solve_small_strain
from dbfft.materials import J2Plastic, LinearElastic, MaterialSet, SaintVenantKirchhoff, svk_stress_tangent
from dbfft.microstructure import sphere_inclusion
from dbfft.nonlinear import IncrementState, NewtonOptions, newton_step, run_increment, run_load_path
from dbfft.residuals import field_diff

import oracles

TIGHT = NewtonOptions(cg_tol=(1e-12, 1e-12, 1e-12), symmetry_check=False)


def _svk_two_phase(grid, seed=0):
    ph = np.random.default_rng(seed).integers(0, 2, grid.n)
    return ph, [SaintVenantKirchhoff(70.0, 0.3), SaintVenantKirchhoff(700.0, 0.25)]


def _uniaxial_piola_load(P11, increments=1):
    mask = np.eye(3, dtype=bool)
    P = np.zeros((3, 3))
    P[0, 0] = P11
    return LoadSpec(mask, np.eye(3), P, finite=True, increments=increments)


def test_homogeneous_svk_single_newton_iteration():
    g = make_grid((5, 5, 5))
    F = np.diag([1.01, 1.0, 1.0])
    res = run_load_path(LoadSpec.strain(F, finite=True), np.zeros(g.n, int), [SaintVenantKirchhoff(70, 0.3)],
                        grid=g)
    assert res.completed
    rep = res.history[0].report
    assert rep.newton_iterations == 1 and rep.cg_iterations == [0]
    P, _ = svk_stress_tangent(F, SaintVenantKirchhoff(70, 0.3).stiffness)
    assert np.allclose(res.history[0].mean_stress, P, rtol=1e-13, atol=1e-15)
    assert np.abs(res.state.u).max() == 0.0


@pytest.mark.parametrize("mixed", [False, True])
def test_newton_step_matches_dense_oracle(mixed):
    g = make_grid((3, 3, 3), (1.0, 0.9, 1.1))
    ph, mats = _svk_two_phase(g, 1)
    ms = MaterialSet(mats, ph)
    Fbar = np.array([[1.1, 0.05, 0.0], [0.0, 0.95, 0.02], [0.01, 0.0, 1.02]])
    if mixed:
        mask = np.zeros((3, 3), bool)
        mask[1, 1] = mask[2, 2] = mask[1, 2] = True
        P = np.zeros((3, 3))
        P[1, 1] = 1.5
        load = LoadSpec(mask, Fbar, P, finite=True)
    else:
        load = LoadSpec.strain(Fbar, finite=True)
    state = IncrementState.initial(g, True)
    rng = np.random.default_rng(2)
    state.u = 0.01 * rng.standard_normal((3,) + g.n)
    state.u -= state.u.mean(axis=(1, 2, 3), keepdims=True)
    state.macro = Fbar.copy()

    du, dmacro, rep, system = newton_step(state, ms, load, options=TIGHT)
    assert rep.converged or rep.status == "stagnated"

    F = state.strain_field()
    Pf, K = ms.evaluate(F)
    A = oracles.dense_operator(g, K, system.basis, finite=True)
    N = g.size
    b = np.concatenate([oracles.dense_divergence(g, Pf).ravel(),
                        np.einsum("aij,ij->a", system.basis, load.stress_target - Pf.mean(axis=(2, 3, 4)))])
    b[:3 * N] -= np.repeat(b[:3 * N].reshape(3, N).mean(axis=1), N)
    x = oracles.solve_dense(A, b, N)
    u_ref = x[:3 * N].reshape((3,) + g.n)
    assert field_diff(du, u_ref) <= 1e-8
    if mixed:
        ref = np.tensordot(x[3 * N:], system.basis, axes=1)
        assert np.abs(dmacro - ref).max() <= 1e-8 * np.abs(ref).max()


def test_tangent_system_reproduces_small_strain_solve():
    g = make_grid((7, 7, 7))
    ph = sphere_inclusion(g, 0.2).phase_id
    E, nu = [70.0, 700.0], [0.3, 0.3]
    eps = 1e-9 * np.diag([1.0, 0.0, 0.0])
    lin = solve_small_strain(LoadSpec.strain(eps), ph, [LinearElastic(e, v) for e, v in zip(E, nu)], grid=g,
                             tol=(1e-13, 1e-13, 1e-13))
    ms = MaterialSet([SaintVenantKirchhoff(e, v) for e, v in zip(E, nu)], ph)
    state = IncrementState.initial(g, True)
    state.macro = np.eye(3) + eps
    du, _, rep, system = newton_step(state, ms, LoadSpec.strain(np.eye(3) + eps, finite=True), options=TIGHT)
    assert field_diff(du, lin.displacement) <= 1e-6
    # at F = I the tangent operator is the small-strain one and is self-adjoint
    assert nl._symmetry_gap(system) <= 1e-10


def test_piola_uniaxial_closed_form():
    g = make_grid((3, 3, 3))
    res = run_load_path(_uniaxial_piola_load(5.0, increments=2), np.zeros(g.n, int),
                        [SaintVenantKirchhoff(70, 0.3)], grid=g)
    assert res.completed
    Pm = res.history[-1].mean_stress
    assert abs(Pm[0, 0] - 5.0) <= 1e-10 * 5.0
    assert np.abs(Pm - np.diag([5.0, 0, 0])).max() <= 1e-10
    lam, lat = oracles.svk_uniaxial_stretch(5.0, 70.0, 0.3)
    F = res.history[-1].mean_strain
    assert F[0, 0] == pytest.approx(lam, rel=1e-6)
    assert F[1, 1] == pytest.approx(lat, rel=1e-6) and F[2, 2] == pytest.approx(lat, rel=1e-6)


def _j2_paths(peak=8e-3, n_load=8, n_unload=2):
    mask = np.ones((3, 3), bool)
    mask[0, 0] = False
    load = LoadSpec(mask, np.diag([peak, 0, 0]), np.zeros((3, 3)), increments=n_load)
    unload = LoadSpec.stress(np.zeros((3, 3)), increments=n_unload)
    return load, unload


def test_j2_load_unload_matches_1d_closed_form():
    g = make_grid((3, 3, 3))
    mat = J2Plastic()
    load, unload = _j2_paths()
    res = run_load_path([load, unload], np.zeros(g.n, int), [mat], grid=g)
    assert res.completed
    strains = [h.mean_strain[0, 0] for h in res.history[:8]]
    ref = oracles.j2_uniaxial(strains, mat.E, mat.sigma_y, mat.H)
    for h, (s, _) in zip(res.history, ref):
        assert h.mean_stress[0, 0] == pytest.approx(s, rel=1e-6)
        assert np.abs(h.mean_stress - np.diag([s, 0, 0])).max() <= 1e-6 * abs(s)
    ep_peak = ref[-1][1]
    final = res.history[-1]
    assert np.abs(final.mean_stress).max() <= 1e-12
    assert final.mean_strain[0, 0] == pytest.approx(ep_peak, rel=1e-6)
    # plastic strain persists at zero stress
    assert final.mean_strain[0, 0] > 1e-3


def test_j2_path_dependence():
    g = make_grid((3, 3, 3))
    load, unload = _j2_paths()
    cyc = run_load_path([load, unload], np.zeros(g.n, int), [J2Plastic()], grid=g)
    e_final = cyc.history[-1].mean_strain[0, 0]
    mask = np.ones((3, 3), bool)
    mask[0, 0] = False
    mono = run_load_path(LoadSpec(mask, np.diag([e_final, 0, 0]), np.zeros((3, 3)), increments=4),
                         np.zeros(g.n, int), [J2Plastic()], grid=g)
    assert mono.completed
    # same final axial strain, very different stress
    assert abs(mono.history[-1].mean_stress[0, 0]) > 0.05
    assert abs(cyc.history[-1].mean_stress[0, 0]) < 1e-12


def test_elastic_path_independence():
    g = make_grid((5, 5, 5))
    ph, mats = _svk_two_phase(g, 3)
    F = np.diag([1.1, 1.0, 1.0])
    a = run_load_path(LoadSpec.strain(F, finite=True, increments=2), ph, mats, grid=g, options=TIGHT)
    b = run_load_path(LoadSpec.strain(F, finite=True, increments=4), ph, mats, grid=g, options=TIGHT)
    assert a.completed and b.completed
    assert field_diff(a.state.strain, b.state.strain) <= 1e-6
    assert field_diff(a.state.stress, b.state.stress) <= 1e-6


def test_porous_svk_stretch_and_newton_contraction():
    g = make_grid((9, 9, 9))
    ph = sphere_inclusion(g, 0.2)
    mats = [SaintVenantKirchhoff(70, 0.3), SaintVenantKirchhoff(0.7, 0.3)]
    res = run_load_path(LoadSpec.strain(np.diag([1.2, 1, 1]), finite=True), ph, mats)
    assert res.completed
    row = res.history[-1]
    assert row.mean_strain[0, 0] == 1.2
    assert np.abs(row.mean_strain[~np.eye(3, dtype=bool)]).max() <= 1e-15
    norms = row.report.update_norms
    assert row.report.newton_iterations <= 25
    assert len(norms) >= 2 and norms[-1] < norms[-2]
    assert row.report.residuals.compatibility <= 1e-10


def test_objectivity_of_homogeneous_response():
    g = make_grid((3, 3, 3))
    U = np.array([[1.05, 0.02, 0], [0.02, 0.98, 0], [0, 0, 1.01]])
    R = Rotation.from_rotvec([0.0, 0.0, 0.05]).as_matrix()
    mats = [SaintVenantKirchhoff(70, 0.3)]
    a = run_load_path(LoadSpec.strain(U, finite=True), np.zeros(g.n, int), mats, grid=g)
    b = run_load_path(LoadSpec.strain(R @ U, finite=True), np.zeros(g.n, int), mats, grid=g)
    Pa, Pb = a.history[-1].mean_stress, b.history[-1].mean_stress
    assert np.linalg.norm(Pb) == pytest.approx(np.linalg.norm(Pa), rel=1e-8)
    assert np.allclose(R.T @ Pb, Pa, rtol=1e-8, atol=1e-12)


def test_strain_controlled_average_is_exact_every_increment():
    g = make_grid((5, 5, 5))
    ph, mats = _svk_two_phase(g, 4)
    F = np.array([[1.1, 0.02, 0], [0, 1.0, 0], [0, 0, 0.97]])
    res = run_load_path(LoadSpec.strain(F, finite=True, increments=3), ph, mats, grid=g)
    for j, row in enumerate(res.history, start=1):
        target = np.eye(3) + j / 3 * (F - np.eye(3))
        assert np.abs(row.mean_strain - target).max() <= 1e-15


def test_refresh_knob_gives_same_answer():
    g = make_grid((5, 5, 5))
    ph, mats = _svk_two_phase(g, 5)
    load = LoadSpec.strain(np.diag([1.15, 1, 1]), finite=True)
    a = run_load_path(load, ph, mats, grid=g, options=TIGHT)
    opt = NewtonOptions(cg_tol=TIGHT.cg_tol, symmetry_check=False, refresh_every=1)
    b = run_load_path(load, ph, mats, grid=g, options=opt)
    assert field_diff(a.state.strain, b.state.strain) <= 1e-8


def test_small_strain_mixed_control_with_linear_material():
    g = make_grid((5, 5, 5))
    ph = np.random.default_rng(6).integers(0, 2, g.n)
    mats = [LinearElastic(70, 0.3), LinearElastic(350, 0.3)]
    mask = np.ones((3, 3), bool)
    mask[0, 0] = False
    load = LoadSpec(mask, np.diag([1e-3, 0, 0]), np.zeros((3, 3)))
    res = run_load_path(load, ph, mats, grid=g, options=TIGHT)
    lin = solve_small_strain(load, ph, mats, grid=g, tol=TIGHT.cg_tol)
    assert field_diff(res.state.strain, lin.strain) <= 1e-8


def test_newton_limit_reports_increment():
    g = make_grid((5, 5, 5))
    ph, mats = _svk_two_phase(g, 7)
    opt = NewtonOptions(max_newton=1)
    res = run_load_path(LoadSpec.strain(np.diag([1.3, 1, 1]), finite=True, increments=2), ph, mats,
                        grid=g, options=opt)
    assert not res.completed and res.history == []
    assert "increment 1" in res.failure


def test_inverted_element_stops_path():
    g = make_grid((3, 3, 3))
    res = run_load_path(LoadSpec.strain(np.diag([-0.5, 1, 1]), finite=True), np.zeros(g.n, int),
                        [SaintVenantKirchhoff(70, 0.3)], grid=g)
    assert not res.completed and "det F" in res.failure


def test_bisection_guard(monkeypatch):
    g = make_grid((5, 5, 5))
    ph, mats = _svk_two_phase(g, 8)
    calls = []
    real = nl.run_increment

    def flaky(state, materials, load, *a, **k):
        calls.append(load.strain_target[0, 0])
        if len(calls) == 1:
            raise nl._Diverging("forced")
        return real(state, materials, load, *a, **k)

    monkeypatch.setattr(nl, "run_increment", flaky)
    res = run_load_path(LoadSpec.strain(np.diag([1.1, 1, 1]), finite=True), ph, mats, grid=g)
    assert res.completed and len(res.history) == 1
    assert res.history[0].report.bisected
    assert calls == pytest.approx([1.1, 1.05, 1.1])
    assert res.history[0].mean_strain[0, 0] == 1.1


def test_bisection_gives_up_after_one_split(monkeypatch):
    g = make_grid((3, 3, 3))

    def always(*a, **k):
        raise nl._Diverging("forced")

    monkeypatch.setattr(nl, "run_increment", always)
    res = run_load_path(LoadSpec.strain(np.diag([1.1, 1, 1]), finite=True), np.zeros(g.n, int),
                        [SaintVenantKirchhoff(70, 0.3)], grid=g)
    assert not res.completed and "bisection" in res.failure


def test_kinematics_mismatch():
    g = make_grid((3, 3, 3))
    with pytest.raises(Exception):
        run_load_path(LoadSpec.strain(np.eye(3), finite=True), np.zeros(g.n, int), [J2Plastic()], grid=g)
