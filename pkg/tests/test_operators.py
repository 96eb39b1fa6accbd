import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dbfft.errors import ContractError
from dbfft.grid import TensorField, forward, inverse, make_grid
from dbfft.materials import isotropic_stiffness, lame
from dbfft.operators import (
    contract_stiffness, curl, div, grad, incompatibility, sym_grad,
)


@pytest.fixture
def grid():
    return make_grid((7, 5, 9), (1.0, 2.0, 1.5))


def _vec(grid, a):
    return TensorField(grid, np.asarray(a, float), "vector")


def _ten(grid, a):
    return TensorField(grid, np.asarray(a, float), "tensor2")


def _random_vec(grid, seed=0):
    return _vec(grid, np.random.default_rng(seed).standard_normal((3,) + grid.n))


def _random_ten(grid, seed=0, sym=False):
    a = np.random.default_rng(seed).standard_normal((3, 3) + grid.n)
    if sym:
        a = 0.5 * (a + a.swapaxes(0, 1))
    return _ten(grid, a)


def test_sym_grad_zero_frequency(grid):
    c = np.array([1.0, 2.0, 3.0])
    u = _vec(grid, np.broadcast_to(c[:, None, None, None], (3,) + grid.n))
    uh = forward(u)
    assert np.abs(sym_grad(uh).data).max() < 1e-12 * np.abs(uh.data).max()
    assert np.abs(grad(uh).data).max() < 1e-12 * np.abs(uh.data).max()
    # a field supported only at the zero frequency maps exactly to zero
    only_dc = TensorField.zeros(grid, domain="spectral")
    only_dc.data[:, 0, 0, 0] = uh.data[:, 0, 0, 0]
    assert not sym_grad(only_dc).data.any()


def test_sym_grad_sine_modes(grid):
    x = grid.coordinates()
    q = 2 * np.pi / grid.l[0]
    u = np.zeros((3,) + grid.n)
    u[0] = np.sin(q * x[0])
    e = inverse(sym_grad(forward(_vec(grid, u)))).data
    expect = np.zeros((3, 3) + grid.n)
    expect[0, 0] = q * np.cos(q * x[0])
    assert np.abs(e - expect).max() < 1e-10

    u = np.zeros((3,) + grid.n)
    u[1] = np.sin(q * x[0])
    e = inverse(sym_grad(forward(_vec(grid, u)))).data
    expect = np.zeros((3, 3) + grid.n)
    expect[0, 1] = expect[1, 0] = 0.5 * q * np.cos(q * x[0])
    assert np.abs(e - expect).max() < 1e-10


def test_grad_sine_mode(grid):
    x = grid.coordinates()
    q = 2 * np.pi / grid.l[0]
    u = np.zeros((3,) + grid.n)
    u[0] = np.sin(q * x[0])
    G = inverse(grad(forward(_vec(grid, u)))).data
    assert np.abs(G[0, 0] - q * np.cos(q * x[0])).max() < 1e-10
    assert np.abs(G[1, 0]).max() < 1e-12
    assert np.abs(np.delete(G.reshape(9, -1), 0, axis=0)).max() < 1e-10


def test_sym_part_of_grad(grid):
    uh = forward(_random_vec(grid))
    G = grad(uh).data
    S = sym_grad(uh).data
    assert np.abs(0.5 * (G + G.swapaxes(0, 1)) - S).max() < 1e-12 * np.abs(S).max()


def test_div_constant_and_sine(grid):
    c = np.arange(9.0).reshape(3, 3)
    s = _ten(grid, np.broadcast_to(c[..., None, None, None], (3, 3) + grid.n))
    sh = forward(s)
    assert np.abs(div(sh).data).max() < 1e-12 * np.abs(sh.data).max()

    x = grid.coordinates()
    q = 2 * np.pi / grid.l[0]
    a = np.zeros((3, 3) + grid.n)
    a[0, 0] = np.sin(q * x[0])
    d = inverse(div(forward(_ten(grid, a)))).data
    assert np.abs(d[0] - q * np.cos(q * x[0])).max() < 1e-10
    assert np.abs(d[1:]).max() < 1e-12


def test_navier_identity_per_mode(grid):
    # div(C : sym_grad(u)) = -(lam+mu) xi (xi.u) - mu |xi|^2 u  for every mode
    lam, mu = lame(70.0, 0.3)
    C = isotropic_stiffness(70.0, 0.3)
    uh = forward(_random_vec(grid, 3))
    e = sym_grad(uh).data
    s = np.tensordot(C, e, axes=([2, 3], [0, 1]))
    d = div(TensorField(grid, s, "tensor2", domain="spectral")).data
    xi = np.broadcast_arrays(*grid.freq_mesh())
    xu = sum(xi[k] * uh.data[k] for k in range(3))
    x2 = sum(xi[k] ** 2 for k in range(3))
    expect = np.stack([-(lam + mu) * xi[i] * xu - mu * x2 * uh.data[i] for i in range(3)])
    assert np.abs(d - expect).max() < 1e-10 * np.abs(expect).max()


def test_curl_of_grad_vanishes(grid):
    u = _random_vec(grid, 5)
    uh = forward(u)
    c = curl(grad(uh)).data
    scale = np.abs(uh.data).max() * max(np.abs(f).max() for f in grid.freq) ** 2
    assert np.abs(c).max() <= 1e-12 * scale


def test_double_curl_of_sym_grad_vanishes(grid):
    uh = forward(_random_vec(grid, 6))
    inc = incompatibility(sym_grad(uh)).data
    scale = np.abs(uh.data).max() * max(np.abs(f).max() for f in grid.freq) ** 3
    assert np.abs(inc).max() <= 1e-12 * scale


def test_curl_of_constant(grid):
    c = np.random.default_rng(0).standard_normal((3, 3))
    a = _ten(grid, np.broadcast_to(c[..., None, None, None], (3, 3) + grid.n))
    ah = forward(a)
    assert np.abs(curl(ah).data).max() < 1e-12 * np.abs(ah.data).max()


def test_adjointness(grid):
    u = _random_vec(grid, 7)
    tau = _random_ten(grid, 8, sym=True)
    lhs = np.sum(inverse(div(forward(tau))).data * u.data)
    rhs = -np.sum(tau.data * inverse(sym_grad(forward(u))).data)
    assert abs(lhs - rhs) <= 1e-10 * abs(rhs)


def test_operators_annihilate_mean(grid):
    uh = forward(_random_vec(grid, 9))
    th = forward(_random_ten(grid, 10))
    for out in (sym_grad(uh), grad(uh), div(th), curl(th)):
        assert not np.any(out.data[..., 0, 0, 0])


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 1000))
def test_linearity(a, b, seed):
    g = make_grid((3, 5, 3))
    u, v = _random_vec(g, seed), _random_vec(g, seed + 1)
    uh, vh = forward(u).data, forward(v).data
    wh = TensorField(g, a * uh + b * vh, domain="spectral")
    for op in (sym_grad, grad):
        lhs = op(wh).data
        rhs = a * op(TensorField(g, uh, domain="spectral")).data + b * op(TensorField(g, vh, domain="spectral")).data
        assert np.allclose(lhs, rhs, atol=1e-12 * (1 + np.abs(rhs).max()))


def test_rank_contracts(grid):
    uh = forward(_random_vec(grid))
    th = forward(_random_ten(grid))
    with pytest.raises(ContractError):
        sym_grad(th)
    with pytest.raises(ContractError):
        div(uh)
    with pytest.raises(ContractError):
        curl(uh)
    with pytest.raises(ContractError):
        grad(_random_vec(grid))


def test_contract_stiffness_isotropic_uniaxial():
    g = make_grid((3, 3, 3))
    C = isotropic_stiffness(70.0, 0.3)
    e = np.zeros((3, 3) + g.n)
    e[0, 0] = 0.001
    s = contract_stiffness(C, _ten(g, e)).data
    E, nu = 70.0, 0.3
    assert np.allclose(s[0, 0], 0.001 * E * (1 - nu) / ((1 + nu) * (1 - 2 * nu)), rtol=1e-14)
    assert np.allclose(s[1, 1], 0.001 * E * nu / ((1 + nu) * (1 - 2 * nu)), rtol=1e-14)
    assert np.allclose(s[0, 0], 0.0942308, rtol=1e-6)
    assert np.allclose(s[2, 2], 0.0403846, rtol=1e-6)
    assert np.abs(s[0, 1]).max() == 0


def test_contract_stiffness_phase_table():
    g = make_grid((3, 3, 3))
    rng = np.random.default_rng(2)
    table = np.stack([isotropic_stiffness(70.0, 0.3), isotropic_stiffness(7.0, 0.2)])
    ph = rng.integers(0, 2, g.n)
    e = rng.standard_normal((3, 3) + g.n)
    e = 0.5 * (e + e.swapaxes(0, 1))
    s = contract_stiffness(table, e, ph)
    per_voxel = np.einsum("xyzijkl->ijklxyz", table[ph])
    assert np.allclose(s, contract_stiffness(per_voxel, e))
    assert not contract_stiffness(table, np.zeros_like(e), ph).any()
    assert np.allclose(contract_stiffness(3 * table, e, ph), 3 * s)
    with pytest.raises(ContractError):
        contract_stiffness(table, e, ph + 1)
