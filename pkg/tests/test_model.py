import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pbctune._linalg import fd_matrix_partials
from pbctune.errors import DimensionError, ModelInvariantError
from pbctune.model import (
    MechanicalModel,
    Region,
    build_model,
    check_equilibrium,
    eval_hamiltonian,
    mass_bounds,
    open_loop_field,
    passive_output,
)

ALL_MODELS = ["point_mass", "mass_spring_damper", "planar_manipulator", "two_link_arm", "mass_chain"]


@pytest.mark.parametrize("name", ALL_MODELS)
def test_mass_is_spd_and_partials_match_differences(name):
    model = build_model(name)
    rng = np.random.default_rng(1)
    for _ in range(5):
        q = rng.uniform(-2, 2, model.n)
        mq = model.mass_matrix(q)
        assert np.allclose(mq, mq.T)
        assert np.linalg.eigvalsh(mq)[0] > 0
        assert np.allclose(model.mass_partials(q), fd_matrix_partials(model.mass_matrix, q), atol=1e-7)


@pytest.mark.parametrize("name", ALL_MODELS)
def test_potential_gradient_and_hessian_consistent(name):
    model = build_model(name)
    q = np.random.default_rng(2).uniform(-1, 1, model.n)
    h = 1e-6
    num = np.array([(model.potential(q + h * e) - model.potential(q - h * e)) / (2 * h) for e in np.eye(model.n)])
    assert np.allclose(model.potential_grad(q), num, atol=1e-6)
    hess = model.potential_hess(q)
    assert np.allclose(hess, hess.T)


def test_manipulator_structure():
    model = build_model("planar_manipulator")
    assert (model.n, model.m, model.ell) == (4, 2, 2)
    g = model.input_matrix
    assert np.allclose(g[:2], 0.0)
    assert np.allclose(g[2:], np.diag([1.0, 1.67]))
    assert np.allclose(model.annihilator @ g, 0.0)


def test_manipulator_equilibria():
    model = build_model("planar_manipulator")
    assert check_equilibrium(model, [0.6, 0.8, 0.6, 0.8]).ok
    bad = check_equilibrium(model, [0.6, 0.8, 0.0, 0.0])
    assert not bad.ok and bad.residual > 1.0


def test_fully_actuated_any_equilibrium():
    assert check_equilibrium(build_model("two_link_arm"), [1.0, -2.0]).ok


def test_unforced_energy_balance():
    # dH/dt = -v' D v for the open loop
    model = build_model("planar_manipulator")
    rng = np.random.default_rng(4)
    q, p = rng.normal(size=4), rng.normal(size=4)
    x = np.concatenate([q, p])
    f = open_loop_field(model, x)
    h = 1e-6
    dh = (eval_hamiltonian(model, q + h * f[:4], p + h * f[4:]) - eval_hamiltonian(model, q - h * f[:4], p - h * f[4:])) / (2 * h)
    v = np.linalg.solve(model.mass_matrix(q), p)
    assert dh == pytest.approx(-v @ model.damping(q, p) @ v, rel=1e-6, abs=1e-9)


def test_passive_output_and_supply_rate():
    model = build_model("two_link_arm")
    q, p = np.array([0.2, 0.7]), np.array([0.3, -0.4])
    u = np.array([1.0, 2.0])
    y = passive_output(model, q, p)
    f = open_loop_field(model, np.concatenate([q, p]), u)
    h = 1e-6
    dh = (eval_hamiltonian(model, q + h * f[:2], p + h * f[2:]) - eval_hamiltonian(model, q - h * f[:2], p - h * f[2:])) / (2 * h)
    v = np.linalg.solve(model.mass_matrix(q), p)
    assert dh == pytest.approx(u @ y - v @ model.damping(q, p) @ v, rel=1e-6)


def test_region_grid_and_cap():
    reg = Region([0.0, 1.0], [1.0, 0.0], samples_per_axis=3)
    grid = reg.grid()
    # zero-width axes contribute a single value instead of duplicates
    assert grid.shape == (3, 2)
    assert Region([0.0, 1.0], [1.0, 2.0], samples_per_axis=3).grid().shape == (9, 2)
    assert np.all(grid[:, 1] == 1.0)
    assert reg.contains([1.0, 1.0]) and not reg.contains([1.1, 1.0])
    with pytest.raises(ValueError):
        Region(np.zeros(8), np.ones(8), samples_per_axis=7)
    with pytest.raises(ValueError):
        Region([0.0], [-1.0])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 4))
def test_region_random_inside(seed, n):
    rng = np.random.default_rng(seed)
    reg = Region(rng.normal(size=n), rng.uniform(0, 2, n), samples_per_axis=2)
    assert all(reg.contains(q) for q in reg.random(rng, 50))


def test_mass_bounds_point_mass():
    lo, hi = mass_bounds(build_model("point_mass", {"mass": 2.5}), Region([0.0], [1.0]))
    assert lo == hi == 2.5


def test_invalid_models_rejected():
    with pytest.raises(ValueError):
        build_model("nope")
    with pytest.raises(ValueError):
        build_model("planar_manipulator", {"bogus": 1})
    with pytest.raises(DimensionError):
        MechanicalModel("bad", 2, 3, mass=lambda q: np.eye(2), potential=lambda q: 0.0)
    with pytest.raises(ModelInvariantError):
        MechanicalModel("bad", 2, 2, mass=lambda q: np.eye(2), potential=lambda q: 0.0, input_gain=np.zeros((2, 2)))
    neg = MechanicalModel("neg", 1, 1, mass=lambda q: np.array([[-1.0]]), potential=lambda q: 0.0)
    with pytest.raises(ModelInvariantError):
        eval_hamiltonian(neg, [0.0], [1.0])


def test_mass_chain_underactuated_layout():
    model = build_model("mass_chain", {"n": 3, "m": 1})
    assert model.ell == 2
    assert np.allclose(model.input_matrix.ravel(), [0.0, 0.0, 1.0])
