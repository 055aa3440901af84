import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowpet.core import ParameterSet, build_grid
from flowpet.forward import (BoundarySpec, ConcentrationState, SolverConfig, StepOperators,
                             activity, adi_step, bernoulli, bernoulli_derivative,
                             frame_activity, frame_weights, initial_condition, make_boundary,
                             reaction_matrix, sg_face_coefficients, solve_forward)
from flowpet.phantoms import PRESETS, phantom
from helpers import dense_adi_step, random_problem

B1 = 1.0 / (math.e - 1.0)  # 0.581976706869...


def test_bernoulli_values():
    assert bernoulli(0.0) == 1.0
    assert bernoulli(1.0) == pytest.approx(0.581976706869, abs=1e-12)
    assert bernoulli(-1.0) == pytest.approx(1.581976706869, abs=1e-12)
    assert bernoulli(1.0) == pytest.approx(B1, rel=1e-15)
    assert bernoulli(800.0) == pytest.approx(800.0 * math.exp(-800.0), rel=1e-12, abs=1e-300)
    assert bernoulli(-800.0) == pytest.approx(800.0, rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 50))
def test_bernoulli_identity_and_derivative(x):
    assert bernoulli(-x) == pytest.approx(bernoulli(x) + x, rel=1e-12, abs=1e-12)
    h = 1e-6
    fd = (bernoulli(x + h) - bernoulli(x - h)) / (2 * h)
    assert bernoulli_derivative(x) == pytest.approx(fd, rel=1e-6, abs=1e-8)


def test_series_branches_are_continuous():
    for edge in (1e-4, 1e-3):
        xs = np.array([edge * (1 - 1e-9), edge * (1 + 1e-9)])
        assert abs(np.diff(bernoulli(xs))[0]) < 1e-12
        assert abs(np.diff(bernoulli_derivative(xs))[0]) < 1e-10


def test_sg_weights_unit_peclet():
    # d = h = 1, v = 1: F = B(-1) C_L - B(1) C_R
    cl, cr = sg_face_coefficients(1.0, 1.0, 1.0)
    assert cl == pytest.approx(1.581976706869, abs=1e-12)
    assert cr == pytest.approx(0.581976706869, abs=1e-12)


def test_sg_weights_upwind_limit():
    d, h = 1e-3, 1.0
    v = 50 * d / h
    cl, cr = sg_face_coefficients(d, v, h)
    assert cl == pytest.approx(v, rel=1e-12)
    assert cr == pytest.approx(v * math.exp(-50), rel=1e-9)
    # d = 0 gives the pure upwind flux
    assert sg_face_coefficients(0.0, 2.0, 1.0) == (2.0, 0.0)
    assert sg_face_coefficients(0.0, -2.0, 1.0) == (0.0, 2.0)


def test_sg_weights_pure_diffusion():
    cl, cr = sg_face_coefficients(0.3, 0.0, 0.5)
    assert cl == cr == pytest.approx(0.6, rel=1e-15)


def test_reaction_columns_sum_to_minus_decay():
    m = reaction_matrix(0.9, 0.75, 0.9, 0.1)
    np.testing.assert_allclose(m.sum(axis=0), -0.1, rtol=1e-15)


def test_initial_condition_centre_value():
    g = build_grid(5, 5, 1.0, 1.0)
    c0 = initial_condition(g, 3e-5, 50.0)
    # centre: x1 = 0, x2 = 25 -> 3e-5 * 1 * 25 * 25
    assert c0.cA[2, 2] == pytest.approx(0.01875, rel=1e-14)
    assert np.all(c0.cA[:, 0] == 0) and np.all(c0.cA[0] == 0)
    assert np.all(c0.cT == 0) and np.all(c0.cV == 0)
    with pytest.raises(ValueError):
        initial_condition(g, -1.0)


def test_pure_decay_single_step():
    g = build_grid(3, 3, 1.0, 1.0)
    p = ParameterSet.constant(g, dA=0.1, dT=0.1, dV=0.1)
    c0 = ConcentrationState(g, np.ones((3, 3, 3)))
    out = adi_step(c0, p, BoundarySpec.closed(g), SolverConfig(1.0, 1, k0=0.1))
    np.testing.assert_allclose(out.c, 1 / 1.1, rtol=1e-14)
    assert out.time == 1.0


@pytest.mark.parametrize("shape,seed", [((4, 4), 0), ((3, 4), 1), ((4, 2), 2), ((2, 3), 3)])
def test_adi_step_matches_dense_oracle(shape, seed):
    ny, nx = shape
    p, bc, c = random_problem(nx, ny, seed)
    tau = 0.1
    got = adi_step(ConcentrationState(p.grid, c), p, bc, SolverConfig(tau, 1, 0.1)).c
    want = dense_adi_step(c, p, bc, tau, 0.1)
    assert np.max(np.abs(got - want)) <= 1e-12 * np.max(np.abs(want))


def test_uniform_state_unchanged_without_flow():
    g = build_grid(4, 4, 1.0, 1.0)
    p = ParameterSet.constant(g, dA=0.2, dT=0.2, dV=0.2)
    c = np.ones((3, 4, 4))
    ops = StepOperators(p, BoundarySpec.closed(g), SolverConfig(0.5, 1))
    np.testing.assert_allclose(ops.step(c)[0], c, rtol=1e-14)


def _closed_run(k0, n_steps, seed=0):
    p, _, c = random_problem(6, 5, seed)
    bc = BoundarySpec.closed(p.grid)
    cfg = SolverConfig(0.05, n_steps, k0)
    return solve_forward(p, ConcentrationState(p.grid, c), bc, cfg)


def test_mass_conserved_in_closed_domain():
    traj = _closed_run(0.0, 300)
    m = traj.masses()
    assert np.max(np.abs(m / m[0] - 1)) <= 1e-12


def test_mass_decays_geometrically():
    traj = _closed_run(0.3, 200)
    m = traj.masses()
    want = m[0] / (1 + 0.05 * 0.3) ** np.arange(201)
    np.testing.assert_allclose(m, want, rtol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.01, 5.0))
def test_positivity_for_random_parameters(seed, tau):
    p, bc, c = random_problem(5, 4, seed)
    traj = solve_forward(p, ConcentrationState(p.grid, c), bc, SolverConfig(tau, 5, 0.05))
    assert traj.negative_cells == 0
    assert traj.states.min() >= 0.0


@pytest.mark.parametrize("preset", PRESETS)
def test_positivity_on_phantoms(preset):
    g = build_grid(8, 8, 1400.0, 1400.0)
    p = phantom(preset, g)
    bc = make_boundary(g, ("bottom",), j_in=(125.0, 0.0, 0.0),
                       v_out={"top": (700.0, 0.0, 700.0), "right": (0.0, 50.0, 0.0)})
    traj = solve_forward(p, initial_condition(g, 0.2), bc, SolverConfig(0.2, 50))
    assert traj.negative_cells == 0 and traj.states.min() >= -1e-12


def test_inflow_adds_mass_at_expected_rate():
    # one y-sweep's worth of inflow: j_in * edge length * tau enters per step
    g = build_grid(4, 4, 2.0, 2.0)
    p = ParameterSet.constant(g, dA=1e-3, dT=1e-3, dV=1e-3)
    bc = make_boundary(g, ("bottom",), j_in=(2.0, 0.0, 0.0))
    traj = solve_forward(p, ConcentrationState(g, np.zeros((3, 4, 4))), bc, SolverConfig(0.1, 3))
    np.testing.assert_allclose(np.diff(traj.masses()), 2.0 * 2.0 * 0.1, rtol=1e-13)


def test_boundary_rejects_negative_rates():
    g = build_grid(2, 2, 1, 1)
    with pytest.raises(ValueError):
        make_boundary(g, ("bottom",), j_in=-1.0)


def test_frame_weights_midpoints():
    w = frame_weights(4, 2)
    np.testing.assert_array_equal(w, [[0, 1, 0, 0, 0], [0, 0, 0, 1, 0]])
    w = frame_weights(3, 3)
    np.testing.assert_array_equal(w, [[0.5, 0.5, 0, 0], [0, 0.5, 0.5, 0], [0, 0, 0.5, 0.5]])
    with pytest.raises(ValueError):
        frame_weights(5, 2)


def test_activity_sums_species():
    p, bc, c = random_problem(3, 3, 4)
    traj = solve_forward(p, ConcentrationState(p.grid, c), bc, SolverConfig(0.1, 4))
    np.testing.assert_allclose(activity(traj), traj.states.sum(axis=1))
    assert frame_activity(traj, 2).shape == (2, 3, 3)


def test_solver_config_validation():
    for kw in ({"tau": 0, "n_steps": 1}, {"tau": 1, "n_steps": 0},
               {"tau": 1, "n_steps": 1, "k0": -1}):
        with pytest.raises(ValueError):
            SolverConfig(**kw)
