import csv

import numpy as np
import pytest
import scipy.sparse as sps
from hypothesis import given, settings, strategies as st

from flowpet.core import Bounds, ParameterSet, RegularizerConfig, build_grid
from flowpet.forward import ConcentrationState, SolverConfig
from flowpet.pet import Projector, SinogramSequence, build_projector
from flowpet.recon import (Problem, ReconConfig, ReconReport, _Surrogate, em_half_step,
                           forward_backward_update, objective, parameter_half_step, reconstruct)
from helpers import dense_neumann_laplacian, random_problem

K_ONLY = {"k1": True, "k2": True, "k3": True}


def _diag_projector(value=2.0):
    g = build_grid(2, 2, 1.0, 1.0)
    return Projector(g, value * np.eye(4), [0.0], 1.0, 4)


def test_scalar_em_update():
    K = _diag_projector(2.0)
    u = np.full((1, 2, 2), 3.0)
    f = np.full((1, 1, 4), 12.0)
    u_half, floored = em_half_step(u, K, f)
    np.testing.assert_allclose(u_half, 6.0, rtol=1e-15)
    assert floored == 0


def _random_projector(rng, grid, n_rows):
    m = sps.random(n_rows, grid.size, density=0.4, random_state=rng,
                   data_rvs=lambda n: rng.uniform(0.1, 1.0, n)).toarray()
    m[0] += 0.05  # every pixel seen
    m[:, 0] += 0.05  # every bin sees a pixel
    return Projector(grid, m, np.zeros(1), 1.0, n_rows)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_em_fixed_point_and_count_matching(seed):
    rng = np.random.default_rng(seed)
    g = build_grid(3, 4, 1.0, 1.0)
    K = _random_projector(rng, g, 10)
    u = rng.uniform(0.1, 2.0, (3,) + g.shape)
    f = K.project(u)
    u_half, _ = em_half_step(u, K, f)
    np.testing.assert_allclose(u_half, u, rtol=1e-8)
    counts = rng.poisson(5.0, f.shape).astype(float)
    u_half, _ = em_half_step(u, K, counts)
    np.testing.assert_allclose(K.project(u_half).sum(axis=(1, 2)), counts.sum(axis=(1, 2)),
                               rtol=1e-8)
    assert np.all(u_half >= 0)


def test_em_keeps_zero_cells_and_unseen_cells():
    g = build_grid(2, 2, 1.0, 1.0)
    m = np.diag([1.0, 1.0, 1.0, 0.0])
    K = Projector(g, m, [0.0], 1.0, 4)
    u = np.array([[[0.0, 1.0], [2.0, 5.0]]])
    u_half, _ = em_half_step(u, K, np.array([[[3.0, 4.0, 4.0, 0.0]]]))
    assert u_half[0, 0, 0] == 0.0
    assert u_half[0, 1, 1] == 5.0
    np.testing.assert_allclose(u_half[0, 0, 1], 4.0)


def _cfg(grid, a=0.3, x=0.05, **kw):
    rng = np.random.default_rng(4)
    prior = ParameterSet(grid, rng.uniform(0.5, 1.5, (12,) + grid.shape))
    reg = RegularizerConfig(prior, alpha=rng.uniform(0, 1, 12), xi=rng.uniform(0, 0.2, 12))
    return ReconConfig(reg, alpha=a / 0.3, bounds=Bounds(k_max=1e6, v_max=1e6, d_max=1e6),
                       **kw)


@pytest.mark.parametrize("shape", [(4, 4), (6, 6), (3, 5)])
def test_inner_update_matches_dense_solve(shape):
    ny, nx = shape
    g = build_grid(nx, ny, 1.2, 0.9)
    cfg = _cfg(g)
    rng = np.random.default_rng(5)
    p = ParameterSet(g, rng.uniform(0.5, 1.5, (12,) + g.shape))
    grad = rng.standard_normal(p.values.shape)
    steps = rng.uniform(0.1, 2.0, 12)
    got = forward_backward_update(p, grad, steps, cfg).values
    L = dense_neumann_laplacian(g)
    a_eff, x_eff = cfg.block_weights()
    for i in range(12):
        t = steps[i]
        A = (1 + 2 * a_eff[i] * t) * np.eye(g.size) - 2 * x_eff[i] * t * L
        rhs = p.values[i] - t * grad[i] + 2 * a_eff[i] * t * cfg.regularizer.prior.values[i]
        want = np.linalg.solve(A, rhs.ravel()).reshape(g.shape)
        want = np.clip(want, cfg.bounds.lower()[i], cfg.bounds.upper()[i])
        np.testing.assert_allclose(got[i], want, rtol=1e-12, atol=1e-12)


def test_inner_update_projects_onto_bounds():
    g = build_grid(3, 3, 1.0, 1.0)
    reg = RegularizerConfig(ParameterSet.constant(g, k1=0.5, dA=0.1, dT=0.1, dV=0.1))
    cfg = ReconConfig(reg, bounds=Bounds())
    grad = np.zeros((12, 3, 3))
    grad[0] = 100.0
    q = forward_backward_update(reg.prior, grad, np.ones(12), cfg)
    assert np.all(q.k1 == 0.0)
    # frozen block stays put
    steps = np.ones(12)
    steps[0] = 0.0
    assert np.all(forward_backward_update(reg.prior, grad, steps, cfg).k1 == 0.5)


def _toy(seed=0, truth_scale=1.15, nx=6, ny=6, n_steps=10, n_frames=5, count_scale=1e4):
    p, bc, c = random_problem(nx, ny, seed)
    solver = SolverConfig(0.1, n_steps, 0.05)
    K = build_projector(p.grid, 6, 9)
    c0 = ConcentrationState(p.grid, c)
    truth = p.replace(k1=p.k1 * truth_scale, k2=p.k2 / truth_scale)
    blank = SinogramSequence(np.zeros((n_frames,) + K.sino_shape))
    _, _, U = Problem(K, blank, c0, bc, solver).simulate(truth)
    counts = SinogramSequence(count_scale * K.project(U), 1.0, count_scale)
    return p, truth, K, c0, bc, solver, counts


def test_stationary_start_stays_put():
    p, _, K, c0, bc, solver, _ = _toy()
    blank = SinogramSequence(np.zeros((5,) + K.sino_shape))
    _, _, U = Problem(K, blank, c0, bc, solver).simulate(p)
    counts = SinogramSequence(1e4 * K.project(U), 1.0, 1e4)
    # p varies in space, so only the prior term leaves p stationary
    reg = RegularizerConfig(p, alpha=1e3, xi=0.0)
    cfg = ReconConfig(reg, n_outer=3, n_inner=3, active=K_ONLY, outer_tol=0.0)
    q, report = reconstruct(counts, K, c0, bc, solver, cfg)
    assert np.max(np.abs(q.values - p.values)) <= 1e-8 * np.max(np.abs(p.values))
    assert len(report) == 4


@pytest.mark.parametrize("rule", ["fixed", "bb", "fista"])
def test_inner_steps_decrease_surrogate(rule):
    p, _, K, c0, bc, solver, counts = _toy()
    reg = RegularizerConfig(p, alpha=1e-6, xi=1e-6)
    cfg = ReconConfig(reg, n_inner=5, active=K_ONLY, step_rule=rule, tau_inner=1e-3)
    prob = Problem(K, counts, c0, bc, solver)
    _, _, U = prob.simulate(p)
    u_half, _ = em_half_step(U, prob.K, counts)
    w = prob.K.sensitivity / np.maximum(U, 1e-9)
    sur = _Surrogate(prob, u_half, w, cfg)
    before = sur.evaluate(p)[0]
    stats = {}
    q = parameter_half_step(p, u_half, w, prob, cfg, stats)
    after = sur.evaluate(q)[0]
    assert after < before
    assert stats["surrogate"] == pytest.approx(after, rel=1e-12)
    assert np.array_equal(q.values[3:], p.values[3:])


def test_reconstruction_reduces_objective_and_moves_toward_truth():
    p, truth, K, c0, bc, solver, counts = _toy()
    reg = RegularizerConfig(p, alpha=1e-8, xi=1e-8)
    cfg = ReconConfig(reg, n_outer=15, n_inner=10, active=K_ONLY, step_rule="fista",
                      tau_inner=1e-3, outer_tol=0.0)
    q, report = reconstruct(counts, K, c0, bc, solver, cfg)
    J = report.objective
    assert np.all(np.diff(J) <= 1e-8 * np.abs(J[:-1]))
    assert J[-1] < J[0]
    err0 = np.linalg.norm(p.values[:3] - truth.values[:3])
    err1 = np.linalg.norm(q.values[:3] - truth.values[:3])
    assert err1 < 0.5 * err0


def test_reconstruction_is_deterministic(tmp_path):
    p, _, K, c0, bc, solver, counts = _toy(seed=1)
    reg = RegularizerConfig(p, alpha=1e-6, xi=1e-6)
    cfg = ReconConfig(reg, n_outer=3, n_inner=4, active=K_ONLY, tau_inner=1e-3)
    a, ra = reconstruct(counts, K, c0, bc, solver, cfg, checkpoint_dir=tmp_path,
                        checkpoint_every=1)
    b, rb = reconstruct(counts, K, c0, bc, solver, cfg)
    assert np.array_equal(a.values, b.values)
    assert np.array_equal(ra.objective, rb.objective)
    assert (tmp_path / "iter_0002" / "k1.fld").exists()
    with open(tmp_path / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and float(rows[-1]["objective"]) == rb.objective[-1]


def test_reconstruct_refuses_empty_data():
    p, _, K, c0, bc, solver, counts = _toy()
    empty = SinogramSequence(np.zeros_like(counts.frames))
    with pytest.raises(ValueError, match="no counts"):
        reconstruct(empty, K, c0, bc, solver, ReconConfig(RegularizerConfig(p)))


def test_objective_includes_weighted_regularizer():
    p, _, K, c0, bc, solver, counts = _toy()
    reg = RegularizerConfig(p.replace(k1=p.k1 + 1.0), alpha=2.0)
    prob = Problem(K, counts, c0, bc, solver)
    J, data, r, _, _ = objective(p, prob, ReconConfig(reg, alpha=0.5), full_output=True)
    assert r == pytest.approx(0.5 * 2.0 * p.grid.size * p.grid.cell_area, rel=1e-12)
    assert J == data + r


def test_config_validation():
    g = build_grid(2, 2, 1, 1)
    reg = RegularizerConfig(ParameterSet.constant(g))
    for kw in ({"n_outer": 0}, {"tau_inner": 0.0}, {"alpha": -1.0}, {"step_rule": "newton"},
               {"block_steps": -1.0}):
        with pytest.raises(ValueError):
            ReconConfig(reg, **kw)
    cfg = ReconConfig(reg, active={"k3": True}, block_steps={"k2": 0.5}, tau_inner=4.0)
    assert cfg.active.tolist() == [False, False, True] + [False] * 9
    assert cfg.block_steps[1] == 0.5 and cfg.block_steps[0] == 1.0
    assert cfg.eta_damp == 0.25


def test_report_csv(tmp_path):
    rep = ReconReport()
    assert len(rep) == 0 and rep.objective.size == 0
    rep.to_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().startswith("iteration,objective")
