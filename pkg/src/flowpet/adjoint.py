"""Discrete adjoint of the ADI solver and gradients with respect to all
twelve parameter blocks.

The adjoint transposes the discrete forward map step by step, so the
resulting gradient is the exact derivative of the discrete objective.

Adjoint naming follows the multipliers of the continuous optimality
system: ``eta`` pairs with the C_A equation, ``mu`` with C_T and ``gamma``
with C_V.  The discrete states hold ``+dJ/dc``, which is the negative of the
continuous multipliers when the constraint enters the Lagrangian as
``+ <lambda, PDE residual>``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import BLOCKS, ParameterSet, regularizer_gradient
from .forward import StepOperators, frame_weights, sg_face_derivatives

RESIDUAL_FLOOR = 1e-9


@dataclass(frozen=True)
class AdjointState:
    eta: np.ndarray
    mu: np.ndarray
    gamma: np.ndarray


class GradientSet(ParameterSet):
    """Gradient with one value per cell and parameter block (L2 representer)."""

    __slots__ = ()

    def __repr__(self):
        norms = ", ".join(f"{n}={np.abs(v).max():.3g}" for n, v in self.blocks().items())
        return f"GradientSet(max |g|: {norms})"

    def dot(self, direction):
        """Directional derivative ``<g, q>_L2`` for a ``(12, ny, nx)`` direction."""
        q = direction.values if isinstance(direction, ParameterSet) else np.asarray(direction)
        return float(self.grid.cell_area * np.sum(self.values * q))


@dataclass
class AdjointTrajectory:
    """Adjoint states ``lam[k]`` of the time levels plus the adjoints of the
    three sub-step right-hand sides of every step (needed for the gradient):
    ``rhs_x[k]``, ``rhs_y[k]``, ``rhs_r[k]`` for the x-sweep, y-sweep and
    reaction solve of step ``k``."""

    lam: np.ndarray
    rhs_x: np.ndarray
    rhs_y: np.ndarray
    rhs_r: np.ndarray

    def __len__(self):
        return self.lam.shape[0]

    def state(self, k):
        return AdjointState(*self.lam[k])

    @property
    def states(self):
        return [self.state(k) for k in range(len(self))]


def residual_weight(u, u_half, u_k, sens, floor=RESIDUAL_FLOOR):
    """Weighted residual ``sens * (u - u_half) / max(u_k, floor)``."""
    return sens * (np.asarray(u) - u_half) / np.maximum(u_k, floor)


def state_sources(frame_residual, n_steps):
    """Spread per-frame residuals ``(F, ny, nx)`` onto the time levels."""
    w = frame_weights(n_steps, frame_residual.shape[0])
    return np.einsum("fk,fyx->kyx", w, frame_residual)


def solve_adjoint(p, traj, sources, cfg, bc=None, ops=None):
    """Backward sweep of the transposed ADI steps.

    Parameters
    ----------
    sources : ndarray
        ``dPhi/du`` at every time level, shape ``(n+1, ny, nx)``, or per
        species ``(n+1, 3, ny, nx)``.  Activity sources act on all three
        species alike since ``u = C_A + C_T + C_V``.
    """
    if ops is None:
        if bc is None:
            raise ValueError("need either the step operators or the boundary conditions")
        ops = StepOperators(p, bc, cfg)
    n = traj.n_steps
    if cfg.n_steps != n or abs(cfg.tau - traj.tau) > 0:
        raise ValueError("trajectory does not match solver configuration")
    src = np.asarray(sources, dtype=float)
    if src.ndim == 3:
        src = np.broadcast_to(src[:, None], (n + 1, 3) + p.grid.shape)
    if src.shape[0] != n + 1:
        raise ValueError(f"expected sources for {n + 1} time levels, got {src.shape[0]}")
    shape = (3,) + p.grid.shape
    lam = np.empty((n + 1,) + shape)
    rhs_x = np.empty((n,) + shape)
    rhs_y = np.empty((n,) + shape)
    rhs_r = np.empty((n,) + shape)
    lam[n] = src[n]
    for k in range(n - 1, -1, -1):
        rhs_r[k] = ops.react_T(lam[k + 1])
        rhs_y[k] = ops.sweep_y_T(rhs_r[k])
        rhs_x[k] = ops.sweep_x_T(rhs_y[k])
        lam[k] = rhs_x[k] + src[k]
    return AdjointTrajectory(lam, rhs_x, rhs_y, rhs_r)


def data_gradient(p, traj, adj, cfg, ops=None):
    """Per-cell derivative ``dPhi/dp`` of the data term, ``(12, ny, nx)``.

    Every sub-step solves ``A y = b``; its contribution is
    ``-rho^T (dA/dp) y`` with ``rho`` the adjoint of ``b``.
    """
    grid = p.grid
    tau = cfg.tau
    states_next = traj.states[1:]
    g = np.zeros((len(BLOCKS),) + grid.shape)

    # reaction: R = I - tau*M,  -rho^T dR x = tau * rho^T dM x
    rho = adj.rhs_r
    cA, cT, cV = states_next[:, 0], states_next[:, 1], states_next[:, 2]
    g[0] = tau * np.sum(cA * (rho[:, 1] - rho[:, 0]), axis=0)
    g[1] = tau * np.sum(cT * (rho[:, 2] - rho[:, 1]), axis=0)
    g[2] = tau * np.sum(cV * (rho[:, 0] - rho[:, 2]), axis=0)

    if ops is None:
        ops = _FaceData(p, cfg)

    # x sweep: faces between columns i and i+1
    y = traj.stage1
    rho = adj.rhs_x
    jump = rho[..., :-1] - rho[..., 1:]
    r = tau / grid.hx
    s_left = -r * np.sum(jump * y[..., :-1], axis=0)
    s_right = r * np.sum(jump * y[..., 1:], axis=0)
    gd, gw = _chain_faces(s_left, s_right, ops.dfx, ops.wfx, grid.hx)
    _scatter(g, gd, gw, axis=-1, vel=[6, 8, 10])

    # y sweep: faces between rows j and j+1
    y = traj.stage2
    rho = adj.rhs_y
    jump = rho[..., :-1, :] - rho[..., 1:, :]
    r = tau / grid.hy
    s_left = -r * np.sum(jump * y[..., :-1, :], axis=0)
    s_right = r * np.sum(jump * y[..., 1:, :], axis=0)
    gd, gw = _chain_faces(s_left, s_right, ops.dfy, ops.wfy, grid.hy)
    _scatter(g, gd, gw, axis=-2, vel=[7, 9, 11])
    return g


class _FaceData:
    def __init__(self, p, cfg):
        D = p.diffusivities()
        vx, vy = p.velocity_x(), p.velocity_y()
        self.dfx = 0.5 * (D[..., :, 1:] + D[..., :, :-1])
        self.dfy = 0.5 * (D[..., 1:, :] + D[..., :-1, :])
        self.wfx = -0.5 * (vx[..., :, 1:] + vx[..., :, :-1])
        self.wfy = -0.5 * (vy[..., 1:, :] + vy[..., :-1, :])


def _chain_faces(s_left, s_right, d_face, w_face, h):
    dl_dd, dl_dw, dr_dd, dr_dw = sg_face_derivatives(d_face, w_face, h)
    return s_left * dl_dd + s_right * dr_dd, s_left * dl_dw + s_right * dr_dw


def _scatter(g, gd, gw, axis, vel):
    """Face derivatives -> cell derivatives (face value = mean of the two
    cells; face drift = minus the mean velocity)."""
    full = slice(None)
    if axis == -1:
        lo, hi = (full, slice(None, -1)), (full, slice(1, None))
    else:
        lo, hi = (slice(None, -1), full), (slice(1, None), full)
    for s in range(3):
        g[(3 + s,) + lo] += 0.5 * gd[s]
        g[(3 + s,) + hi] += 0.5 * gd[s]
        g[(vel[s],) + lo] -= 0.5 * gw[s]
        g[(vel[s],) + hi] -= 0.5 * gw[s]


def assemble_gradient(p, traj, adj, cfg, reg=None, alpha=1.0, ops=None):
    """L2 gradient of ``Phi(p) + alpha * R(p)``.

    ``Phi`` is the data term whose sources were fed to :func:`solve_adjoint`.
    """
    g = data_gradient(p, traj, adj, cfg, ops) / p.grid.cell_area
    if reg is not None and alpha:
        g = g + alpha * regularizer_gradient(p, reg)
    return GradientSet(p.grid, g)


def finite_difference_gradient(objective, p, directions, eps):
    """Central-difference directional derivatives ``(J(p+eps q) - J(p-eps q)) / (2 eps)``.

    ``directions`` is a sequence of ``(12, ny, nx)`` arrays (or a single
    one); returns an array with one entry per direction.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    single = isinstance(directions, np.ndarray) and directions.ndim == 3
    dirs = [directions] if single else list(directions)
    out = []
    for q in dirs:
        q = q.values if isinstance(q, ParameterSet) else np.asarray(q, float)
        if not np.any(q):
            out.append(0.0)
            continue
        jp = objective(p.with_values(p.values + eps * q))
        jm = objective(p.with_values(p.values - eps * q))
        out.append((jp - jm) / (2.0 * eps))
    return np.array(out)


def cell_directions(p, cells, scale=None):
    """Unit directions for single (block, row, column) entries, optionally
    scaled per block."""
    dirs = []
    for b, j, i in cells:
        b = BLOCKS.index(b) if isinstance(b, str) else b
        q = np.zeros_like(p.values)
        q[b, j, i] = 1.0 if scale is None else scale[b]
        dirs.append(q)
    return dirs


# Linear propagator (no inflow) and its transpose, used for dot-product checks.

def propagate(ops, c0, n_steps):
    """Apply ``n_steps`` homogeneous ADI steps (inflow sources dropped)."""
    c = np.array(c0, dtype=float)
    for _ in range(n_steps):
        s1 = ops.lu_x.solve(c)
        s2 = np.swapaxes(ops.lu_y.solve(np.swapaxes(s1, -1, -2)), -1, -2)
        c = ops.react(s2)
    return c


def propagate_adjoint(ops, lam, n_steps):
    """Transpose of :func:`propagate`."""
    lam = np.array(lam, dtype=float)
    for _ in range(n_steps):
        lam = ops.sweep_x_T(ops.sweep_y_T(ops.react_T(lam)))
    return lam
