"""Three-compartment transport-reaction-diffusion solver.

Each species ``s`` in (A, T, V) obeys

    dC_s/dt = div(V_s C_s) + div(D_s grad C_s) + (reaction)_s

with the reaction coupling A -> T (k1), T -> V (k2), V -> A (k3) and decay
k0.  One time step is split into an implicit x-sweep, an implicit y-sweep
and an implicit per-cell reaction solve.  Face fluxes use Scharfetter-Gummel
weights, so each sweep is a column diagonally dominant M-matrix: the scheme
is positive and, without boundary exchange, conserves mass exactly.

Sign convention: the flux ``D dC/dx + V C`` appears with a plus sign in the
equation, so species ``s`` drifts with velocity ``-V_s``.  Face fluxes are
written in the standard drift form ``F = -D dC/dx + w C`` with ``w = -V``.

Edge names follow the array display convention (row 0 drawn on top):
``"top"`` is row 0, ``"bottom"`` is row ``ny-1``, ``"left"`` is column 0 and
``"right"`` is column ``nx-1``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import Grid, ParameterSet
from .tridiag import TridiagonalLU

log = logging.getLogger(__name__)

EDGES = ("top", "bottom", "left", "right")
NEGATIVE_TOL = 1e-12


@dataclass(frozen=True)
class ConcentrationState:
    """Concentrations ``c[0:3] = (C_A, C_T, C_V)`` at one time level."""

    grid: Grid
    c: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float)
        if c.shape != (3,) + self.grid.shape:
            raise ValueError(f"state has shape {c.shape}, expected {(3,) + self.grid.shape}")
        object.__setattr__(self, "c", c)

    @property
    def cA(self):
        return self.c[0]

    @property
    def cT(self):
        return self.c[1]

    @property
    def cV(self):
        return self.c[2]

    def mass(self):
        return float(self.c.sum() * self.grid.cell_area)


@dataclass(frozen=True)
class SolverConfig:
    tau: float
    n_steps: int
    k0: float = 0.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("time step must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.k0 < 0:
            raise ValueError("decay rate k0 must be nonnegative")


def _edge_length(grid, edge):
    return grid.nx if edge in ("top", "bottom") else grid.ny


@dataclass
class BoundarySpec:
    """Flux boundary data.

    On inflow cells (``inflow[edge]`` true) the normal flux into the domain
    is ``j_in``; on all other boundary cells mass leaves at rate
    ``v_out * C``.  ``j_in[edge]`` and ``v_out[edge]`` have shape
    ``(3, n_edge)`` in species order (A, T, V).
    """

    grid: Grid
    inflow: dict = field(default_factory=dict)
    j_in: dict = field(default_factory=dict)
    v_out: dict = field(default_factory=dict)

    def __post_init__(self):
        for edge in EDGES:
            n = _edge_length(self.grid, edge)
            mask = np.broadcast_to(np.asarray(self.inflow.get(edge, False), bool), (n,)).copy()
            jin = np.broadcast_to(_species_array(self.j_in.get(edge, 0.0)), (3, n)).astype(float)
            vout = np.broadcast_to(_species_array(self.v_out.get(edge, 0.0)), (3, n)).astype(float)
            if np.any(jin < 0) or np.any(vout < 0):
                raise ValueError(f"j_in and v_out must be nonnegative (edge {edge})")
            self.inflow[edge] = mask
            self.j_in[edge] = jin
            self.v_out[edge] = vout

    @classmethod
    def closed(cls, grid):
        return cls(grid)

    def influx(self, edge):
        """Effective inflow flux, zero off the inflow cells."""
        return np.where(self.inflow[edge], self.j_in[edge], 0.0)

    def outflow(self, edge):
        """Effective outflow speed, zero on the inflow cells."""
        return np.where(self.inflow[edge], 0.0, self.v_out[edge])


def _species_array(v):
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        return v
    if v.ndim == 1 and v.shape[0] == 3:
        return v[:, None]
    return v


def make_boundary(grid, inflow_edges=("bottom",), j_in=0.0, v_out=0.0):
    """Convenience constructor: whole edges marked as inflow, with ``j_in``
    and ``v_out`` given as scalars, per-species triples or dicts keyed by
    edge."""
    def per_edge(v):
        if isinstance(v, dict):
            return {e: v.get(e, 0.0) for e in EDGES}
        return {e: v for e in EDGES}
    return BoundarySpec(grid,
                        inflow={e: (e in inflow_edges) for e in EDGES},
                        j_in=per_edge(j_in), v_out=per_edge(v_out))


def initial_condition(grid, amplitude, n_param=50.0):
    """Arterial bolus ``amplitude * (1 - x1^2) * (N - x2) * x2``.

    ``x1`` runs over [-1, 1] from the first to the last column and ``x2``
    over [0, N] from the first to the last row.  Tissue and vein start
    empty.
    """
    if amplitude < 0:
        raise ValueError("amplitude must be nonnegative")
    x1 = np.linspace(-1.0, 1.0, grid.nx)
    x2 = np.linspace(0.0, n_param, grid.ny)
    ca = amplitude * (1.0 - x1[None, :] ** 2) * (n_param - x2[:, None]) * x2[:, None]
    c = np.zeros((3,) + grid.shape)
    c[0] = np.maximum(ca, 0.0)
    return ConcentrationState(grid, c, 0.0)


_SERIES_B = 1e-4
_SERIES_DB = 1e-3


def bernoulli(x):
    """Bernoulli function ``x / (exp(x) - 1)`` with ``B(0) = 1``."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = np.abs(x) < _SERIES_B
    xs = x[small]
    out[small] = 1.0 - xs / 2.0 + xs ** 2 / 12.0 - xs ** 4 / 720.0
    pos = ~small & (x > 0)
    neg = ~small & (x <= 0)
    xp = x[pos]
    out[pos] = xp * np.exp(-xp) / -np.expm1(-xp)
    out[neg] = x[neg] / np.expm1(x[neg])
    return out if out.ndim else float(out)


def bernoulli_derivative(x):
    """``B'(x) = B(x) (1 - B(-x)) / x``."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = np.abs(x) < _SERIES_DB
    xs = x[small]
    out[small] = -0.5 + xs / 6.0 - xs ** 3 / 180.0 + xs ** 5 / 5040.0
    xb = x[~small]
    out[~small] = bernoulli(xb) * (1.0 - bernoulli(-xb)) / xb
    return out if out.ndim else float(out)


def sg_face_coefficients(d_face, v_face, h):
    """Scharfetter-Gummel weights of the face flux.

    The flux from the left to the right cell is
    ``F = c_left * C_left - c_right * C_right`` and approximates
    ``-d dC/dx + v C``: ``c_left = (d/h) B(-v h/d)``,
    ``c_right = (d/h) B(v h/d)``.  For ``d == 0`` the pure upwind limit is
    returned.
    """
    d, v = np.broadcast_arrays(np.asarray(d_face, float), np.asarray(v_face, float))
    pos = d > 0
    dsafe = np.where(pos, d, 1.0)
    x = np.where(pos, v * h / dsafe, 0.0)
    c_left = np.where(pos, dsafe / h * bernoulli(-x), np.maximum(v, 0.0))
    c_right = np.where(pos, dsafe / h * bernoulli(x), np.maximum(-v, 0.0))
    if c_left.ndim == 0:
        return float(c_left), float(c_right)
    return c_left, c_right


def sg_face_derivatives(d_face, v_face, h):
    """Partial derivatives of the weights of :func:`sg_face_coefficients`.

    Returns ``(dcl_dd, dcl_dv, dcr_dd, dcr_dv)``.  Requires ``d > 0``.
    """
    x = v_face * h / d_face
    bp = bernoulli(x)
    bm = bernoulli(-x)
    dd = bp * bm / h
    return dd, -bernoulli_derivative(-x), dd, bernoulli_derivative(x)


def reaction_matrix(k1, k2, k3, k0):
    """Per-cell 3x3 reaction matrices in the (A, V, T) ordering.

    Columns sum to ``-k0``.  Shape ``(..., 3, 3)``.
    """
    k1, k2, k3 = np.broadcast_arrays(np.asarray(k1, float), np.asarray(k2, float),
                                     np.asarray(k3, float))
    m = np.zeros(k1.shape + (3, 3))
    m[..., 0, 0] = -(k0 + k1)
    m[..., 0, 1] = k3
    m[..., 1, 1] = -(k0 + k3)
    m[..., 1, 2] = k2
    m[..., 2, 0] = k1
    m[..., 2, 2] = -(k0 + k2)
    return m


# (A, V, T) <-> (A, T, V) are both the permutation [0, 2, 1].
_AVT = [0, 2, 1]


class StepOperators:
    """Everything one ADI step needs for a fixed parameter set.

    Parameters are time independent, so the three sub-step systems are
    factored once and reused for every step of a trajectory (and, transposed,
    for the adjoint sweep).
    """

    def __init__(self, p, bc, cfg):
        grid = p.grid
        self.grid, self.cfg, self.bc = grid, cfg, bc
        tau, hx, hy = cfg.tau, grid.hx, grid.hy
        D = p.diffusivities()
        # x faces: (3, ny, nx-1); y faces: (3, ny-1, nx)
        self.dfx = 0.5 * (D[..., :, 1:] + D[..., :, :-1])
        self.dfy = 0.5 * (D[..., 1:, :] + D[..., :-1, :])
        vx, vy = p.velocity_x(), p.velocity_y()
        self.wfx = -0.5 * (vx[..., :, 1:] + vx[..., :, :-1])
        self.wfy = -0.5 * (vy[..., 1:, :] + vy[..., :-1, :])
        if np.any(self.dfx <= 0) or np.any(self.dfy <= 0):
            raise ValueError("diffusivities must be positive")
        self.ax, self.bx = sg_face_coefficients(self.dfx, self.wfx, hx)
        self.ay, self.by = sg_face_coefficients(self.dfy, self.wfy, hy)

        # x sweep: systems along axis -1, batch (3, ny)
        rx = tau / hx
        diag = np.ones((3,) + grid.shape)
        diag[..., :, :-1] += rx * self.ax
        diag[..., :, 1:] += rx * self.bx
        diag[..., :, 0] += rx * bc.outflow("left")
        diag[..., :, -1] += rx * bc.outflow("right")
        lower = np.zeros_like(diag)
        upper = np.zeros_like(diag)
        lower[..., :, 1:] = -rx * self.ax
        upper[..., :, :-1] = -rx * self.bx
        self.lu_x = TridiagonalLU(lower, diag, upper)
        self.src_x = np.zeros((3,) + grid.shape)
        self.src_x[..., :, 0] += rx * bc.influx("left")
        self.src_x[..., :, -1] += rx * bc.influx("right")

        # y sweep: stored transposed so the system axis is last, batch (3, nx)
        ry = tau / hy
        diag = np.ones((3, grid.nx, grid.ny))
        diag[..., :-1] += ry * np.swapaxes(self.ay, -1, -2)
        diag[..., 1:] += ry * np.swapaxes(self.by, -1, -2)
        diag[..., 0] += ry * bc.outflow("top")
        diag[..., -1] += ry * bc.outflow("bottom")
        lower = np.zeros_like(diag)
        upper = np.zeros_like(diag)
        lower[..., 1:] = -ry * np.swapaxes(self.ay, -1, -2)
        upper[..., :-1] = -ry * np.swapaxes(self.by, -1, -2)
        self.lu_y = TridiagonalLU(lower, diag, upper)
        self.src_y = np.zeros((3,) + grid.shape)
        self.src_y[..., 0, :] += ry * bc.influx("top")
        self.src_y[..., -1, :] += ry * bc.influx("bottom")

        # reaction: (I - tau M)^{-1} per cell, converted to (A, T, V) order
        m = reaction_matrix(p.k1, p.k2, p.k3, cfg.k0)
        r = np.eye(3) - tau * m
        r = r[..., _AVT, :][..., :, _AVT]
        self.reaction = r
        self.reaction_inv = np.linalg.inv(r)

    def sweep_x(self, c):
        return self.lu_x.solve(c + self.src_x)

    def sweep_y(self, c):
        ct = np.swapaxes(c + self.src_y, -1, -2)
        return np.swapaxes(self.lu_y.solve(ct), -1, -2)

    def react(self, c):
        return np.einsum("...ij,j...->i...", self.reaction_inv, c)

    def sweep_x_T(self, lam):
        return self.lu_x.solve_transpose(lam)

    def sweep_y_T(self, lam):
        lt = np.swapaxes(lam, -1, -2)
        return np.swapaxes(self.lu_y.solve_transpose(lt), -1, -2)

    def react_T(self, lam):
        return np.einsum("...ji,j...->i...", self.reaction_inv, lam)

    def step(self, c):
        """Return ``(c_new, stage1, stage2)`` for one ADI step."""
        s1 = self.sweep_x(c)
        s2 = self.sweep_y(s1)
        return self.react(s2), s1, s2


def _clamp_negative(c):
    bad = c < -NEGATIVE_TOL
    n = int(bad.sum())
    if n:
        log.warning("%d cells below -%g after ADI step; clamped to zero", n, NEGATIVE_TOL)
        c = np.where(bad, 0.0, c)
    return c, n


def adi_step(state, p, bc, cfg, ops=None):
    """Advance ``state`` by one time step of length ``cfg.tau``."""
    if ops is None:
        ops = StepOperators(p, bc, cfg)
    c, _, _ = ops.step(state.c)
    c, _ = _clamp_negative(c)
    return ConcentrationState(state.grid, c, state.time + cfg.tau)


@dataclass
class Trajectory:
    """States at ``t_k = k*tau``, ``k = 0..n``; ``states`` has shape
    ``(n+1, 3, ny, nx)``.  The two intermediate ADI stages of every step are
    kept for the adjoint sweep."""

    grid: Grid
    tau: float
    states: np.ndarray
    stage1: np.ndarray = None
    stage2: np.ndarray = None
    negative_cells: int = 0
    t0: float = 0.0

    @property
    def n_steps(self):
        return self.states.shape[0] - 1

    @property
    def times(self):
        return self.t0 + self.tau * np.arange(self.n_steps + 1)

    def state(self, k):
        return ConcentrationState(self.grid, self.states[k], self.times[k])

    def __len__(self):
        return self.states.shape[0]

    def masses(self):
        return self.states.sum(axis=(1, 2, 3)) * self.grid.cell_area


def solve_forward(p, c0, bc, cfg, ops=None):
    """Integrate ``cfg.n_steps`` ADI steps from ``c0``."""
    if c0.grid.shape != p.grid.shape:
        raise ValueError("initial state and parameters live on different grids")
    if ops is None:
        ops = StepOperators(p, bc, cfg)
    n = cfg.n_steps
    shape = (3,) + p.grid.shape
    states = np.empty((n + 1,) + shape)
    stage1 = np.empty((n,) + shape)
    stage2 = np.empty((n,) + shape)
    states[0] = c0.c
    negative = 0
    for k in range(n):
        c, stage1[k], stage2[k] = ops.step(states[k])
        states[k + 1], nbad = _clamp_negative(c)
        negative += nbad
    return Trajectory(p.grid, cfg.tau, states, stage1, stage2, negative, c0.time)


def activity(traj):
    """Total activity ``u = C_A + C_T + C_V`` at every time level, ``(n+1, ny, nx)``."""
    states = traj.states if isinstance(traj, Trajectory) else np.asarray(traj)
    return states.sum(axis=1)


def frame_weights(n_steps, n_frames):
    """Sampling matrix ``(n_frames, n_steps+1)`` picking the frame-midpoint state.

    Frames split ``[0, n_steps*tau]`` into equal intervals; when a midpoint
    falls between two time levels the two states are averaged.
    """
    if n_frames < 1 or n_steps % n_frames:
        raise ValueError(f"n_steps={n_steps} must be a positive multiple of n_frames={n_frames}")
    length = n_steps // n_frames
    w = np.zeros((n_frames, n_steps + 1))
    for f in range(n_frames):
        mid2 = 2 * f * length + length  # twice the midpoint index
        if mid2 % 2 == 0:
            w[f, mid2 // 2] = 1.0
        else:
            w[f, mid2 // 2] = 0.5
            w[f, mid2 // 2 + 1] = 0.5
    return w


def frame_activity(traj, n_frames):
    """Activity images of ``n_frames`` uniform frames, ``(n_frames, ny, nx)``."""
    w = frame_weights(traj.n_steps, n_frames)
    return np.einsum("fk,kyx->fyx", w, activity(traj))
