"""Dense reference implementations used as independent oracles."""
import math

import numpy as np

from flowpet.core import build_grid, ParameterSet
from flowpet.forward import make_boundary


def bern(z):
    return 1.0 if z == 0 else z / math.expm1(z)


def cell_index(grid, j, i):
    return j * grid.nx + i


def dense_sweep(p, bc, tau, species, axis):
    """Matrix and source of one implicit transport sweep, assembled face by face."""
    g = p.grid
    n = g.size
    A = np.eye(n)
    src = np.zeros(n)
    D = p.diffusivities()[species]
    if axis == "x":
        v = p.velocity_x()[species]
        h = g.hx
        faces = [((j, i), (j, i + 1)) for j in range(g.ny) for i in range(g.nx - 1)]
        first, last = "left", "right"
    else:
        v = p.velocity_y()[species]
        h = g.hy
        faces = [((j, i), (j + 1, i)) for j in range(g.ny - 1) for i in range(g.nx)]
        first, last = "top", "bottom"
    r = tau / h
    for (jl, il), (jr, ir) in faces:
        d = 0.5 * (D[jl, il] + D[jr, ir])
        w = -0.5 * (v[jl, il] + v[jr, ir])
        x = w * h / d
        cl, cr = d / h * bern(-x), d / h * bern(x)
        L, R = cell_index(g, jl, il), cell_index(g, jr, ir)
        A[L, L] += r * cl
        A[L, R] -= r * cr
        A[R, R] += r * cr
        A[R, L] -= r * cl
    for edge in (first, last):
        for m in range(g.ny if axis == "x" else g.nx):
            if axis == "x":
                j, i = m, (0 if edge == "left" else g.nx - 1)
            else:
                j, i = (0 if edge == "top" else g.ny - 1), m
            c = cell_index(g, j, i)
            if bc.inflow[edge][m]:
                src[c] += r * bc.j_in[edge][species, m]
            else:
                A[c, c] += r * bc.v_out[edge][species, m]
    return A, src


def dense_reaction(k1, k2, k3, k0, tau):
    """``I - tau M`` in species order (A, T, V)."""
    M = np.array([[-(k0 + k1), 0.0, k3],
                  [k1, -(k0 + k2), 0.0],
                  [0.0, k2, -(k0 + k3)]])
    return np.eye(3) - tau * M


def dense_adi_step(c, p, bc, tau, k0):
    g = p.grid
    out = np.empty_like(c)
    stage = np.empty_like(c)
    for s in range(3):
        Ax, sx = dense_sweep(p, bc, tau, s, "x")
        Ay, sy = dense_sweep(p, bc, tau, s, "y")
        y1 = np.linalg.solve(Ax, c[s].ravel() + sx)
        stage[s] = np.linalg.solve(Ay, y1 + sy).reshape(g.shape)
    for j in range(g.ny):
        for i in range(g.nx):
            R = dense_reaction(p.k1[j, i], p.k2[j, i], p.k3[j, i], k0, tau)
            out[:, j, i] = np.linalg.solve(R, stage[:, j, i])
    return out


def dense_neumann_laplacian(grid):
    n = grid.size
    L = np.zeros((n, n))
    for j in range(grid.ny):
        for i in range(grid.nx):
            a = cell_index(grid, j, i)
            for dj, di, h in ((0, 1, grid.hx), (1, 0, grid.hy)):
                jj, ii = j + dj, i + di
                if jj < grid.ny and ii < grid.nx:
                    b = cell_index(grid, jj, ii)
                    L[a, a] -= 1 / h ** 2
                    L[b, b] -= 1 / h ** 2
                    L[a, b] += 1 / h ** 2
                    L[b, a] += 1 / h ** 2
    return L


def random_problem(nx=4, ny=4, seed=0, extent=1.0, k0=0.1):
    """Spatially varying parameters with moderate cell Peclet numbers and a
    boundary with inflow on the bottom and outflow elsewhere."""
    rng = np.random.default_rng(seed)
    grid = build_grid(nx, ny, extent, extent)
    base = np.array([0.9, 0.75, 0.9, 0.05, 0.02, 0.05, 0.2, 5.0, -0.36, 0.2, -0.2, 2.0])
    vals = base[:, None, None] * (1 + 0.3 * rng.uniform(-1, 1, (12, ny, nx)))
    p = ParameterSet(grid, vals)
    bc = make_boundary(grid, ("bottom",), j_in=(0.05, 0.01, 0.0), v_out=(1.0, 0.5, 1.0))
    c = rng.uniform(0.1, 1.0, (3, ny, nx))
    return p, bc, c
