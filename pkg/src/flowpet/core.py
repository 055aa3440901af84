"""Grids, parameter fields, the feasible set and the quadratic regularizer.

Fields are plain ``numpy`` arrays of shape ``(ny, nx)``: row ``j`` holds the
cells with centre ``y = origin_y + j*hy`` and column ``i`` the cells with
centre ``x = origin_x + i*hx``.  Vector fields carry a leading axis of
length two (x- and y-component).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import fft

# Order of the twelve scalar parameter blocks.  Species order is (A, T, V).
BLOCKS = (
    "k1", "k2", "k3",
    "dA", "dT", "dV",
    "vA_x", "vA_y", "vT_x", "vT_y", "vV_x", "vV_y",
)
BLOCK_INDEX = {name: i for i, name in enumerate(BLOCKS)}
RATE_BLOCKS = slice(0, 3)
DIFFUSION_BLOCKS = slice(3, 6)
VELOCITY_BLOCKS = slice(6, 12)
SPECIES = ("A", "T", "V")


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centred grid on a rectangle (lengths in cm)."""

    nx: int
    ny: int
    hx: float
    hy: float
    origin: tuple[float, float] = None

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"grid needs at least 2x2 cells, got {self.nx}x{self.ny}")
        if not (self.hx > 0 and self.hy > 0):
            raise ValueError("cell spacing must be positive")
        if self.origin is None:
            object.__setattr__(self, "origin", (0.5 * self.hx, 0.5 * self.hy))

    @property
    def shape(self):
        return (self.ny, self.nx)

    @property
    def size(self):
        return self.nx * self.ny

    @property
    def cell_area(self):
        return self.hx * self.hy

    @property
    def extent(self):
        return (self.nx * self.hx, self.ny * self.hy)

    def centers(self):
        """Return ``(X, Y)`` arrays of cell-centre coordinates."""
        x = self.origin[0] + self.hx * np.arange(self.nx)
        y = self.origin[1] + self.hy * np.arange(self.ny)
        return np.meshgrid(x, y)

    def zeros(self):
        return np.zeros(self.shape)

    def check_field(self, a, name="field"):
        a = np.asarray(a, dtype=float)
        if a.shape != self.shape:
            raise ValueError(f"{name} has shape {a.shape}, grid expects {self.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError(f"{name} contains non-finite values")
        return a


def build_grid(nx, ny, lx, ly):
    """Grid with ``nx*ny`` cells covering ``[0, lx] x [0, ly]``."""
    if nx < 2 or ny < 2:
        raise ValueError("nx and ny must be >= 2")
    if not (lx > 0 and ly > 0):
        raise ValueError("domain lengths must be positive")
    return Grid(int(nx), int(ny), lx / nx, ly / ny)


@dataclass(frozen=True)
class Bounds:
    """Box constraints defining the admissible parameter set."""

    d_min: float = 1e-9
    d_max: float = 1.0
    v_max: float = 1e4
    k_max: float = 10.0

    def __post_init__(self):
        if not (0 < self.d_min <= self.d_max):
            raise ValueError("need 0 < d_min <= d_max")
        if self.v_max <= 0 or self.k_max <= 0:
            raise ValueError("v_max and k_max must be positive")

    def lower(self):
        return np.array([0.0] * 3 + [self.d_min] * 3 + [-self.v_max] * 6)

    def upper(self):
        return np.array([self.k_max] * 3 + [self.d_max] * 3 + [self.v_max] * 6)


class ParameterSet:
    """The twelve spatial parameter fields, stored as one ``(12, ny, nx)`` array.

    Blocks are ``k1, k2, k3`` (1/s), ``dA, dT, dV`` (cm^2/s) and the x/y
    components of ``vA, vT, vV`` (cm/s).  Instances are read-only.
    """

    __slots__ = ("grid", "values")

    def __init__(self, grid, values):
        values = np.array(values, dtype=float)
        if values.shape != (len(BLOCKS),) + grid.shape:
            raise ValueError(
                f"parameter array has shape {values.shape}, "
                f"expected {(len(BLOCKS),) + grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("parameters contain non-finite values")
        values.flags.writeable = False
        self.grid = grid
        self.values = values

    @classmethod
    def constant(cls, grid, **blocks):
        """Spatially constant parameters; missing blocks default to zero."""
        unknown = set(blocks) - set(BLOCKS)
        if unknown:
            raise KeyError(f"unknown parameter blocks: {sorted(unknown)}")
        vals = np.zeros((len(BLOCKS),) + grid.shape)
        for name, v in blocks.items():
            vals[BLOCK_INDEX[name]] = v
        return cls(grid, vals)

    @classmethod
    def from_blocks(cls, grid, blocks):
        vals = np.zeros((len(BLOCKS),) + grid.shape)
        for name in BLOCKS:
            vals[BLOCK_INDEX[name]] = blocks[name]
        return cls(grid, vals)

    def __getitem__(self, name):
        return self.values[BLOCK_INDEX[name]]

    def blocks(self):
        return {name: self.values[i] for i, name in enumerate(BLOCKS)}

    def replace(self, **blocks):
        vals = self.values.copy()
        for name, v in blocks.items():
            vals[BLOCK_INDEX[name]] = v
        return ParameterSet(self.grid, vals)

    def with_values(self, values):
        return ParameterSet(self.grid, values)

    @property
    def k1(self):
        return self.values[0]

    @property
    def k2(self):
        return self.values[1]

    @property
    def k3(self):
        return self.values[2]

    @property
    def dA(self):
        return self.values[3]

    @property
    def dT(self):
        return self.values[4]

    @property
    def dV(self):
        return self.values[5]

    @property
    def vA(self):
        return self.values[6:8]

    @property
    def vT(self):
        return self.values[8:10]

    @property
    def vV(self):
        return self.values[10:12]

    def diffusivities(self):
        """``(3, ny, nx)`` diffusivities in species order (A, T, V)."""
        return self.values[DIFFUSION_BLOCKS]

    def velocity_x(self):
        return self.values[[6, 8, 10]]

    def velocity_y(self):
        return self.values[[7, 9, 11]]

    def __repr__(self):
        means = ", ".join(f"{n}={m:.4g}" for n, m in zip(BLOCKS, self.values.mean(axis=(1, 2))))
        return f"ParameterSet({self.grid.nx}x{self.grid.ny}; means {means})"

    def __eq__(self, other):
        return (isinstance(other, ParameterSet) and self.grid == other.grid
                and np.array_equal(self.values, other.values))

    __hash__ = None


def is_feasible(p, bounds, atol=0.0):
    lo = bounds.lower()[:, None, None]
    hi = bounds.upper()[:, None, None]
    return bool(np.all(p.values >= lo - atol) and np.all(p.values <= hi + atol))


def project_parameters(p, bounds):
    """Clamp every block onto its box: k in [0, k_max], D in [d_min, d_max],
    velocity components in [-v_max, v_max]."""
    lo = bounds.lower()[:, None, None]
    hi = bounds.upper()[:, None, None]
    return p.with_values(np.clip(p.values, lo, hi))


@dataclass
class RegularizerConfig:
    """Prior fields and per-block weights of the quadratic regularizer

    ``R(p) = sum_i  alpha_i * int (p_i - p_i*)^2  +  xi_i * int |grad p_i|^2``.
    """

    prior: ParameterSet
    alpha: np.ndarray = field(default=None)
    xi: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(BLOCKS)
        self.alpha = np.zeros(n) if self.alpha is None else _block_weights(self.alpha)
        self.xi = np.zeros(n) if self.xi is None else _block_weights(self.xi)
        for w in (self.alpha, self.xi):
            if not (np.all(np.isfinite(w)) and np.all(w >= 0)):
                raise ValueError("regularization weights must be finite and nonnegative")

    def scaled(self, factor):
        return RegularizerConfig(self.prior, self.alpha * factor, self.xi * factor)


def _block_weights(w):
    if isinstance(w, dict):
        out = np.zeros(len(BLOCKS))
        for name, v in w.items():
            out[BLOCK_INDEX[name]] = v
        return out
    w = np.broadcast_to(np.asarray(w, dtype=float), (len(BLOCKS),))
    return w.copy()


def forward_differences(a, hx, hy):
    """Forward-difference gradients on interior faces: ``(gx, gy)`` with
    shapes ``(..., ny, nx-1)`` and ``(..., ny-1, nx)``."""
    gx = np.diff(a, axis=-1) / hx
    gy = np.diff(a, axis=-2) / hy
    return gx, gy


def neumann_laplacian(a, hx, hy):
    """5-point Laplacian with homogeneous Neumann closure.

    Equals ``-(Gx^T Gx + Gy^T Gy) a`` for the forward-difference operators
    of :func:`forward_differences`, so it is exactly the negative gradient
    of ``0.5*||grad a||^2``.
    """
    gx, gy = forward_differences(a, hx, hy)
    out = np.zeros_like(a, dtype=float)
    out[..., :, :-1] += gx / hx
    out[..., :, 1:] -= gx / hx
    out[..., :-1, :] += gy / hy
    out[..., 1:, :] -= gy / hy
    return out


def regularizer_value(p, reg):
    """Quadratic regularizer with midpoint quadrature (cell area weights)."""
    _check_same_grid(p, reg.prior)
    a = p.grid.cell_area
    dev = p.values - reg.prior.values
    gx, gy = forward_differences(p.values, p.grid.hx, p.grid.hy)
    fit = (dev ** 2).sum(axis=(1, 2))
    smooth = (gx ** 2).sum(axis=(1, 2)) + (gy ** 2).sum(axis=(1, 2))
    return float(a * (reg.alpha @ fit + reg.xi @ smooth))


def regularizer_gradient(p, reg):
    """L2 gradient of :func:`regularizer_value`, ``2 alpha (p - p*) - 2 xi Lap p``.

    Returned as a ``(12, ny, nx)`` array; the directional derivative in
    direction ``q`` is ``cell_area * sum(g * q)``.
    """
    _check_same_grid(p, reg.prior)
    lap = neumann_laplacian(p.values, p.grid.hx, p.grid.hy)
    return (2.0 * reg.alpha[:, None, None] * (p.values - reg.prior.values)
            - 2.0 * reg.xi[:, None, None] * lap)


def _check_same_grid(p, q):
    if p.grid.shape != q.grid.shape:
        raise ValueError(f"grid mismatch: {p.grid.shape} vs {q.grid.shape}")


def laplacian_eigenvalues(grid):
    """Eigenvalues of ``-neumann_laplacian`` in the DCT-II basis, shape ``(ny, nx)``."""
    kx = np.arange(grid.nx)
    ky = np.arange(grid.ny)
    lx = (2.0 / grid.hx * np.sin(np.pi * kx / (2 * grid.nx))) ** 2
    ly = (2.0 / grid.hy * np.sin(np.pi * ky / (2 * grid.ny))) ** 2
    return ly[:, None] + lx[None, :]


def screened_poisson_solve(rhs, shift, stiffness, grid):
    """Solve ``(shift - stiffness * Lap) q = rhs`` with Neumann closure.

    The Neumann Laplacian is diagonal in the DCT-II basis, so the solve is
    direct.  ``shift`` must be positive (or ``stiffness`` zero and shift
    nonzero).
    """
    if stiffness == 0.0:
        return rhs / shift
    lam = laplacian_eigenvalues(grid)
    coef = fft.dctn(rhs, type=2, norm="ortho")
    return fft.idctn(coef / (shift + stiffness * lam), type=2, norm="ortho")
