"""Synthetic parallel-beam PET operator, Poisson counts and the KL data term."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

FIDELITY_FLOOR = 1e-12


class Projector:
    """Sparse nonnegative system matrix ``K`` of shape
    ``(n_angles*n_bins, nx*ny)`` with cached sensitivity image ``K^T 1``.

    Image vectors are fields of shape ``(ny, nx)`` flattened row-major;
    sinogram rows are ordered angle-major.
    """

    def __init__(self, grid, matrix, angles, bin_width, n_bins):
        self.grid = grid
        self.matrix = sp.csr_matrix(matrix)
        if self.matrix.nnz and self.matrix.data.min() < 0:
            raise ValueError("projector entries must be nonnegative")
        self.angles = np.asarray(angles, dtype=float)
        self.bin_width = float(bin_width)
        self.n_bins = int(n_bins)
        if self.matrix.shape != (self.n_angles * self.n_bins, grid.size):
            raise ValueError(f"matrix shape {self.matrix.shape} does not match geometry")
        self._matrix_T = self.matrix.T.tocsr()
        self.sensitivity = self.backproject(np.ones(self.sino_shape))

    @property
    def n_angles(self):
        return len(self.angles)

    @property
    def sino_shape(self):
        return (self.n_angles, self.n_bins)

    @property
    def shape(self):
        return self.matrix.shape

    def project(self, u):
        """Forward projection of one image ``(ny, nx)`` or a stack ``(F, ny, nx)``."""
        u = np.asarray(u, dtype=float)
        lead = u.shape[:-2]
        if u.shape[-2:] != self.grid.shape:
            raise ValueError(f"image shape {u.shape[-2:]} does not match grid {self.grid.shape}")
        flat = u.reshape((-1, self.grid.size)).T
        out = (self.matrix @ flat).T
        return out.reshape(lead + self.sino_shape)

    def backproject(self, g):
        """Transpose action on one sinogram ``(n_angles, n_bins)`` or a stack."""
        g = np.asarray(g, dtype=float)
        lead = g.shape[:-2]
        if g.shape[-2:] != self.sino_shape:
            raise ValueError(f"sinogram shape {g.shape[-2:]} does not match {self.sino_shape}")
        flat = g.reshape((-1, self.n_angles * self.n_bins)).T
        out = (self._matrix_T @ flat).T
        return out.reshape(lead + self.grid.shape)

    def scaled(self, factor):
        return Projector(self.grid, self.matrix * float(factor), self.angles,
                         self.bin_width, self.n_bins)


def _ray_segments(grid, angles, offsets):
    """Siddon ray tracing for all parallel rays at once.

    Returns ``(ray, pixel, length)`` triples of the nonzero intersections.
    """
    lx, ly = grid.extent
    cx, cy = 0.5 * lx, 0.5 * ly
    th = np.repeat(angles, len(offsets))
    s = np.tile(offsets, len(angles))
    ex, ey = -np.sin(th), np.cos(th)
    px = cx + s * np.cos(th)
    py = cy + s * np.sin(th)
    xs = np.arange(grid.nx + 1) * grid.hx
    ys = np.arange(grid.ny + 1) * grid.hy
    # tiny directional components are treated as exactly axis-parallel
    ax_ok = np.abs(ex) > 1e-14
    ay_ok = np.abs(ey) > 1e-14
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = (xs[None, :] - px[:, None]) / ex[:, None]
        ty = (ys[None, :] - py[:, None]) / ey[:, None]
    big = np.inf
    t_lo = np.full(th.shape, -big)
    t_hi = np.full(th.shape, big)
    t_lo = np.where(ax_ok, np.maximum(t_lo, np.minimum(tx[:, 0], tx[:, -1])), t_lo)
    t_hi = np.where(ax_ok, np.minimum(t_hi, np.maximum(tx[:, 0], tx[:, -1])), t_hi)
    t_lo = np.where(ay_ok, np.maximum(t_lo, np.minimum(ty[:, 0], ty[:, -1])), t_lo)
    t_hi = np.where(ay_ok, np.minimum(t_hi, np.maximum(ty[:, 0], ty[:, -1])), t_hi)
    # axis-parallel rays must lie inside the slab of the other axis
    inside_x = (px > 0) & (px < lx)
    inside_y = (py > 0) & (py < ly)
    hit = (ax_ok | inside_x) & (ay_ok | inside_y) & (t_hi > t_lo)
    t_lo = np.where(hit, t_lo, 0.0)
    t_hi = np.where(hit, t_hi, 0.0)

    tx = np.where(ax_ok[:, None], tx, np.nan)
    ty = np.where(ay_ok[:, None], ty, np.nan)
    t_all = np.concatenate([t_lo[:, None], t_hi[:, None], tx, ty], axis=1)
    t_all = np.where(np.isnan(t_all), t_hi[:, None], t_all)
    t_all = np.clip(t_all, t_lo[:, None], t_hi[:, None])
    t_all.sort(axis=1)
    seg = np.diff(t_all, axis=1)
    tm = 0.5 * (t_all[:, 1:] + t_all[:, :-1])
    mx = px[:, None] + tm * ex[:, None]
    my = py[:, None] + tm * ey[:, None]
    ix = np.clip(np.floor(mx / grid.hx).astype(int), 0, grid.nx - 1)
    iy = np.clip(np.floor(my / grid.hy).astype(int), 0, grid.ny - 1)
    keep = seg > 1e-12 * max(grid.hx, grid.hy)
    rays = np.broadcast_to(np.arange(len(th))[:, None], seg.shape)
    return rays[keep], (iy * grid.nx + ix)[keep], seg[keep]


def build_projector(grid, n_angles, n_bins, bin_width=None):
    """Parallel-beam projector with exact ray/pixel intersection lengths.

    ``n_angles`` equally spaced angles in [0, pi); at angle 0 the rays run
    along the y axis.  ``n_bins`` detector bins of width ``bin_width``
    (default: the domain diagonal divided by ``n_bins``) centred on the
    domain centre; each bin is sampled by a single ray through its centre.
    """
    if n_angles < 1 or n_bins < 1:
        raise ValueError("need at least one angle and one bin")
    lx, ly = grid.extent
    if bin_width is None:
        bin_width = np.hypot(lx, ly) / n_bins
    if not bin_width > 0:
        raise ValueError("bin width must be positive")
    angles = np.pi * np.arange(n_angles) / n_angles
    offsets = (np.arange(n_bins) - 0.5 * (n_bins - 1)) * bin_width
    rows, cols, vals = _ray_segments(grid, angles, offsets)
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(n_angles * n_bins, grid.size)).tocsr()
    mat.sum_duplicates()
    if mat.nnz == 0:
        raise ValueError("degenerate geometry: no ray intersects the domain")
    return Projector(grid, mat, angles, bin_width, n_bins)


def project(K, u):
    return K.project(u)


def backproject(K, g):
    return K.backproject(g)


@dataclass(frozen=True)
class SinogramSequence:
    """Per-frame sinograms ``frames`` of shape ``(n_frames, n_angles, n_bins)``.

    ``count_scale`` converts model expectations ``K u`` into expected
    counts; it is 1 for expectation data and the sampling scale for counts.
    """

    frames: np.ndarray
    frame_duration: float = 1.0
    count_scale: float = 1.0

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=float)
        if f.ndim != 3:
            raise ValueError("frames must have shape (n_frames, n_angles, n_bins)")
        if np.any(f < 0):
            raise ValueError("sinogram frames must be nonnegative")
        object.__setattr__(self, "frames", f)

    @property
    def n_frames(self):
        return self.frames.shape[0]

    def total_counts(self):
        return self.frames.sum(axis=(1, 2))


def sample_poisson(expected, scale, seed):
    """Poisson counts with mean ``scale * expected``, reproducible via ``seed``."""
    if scale < 0:
        raise ValueError("scale must be nonnegative")
    rng = np.random.default_rng(seed)
    lam = scale * expected.frames
    counts = rng.poisson(lam).astype(float)
    return replace(expected, frames=counts, count_scale=expected.count_scale * scale)


def kl_fidelity(expected, counts, full_output=False):
    """Poisson negative log-likelihood ``sum(Ku - f log Ku)`` times frame duration.

    ``expected`` holds ``Ku`` in count units (frames array or sequence).
    Uses ``0 log 0 = 0``; expectations are floored at 1e-12 inside the log
    where counts are positive, and such bins are reported.
    """
    e = expected.frames if isinstance(expected, SinogramSequence) else np.asarray(expected, float)
    f = counts.frames
    if e.shape != f.shape:
        raise ValueError(f"shape mismatch {e.shape} vs {f.shape}")
    pos = f > 0
    floored = int(np.count_nonzero(pos & (e < FIDELITY_FLOOR)))
    if floored:
        log.warning("%d bins with counts but (near) zero expectation", floored)
    logs = np.log(np.maximum(e, FIDELITY_FLOOR), where=pos, out=np.zeros_like(e))
    value = counts.frame_duration * float(np.sum(e - f * logs))
    if full_output:
        return value, floored
    return value


def kl_divergence(expected, counts):
    """Generalized KL divergence ``sum(Ku - f + f log(f/Ku))`` times frame duration.

    Differs from :func:`kl_fidelity` by a constant that depends on the counts
    only; being small near a good fit it is the better-conditioned choice for
    finite-difference checks and convergence monitoring.
    """
    e = expected.frames if isinstance(expected, SinogramSequence) else np.asarray(expected, float)
    f = counts.frames
    if e.shape != f.shape:
        raise ValueError(f"shape mismatch {e.shape} vs {f.shape}")
    pos = f > 0
    ratio = np.divide(f, np.maximum(e, FIDELITY_FLOOR), where=pos, out=np.ones_like(f))
    terms = e - f + f * np.log(ratio)
    return counts.frame_duration * float(np.sum(terms))


def fidelity_residual(expected, counts):
    """``d/d(Ku)`` of :func:`kl_fidelity`: ``duration * (1 - f / Ku)``."""
    e = expected.frames if isinstance(expected, SinogramSequence) else np.asarray(expected, float)
    f = counts.frames
    q = np.divide(f, np.maximum(e, FIDELITY_FLOOR), where=f > 0, out=np.zeros_like(f))
    return counts.frame_duration * (1.0 - q)
