"""Binary and CSV containers for fields, sinograms, projectors and trajectories.

Field file: ``b"PDEF1\\n"``, ``nx``, ``ny`` as little-endian uint32, then
``nx*ny`` little-endian float64 values row-major over ``(ny, nx)``.
Sinogram file: ``b"PDES1\\n"``, ``n_angles``, ``n_bins`` (uint32), then the
float64 values row-major over ``(n_angles, n_bins)``.
Projector file: ``b"PDEK1\\n"``, ``n_angles``, ``n_bins``, ``nx``, ``ny``
(uint32), ``bin_width``, ``hx``, ``hy`` (float64), ``nnz`` (uint64), then
``nnz`` records ``(row uint32, col uint32, weight float64)``.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .core import BLOCKS, Grid, ParameterSet
from .pet import Projector, SinogramSequence

FIELD_MAGIC = b"PDEF1\n"
SINO_MAGIC = b"PDES1\n"
PROJ_MAGIC = b"PDEK1\n"
_TRIPLE = np.dtype([("row", "<u4"), ("col", "<u4"), ("w", "<f8")])


def _write_2d(path, magic, a):
    a = np.ascontiguousarray(a, dtype="<f8")
    rows, cols = a.shape
    with open(path, "wb") as fh:
        fh.write(magic)
        # header stores the fast (column) dimension first
        fh.write(np.array([cols, rows], dtype="<u4").tobytes())
        fh.write(a.tobytes())


def _read_2d(path, magic):
    buf = Path(path).read_bytes()
    if not buf.startswith(magic):
        raise ValueError(f"{path}: bad magic, expected {magic!r}")
    off = len(magic)
    cols, rows = np.frombuffer(buf, "<u4", 2, off)
    off += 8
    data = np.frombuffer(buf, "<f8", int(rows) * int(cols), off)
    if off + data.nbytes != len(buf):
        raise ValueError(f"{path}: size does not match header")
    return data.reshape(int(rows), int(cols)).astype(float)


def write_field(path, a):
    """Write a ``(ny, nx)`` field; header is ``nx, ny``."""
    _write_2d(path, FIELD_MAGIC, a)


def read_field(path):
    return _read_2d(path, FIELD_MAGIC)


def write_sinogram(path, g):
    """Write an ``(n_angles, n_bins)`` sinogram; header is ``n_angles, n_bins``."""
    g = np.asarray(g, dtype=float)
    with open(path, "wb") as fh:
        fh.write(SINO_MAGIC)
        fh.write(np.array(g.shape, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(g, dtype="<f8").tobytes())


def read_sinogram(path):
    buf = Path(path).read_bytes()
    if not buf.startswith(SINO_MAGIC):
        raise ValueError(f"{path}: not a sinogram file")
    off = len(SINO_MAGIC)
    na, nb = (int(v) for v in np.frombuffer(buf, "<u4", 2, off))
    data = np.frombuffer(buf, "<f8", na * nb, off + 8)
    if off + 8 + data.nbytes != len(buf):
        raise ValueError(f"{path}: size does not match header")
    return data.reshape(na, nb).astype(float)


def write_field_csv(path, a):
    """One CSV row per grid row, values written with ``repr`` precision."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.asarray(a, dtype=float):
            w.writerow([repr(float(v)) for v in row])


def read_field_csv(path):
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def write_projector(path, K):
    coo = K.matrix.tocoo()
    rec = np.empty(coo.nnz, dtype=_TRIPLE)
    rec["row"], rec["col"], rec["w"] = coo.row, coo.col, coo.data
    with open(path, "wb") as fh:
        fh.write(PROJ_MAGIC)
        fh.write(np.array([K.n_angles, K.n_bins, K.grid.nx, K.grid.ny], "<u4").tobytes())
        fh.write(np.array([K.bin_width, K.grid.hx, K.grid.hy], "<f8").tobytes())
        fh.write(np.array([coo.nnz], "<u8").tobytes())
        fh.write(rec.tobytes())


def read_projector(path):
    buf = Path(path).read_bytes()
    if not buf.startswith(PROJ_MAGIC):
        raise ValueError(f"{path}: not a projector file")
    off = len(PROJ_MAGIC)
    na, nb, nx, ny = (int(v) for v in np.frombuffer(buf, "<u4", 4, off))
    off += 16
    bin_width, hx, hy = np.frombuffer(buf, "<f8", 3, off)
    off += 24
    nnz = int(np.frombuffer(buf, "<u8", 1, off)[0])
    off += 8
    rec = np.frombuffer(buf, _TRIPLE, nnz, off)
    grid = Grid(nx, ny, float(hx), float(hy))
    mat = sp.coo_matrix((rec["w"].astype(float), (rec["row"], rec["col"])),
                        shape=(na * nb, nx * ny))
    angles = np.pi * np.arange(na) / na
    return Projector(grid, mat, angles, float(bin_width), nb)


def write_parameters(directory, p, prefix=""):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, a in p.blocks().items():
        write_field(directory / f"{prefix}{name}.fld", a)


def read_parameters(directory, grid, prefix=""):
    directory = Path(directory)
    return ParameterSet.from_blocks(
        grid, {name: read_field(directory / f"{prefix}{name}.fld") for name in BLOCKS})


def write_sequence(directory, seq, stem="frame"):
    """Numbered sinogram files plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for f, frame in enumerate(seq.frames):
        name = f"{stem}_{f:04d}.sino"
        write_sinogram(directory / name, frame)
        files.append(name)
    manifest = {"n_frames": seq.n_frames, "frame_duration": seq.frame_duration,
                "count_scale": seq.count_scale, "files": files}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))


def read_sequence(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    frames = np.stack([read_sinogram(directory / name) for name in manifest["files"]])
    return SinogramSequence(frames, manifest["frame_duration"], manifest["count_scale"])


def write_trajectory(directory, traj, every=1):
    """One field file per species and time level (``cA_0000.fld`` ...) and a
    plain-text manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    levels = list(range(0, traj.n_steps + 1, every))
    for k in levels:
        for s, name in enumerate(("cA", "cT", "cV")):
            write_field(directory / f"{name}_{k:04d}.fld", traj.states[k, s])
    g = traj.grid
    lines = [f"tau {traj.tau!r}", f"n_steps {traj.n_steps}",
             f"grid {g.nx} {g.ny} {g.hx!r} {g.hy!r}",
             "levels " + " ".join(str(k) for k in levels)]
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_trajectory_manifest(directory):
    out = {}
    for line in (Path(directory) / "manifest.txt").read_text().splitlines():
        key, _, rest = line.partition(" ")
        out[key] = rest.split()
    return out
