import numpy as np
import pytest

from flowpet import io
from flowpet.core import build_grid
from flowpet.forward import ConcentrationState, SolverConfig, solve_forward
from flowpet.pet import SinogramSequence, build_projector
from helpers import random_problem


def test_field_round_trip_and_header(tmp_path):
    a = np.random.default_rng(0).standard_normal((3, 5))
    io.write_field(tmp_path / "a.fld", a)
    raw = (tmp_path / "a.fld").read_bytes()
    assert raw[:6] == io.FIELD_MAGIC
    assert np.frombuffer(raw, "<u4", 2, 6).tolist() == [5, 3]
    np.testing.assert_array_equal(io.read_field(tmp_path / "a.fld"), a)


def test_corrupt_files_rejected(tmp_path):
    (tmp_path / "bad.fld").write_bytes(b"nope")
    with pytest.raises(ValueError):
        io.read_field(tmp_path / "bad.fld")
    io.write_field(tmp_path / "a.fld", np.ones((2, 2)))
    (tmp_path / "t.fld").write_bytes((tmp_path / "a.fld").read_bytes()[:-8])
    with pytest.raises(ValueError):
        io.read_field(tmp_path / "t.fld")
    with pytest.raises(ValueError):
        io.read_sinogram(tmp_path / "a.fld")


def test_sinogram_and_csv_round_trip(tmp_path):
    g = np.random.default_rng(1).uniform(size=(4, 7))
    io.write_sinogram(tmp_path / "s.sino", g)
    np.testing.assert_array_equal(io.read_sinogram(tmp_path / "s.sino"), g)
    io.write_field_csv(tmp_path / "a.csv", g)
    np.testing.assert_array_equal(io.read_field_csv(tmp_path / "a.csv"), g)


def test_projector_round_trip(tmp_path):
    K = build_projector(build_grid(5, 4, 1.0, 0.8), 6, 7)
    io.write_projector(tmp_path / "K.bin", K)
    L = io.read_projector(tmp_path / "K.bin")
    assert (L.matrix != K.matrix).nnz == 0
    assert L.grid == K.grid and L.bin_width == K.bin_width
    np.testing.assert_array_equal(L.angles, K.angles)


def test_parameters_and_sequence_round_trip(tmp_path):
    p, _, _ = random_problem(4, 3, 2)
    io.write_parameters(tmp_path / "p", p)
    assert io.read_parameters(tmp_path / "p", p.grid) == p
    seq = SinogramSequence(np.arange(24.0).reshape(2, 3, 4), 2.5, 7.0)
    io.write_sequence(tmp_path / "seq", seq)
    back = io.read_sequence(tmp_path / "seq")
    np.testing.assert_array_equal(back.frames, seq.frames)
    assert (back.frame_duration, back.count_scale) == (2.5, 7.0)


def test_trajectory_files(tmp_path):
    p, bc, c = random_problem(3, 3, 0)
    traj = solve_forward(p, ConcentrationState(p.grid, c), bc, SolverConfig(0.1, 4))
    io.write_trajectory(tmp_path / "t", traj, every=2)
    m = io.read_trajectory_manifest(tmp_path / "t")
    assert m["levels"] == ["0", "2", "4"]
    np.testing.assert_array_equal(io.read_field(tmp_path / "t" / "cT_0004.fld"), traj.states[4, 1])
