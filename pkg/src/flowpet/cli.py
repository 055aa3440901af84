"""Command-line front end.

    flowpet phantom     --config run.json [--preset NAME] [--out DIR]
    flowpet simulate    --config run.json [--out DIR]
    flowpet synth       --config run.json [--seed N] [--out DIR]
    flowpet reconstruct --config run.json [--out DIR]
    flowpet gradcheck   --config run.json [--out DIR]

The configuration is a JSON file; omitted sections fall back to the defaults
in :data:`DEFAULTS`.  Every run writes the fully resolved configuration to
``<out>/config.json``, which can be fed back with ``--config``.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .core import BLOCKS, Bounds, ParameterSet, RegularizerConfig, build_grid
from .forward import (ConcentrationState, SolverConfig, frame_activity, initial_condition,
                      make_boundary, solve_forward)
from .pet import SinogramSequence, build_projector, sample_poisson
from .phantoms import (DESK_PRIOR, PRESETS, PRIOR_VALUES, PRIOR_WEIGHTS, SMOOTHING_WEIGHTS,
                       defect_mask, phantom)
from .recon import ReconConfig, ReconstructionError, gradient_check, reconstruct

log = logging.getLogger("flowpet")

# Desk-scale experiment: a 16x16 grid whose extent makes the arterial
# transit time (extent / 700 cm/s = 4 s) comparable to the exchange times
# 1/k, an arterial bolus at t = 0 plus a steady arterial inflow through the
# bottom edge, and 20 frames of 2 s.
DEFAULTS = {
    "grid": {"nx": 16, "ny": 16, "lx": 2800.0, "ly": 2800.0},
    "solver": {"tau": 0.2, "n_steps": 200, "k0": 0.0},
    "boundary": {"inflow": ["bottom"], "j_in": [125.0, 0.0, 0.0],
                 "v_out": {"top": [700.0, 0.0, 700.0], "right": [0.0, 50.0, 0.0]}},
    "initial": {"amplitude": None, "n_param": 50.0},
    "phantom": {"preset": "constant", "values": None,
                "strip_fraction": 0.1, "block_fraction": 0.2, "strip_edge": "left"},
    "parameters_dir": None,
    "projector": {"n_angles": 24, "n_bins": 23, "bin_width": None},
    "projector_file": None,
    "frames": {"n_frames": 20, "frame_duration": 2.0},
    "synth": {"refine": 2, "scale": None, "counts_per_frame": 1e5, "noise": True, "seed": 0},
    "data_dir": None,
    "recon": {
        "alpha": 1.0, "n_outer": 50, "n_inner": 20, "tau_inner": 300.0,
        "step_rule": "fista", "step_range": [1e-6, 1e6], "step_growth": 1.2,
        "outer_tol": 0.0, "inner_tol": 1e-10,
        "prior": None,
        "reg_alpha": {"k1": 1e-8, "k2": 1e-8, "k3": 1e-6},
        "reg_xi": {"k1": 1.0, "k2": 1.0, "k3": 100.0},
        "block_steps": {"k1": 1.0, "k2": 0.25, "k3": 3.3},
        "active": {"k1": True, "k2": True, "k3": True},
        "bounds": {"d_min": 1e-9, "d_max": 1.0, "v_max": 1e4, "k_max": 10.0},
        "checkpoint_every": 10,
    },
    "gradcheck": {
        "nx": 8, "ny": 8, "extent": 1.0, "tau": 0.1, "n_steps": 10, "k0": 0.1,
        "n_frames": 5, "n_angles": 6, "n_bins": 9, "count_scale": 1e4,
        "variation": 0.2, "seed": 3, "eps": [1e-4, 1e-5, 1e-6], "n_cells": 2,
        "tolerance": 1e-6,
    },
}


# mappings whose keys are chosen by the user rather than fixed by DEFAULTS
FREE_FORM = ("v_out", "reg_alpha", "reg_xi", "block_steps", "active", "values", "prior")


class ConfigError(ValueError):
    pass


def _merge(base, over):
    out = copy.deepcopy(base)
    for key, val in (over or {}).items():
        if key not in base:
            raise ConfigError(f"unknown configuration key {key!r}")
        if isinstance(base[key], dict) and isinstance(val, dict) and key not in FREE_FORM:
            out[key] = _merge(base[key], val)
        else:
            out[key] = val
    return out


def load_config(path):
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"configuration file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return _merge(DEFAULTS, raw)


class Run:
    """Typed objects built from a resolved configuration dictionary."""

    def __init__(self, cfg, base_dir="."):
        self.cfg = cfg
        self.base = Path(base_dir)
        g = cfg["grid"]
        self.grid = build_grid(g["nx"], g["ny"], g["lx"], g["ly"])
        s = cfg["solver"]
        self.solver = SolverConfig(s["tau"], s["n_steps"], s["k0"])
        self.n_frames = cfg["frames"]["n_frames"]
        if self.solver.n_steps % self.n_frames:
            raise ConfigError("solver.n_steps must be a multiple of frames.n_frames")

    def path(self, p):
        p = Path(p)
        return p if p.is_absolute() else self.base / p

    def boundary(self, grid=None):
        b = self.cfg["boundary"]
        v_out = b["v_out"]
        if isinstance(v_out, dict):
            v_out = {e: np.asarray(v, float) for e, v in v_out.items()}
        return make_boundary(grid or self.grid, tuple(b["inflow"]),
                             j_in=np.asarray(b["j_in"], float), v_out=v_out)

    def initial(self, grid=None):
        i = self.cfg["initial"]
        amp = self.solver.tau if i["amplitude"] is None else i["amplitude"]
        return initial_condition(grid or self.grid, amp, i["n_param"])

    def mask_kw(self):
        ph = self.cfg["phantom"]
        return {k: ph[k] for k in ("strip_fraction", "block_fraction", "strip_edge")}

    def truth(self, grid=None, preset=None):
        grid = grid or self.grid
        if self.cfg["parameters_dir"] and grid is self.grid and preset is None:
            return io.read_parameters(self.path(self.cfg["parameters_dir"]), grid)
        ph = self.cfg["phantom"]
        return phantom(preset or ph["preset"], grid, ph["values"], **self.mask_kw())

    def mask(self):
        return defect_mask(self.cfg["phantom"]["preset"], self.grid, **self.mask_kw())

    def projector(self, grid=None):
        if self.cfg["projector_file"] and grid is None:
            K = io.read_projector(self.path(self.cfg["projector_file"]))
            if K.grid.shape != self.grid.shape:
                raise ConfigError("projector file does not match the grid")
            return K
        pj = self.cfg["projector"]
        return build_projector(grid or self.grid, pj["n_angles"], pj["n_bins"], pj["bin_width"])

    def recon_config(self):
        r = self.cfg["recon"]
        prior = dict(DESK_PRIOR)
        if r["prior"] == "reference":
            prior = dict(PRIOR_VALUES)
        elif isinstance(r["prior"], dict):
            prior.update(r["prior"])
        reg = RegularizerConfig(ParameterSet.constant(self.grid, **prior),
                                alpha=r["reg_alpha"] if r["reg_alpha"] is not None else PRIOR_WEIGHTS,
                                xi=r["reg_xi"] if r["reg_xi"] is not None else SMOOTHING_WEIGHTS)
        return ReconConfig(
            reg, alpha=r["alpha"], bounds=Bounds(**r["bounds"]), n_outer=r["n_outer"],
            n_inner=r["n_inner"], tau_inner=r["tau_inner"], block_steps=r["block_steps"],
            active=r["active"], step_rule=r["step_rule"], step_range=tuple(r["step_range"]),
            step_growth=r["step_growth"], outer_tol=r["outer_tol"], inner_tol=r["inner_tol"])


def refine_grid(grid, factor):
    return build_grid(grid.nx * factor, grid.ny * factor, *grid.extent)


def restrict(fields, factor):
    """Cell-average restriction of ``(..., ny*f, nx*f)`` fields."""
    a = np.asarray(fields)
    ny, nx = a.shape[-2] // factor, a.shape[-1] // factor
    a = a.reshape(a.shape[:-2] + (ny, factor, nx, factor))
    return a.mean(axis=(-3, -1))


def prolong(state, factor, fine):
    """Piecewise-constant copy of a coarse state on the refined grid, so that
    restriction returns the coarse state exactly."""
    c = np.repeat(np.repeat(state.c, factor, axis=-2), factor, axis=-1)
    return ConcentrationState(fine, c, state.time)


def synthesize(run, seed=None):
    """Expected (and optionally noisy) sinograms from a refined-grid simulation.

    Returns ``(sequence, expected_sequence)``.
    """
    sy = run.cfg["synth"]
    factor = int(sy["refine"])
    if factor < 1:
        raise ConfigError("synth.refine must be >= 1")
    fine = refine_grid(run.grid, factor) if factor > 1 else run.grid
    p = run.truth(fine) if factor > 1 else run.truth()
    traj = solve_forward(p, prolong(run.initial(), factor, fine), run.boundary(fine), run.solver)
    U = restrict(frame_activity(traj, run.n_frames), factor)
    K = run.projector()
    expected = SinogramSequence(K.project(U), run.cfg["frames"]["frame_duration"])
    scale = sy["scale"]
    if sy["counts_per_frame"] is not None:
        if scale is not None:
            raise ConfigError("give either synth.scale or synth.counts_per_frame")
        scale = sy["counts_per_frame"] / float(expected.total_counts().mean())
    if scale is None:
        return expected, expected
    if not sy["noise"]:
        scaled = SinogramSequence(expected.frames * scale, expected.frame_duration,
                                  expected.count_scale * scale)
        return scaled, scaled
    seed = sy["seed"] if seed is None else seed
    return sample_poisson(expected, float(scale), seed), expected


def _summary_table(p, mask):
    lines = [f"{'param':<6} {'region':<8} {'mean':>10}   {'std':>10}"]
    regions = [("all", np.ones_like(mask))] if not mask.any() else [("inside", mask),
                                                                   ("outside", ~mask)]
    for name in BLOCKS:
        for rname, m in regions:
            v = p[name][m]
            lines.append(f"{name:<6} {rname:<8} {v.mean():>10.6g} ± {v.std():.3g}")
    return "\n".join(lines)


def cmd_phantom(run, out, args):
    p = run.truth(preset=args.preset)
    io.write_parameters(out / "parameters", p)
    for name, a in p.blocks().items():
        io.write_field_csv(out / "parameters" / f"{name}.csv", a)
    print(f"wrote {args.preset or run.cfg['phantom']['preset']} phantom to {out / 'parameters'}")
    return 0


def cmd_simulate(run, out, args):
    p = run.truth()
    traj = solve_forward(p, run.initial(), run.boundary(), run.solver)
    io.write_trajectory(out / "trajectory", traj)
    U = frame_activity(traj, run.n_frames)
    (out / "activity").mkdir(exist_ok=True)
    for f, img in enumerate(U):
        io.write_field(out / "activity" / f"u_{f:04d}.fld", img)
    m = traj.masses()
    print(f"simulated {traj.n_steps} steps; mass {m[0]:.6g} -> {m[-1]:.6g}; "
          f"clamped cells {traj.negative_cells}")
    return 0


def cmd_synth(run, out, args):
    seq, expected = synthesize(run, args.seed)
    io.write_sequence(out / "sinograms", seq)
    io.write_sequence(out / "expected", expected)
    K = run.projector()
    io.write_projector(out / "projector.bin", K)
    print(f"wrote {seq.n_frames} frames, {seq.total_counts().mean():.6g} counts/frame "
          f"(count scale {seq.count_scale:.6g})")
    return 0


def cmd_reconstruct(run, out, args):
    data_dir = run.cfg["data_dir"]
    if data_dir is None:
        seq, _ = synthesize(run, args.seed)
    else:
        seq = io.read_sequence(run.path(data_dir))
    if float(seq.frames.sum()) <= 0:
        print("error: no counts in the sinogram data; nothing to reconstruct", file=sys.stderr)
        return 2
    K = run.projector()
    rc = run.recon_config()
    every = run.cfg["recon"]["checkpoint_every"]
    try:
        p, report = reconstruct(seq, K, run.initial(), run.boundary(), run.solver, rc,
                                checkpoint_dir=out / "checkpoints", checkpoint_every=every)
    except ReconstructionError as exc:
        if exc.p is not None:
            io.write_parameters(out / "failed_iterate", exc.p)
        print(f"error: {exc}", file=sys.stderr)
        return 3
    io.write_parameters(out / "parameters", p)
    (out / "heatmaps").mkdir(exist_ok=True)
    for name, a in p.blocks().items():
        io.write_field_csv(out / "heatmaps" / f"{name}.csv", a)
    report.to_csv(out / "report.csv")
    table = _summary_table(p, run.mask())
    (out / "summary.txt").write_text(table + "\n")
    print(table)
    print(f"objective {report.objective[0]:.10g} -> {report.objective[-1]:.10g} "
          f"in {len(report) - 1} outer iterations")
    return 0


def cmd_gradcheck(run, out, args):
    gc = run.cfg["gradcheck"]
    rows = gradient_check(**{k: v for k, v in gc.items() if k != "tolerance"})
    path = out / "gradcheck.csv"
    with open(path, "w") as fh:
        fh.write("block,cell,analytic,fd,rel_err\n")
        for r in rows:
            fh.write(f"{r['block']},{r['cell']},{r['analytic']!r},{r['fd']!r},{r['rel_err']!r}\n")
    worst = max(r["rel_err"] for r in rows)
    ok = worst <= gc["tolerance"]
    print(f"gradcheck: {len(rows)} directional derivatives, max relative error {worst:.3e} "
          f"({'ok' if ok else 'FAILED'}, tolerance {gc['tolerance']:g}); report {path}")
    return 0 if ok else 1


COMMANDS = {"phantom": cmd_phantom, "simulate": cmd_simulate, "synth": cmd_synth,
            "reconstruct": cmd_reconstruct, "gradcheck": cmd_gradcheck}


def build_parser():
    ap = argparse.ArgumentParser(prog="flowpet", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--out", default=None, help="output directory (default: ./out_<command>)")
    ap.add_argument("--seed", type=int, default=None, help="noise seed (overrides the config)")
    ap.add_argument("--preset", choices=PRESETS, default=None, help="phantom preset override")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["synth"]["seed"] = args.seed
        if args.preset is not None:
            cfg["phantom"]["preset"] = args.preset
        run = Run(cfg, Path(args.config).resolve().parent)
        # echo absolute paths so the written config works from any directory
        for key in ("parameters_dir", "projector_file", "data_dir"):
            if cfg[key]:
                cfg[key] = str(run.path(cfg[key]).resolve())
        out = Path(args.out or f"out_{args.command}")
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg, indent=2))
        return COMMANDS[args.command](run, out, args)
    except (ConfigError, ValueError, KeyError, OSError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
