"""Transport-reaction-diffusion perfusion model with direct parameter
reconstruction from dynamic PET sinograms."""
from .core import (BLOCKS, Bounds, Grid, ParameterSet, RegularizerConfig, build_grid,
                   project_parameters, regularizer_gradient, regularizer_value)
from .forward import (BoundarySpec, ConcentrationState, SolverConfig, Trajectory, activity,
                      adi_step, frame_activity, initial_condition, make_boundary, solve_forward)
from .pet import (Projector, SinogramSequence, backproject, build_projector, kl_divergence,
                  kl_fidelity, project, sample_poisson)
from .adjoint import GradientSet, assemble_gradient, solve_adjoint
from .recon import ReconConfig, ReconReport, em_half_step, objective, parameter_half_step, reconstruct
from .phantoms import PRESETS, defect_mask, phantom

__version__ = "0.1.0"
