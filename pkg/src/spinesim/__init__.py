"""Simulation and model-predictive control workbench for cable-driven
tensegrity spine robots: rigid-vertebra dynamics, force-density inverse
statics with a per-body force/moment balance, and two receding-horizon
controllers validated in closed loop against the nonlinear model."""

from .dynamics import (NoiseModel, SimulationRecord, cable_tension,
                       default_noise, simulate, state_derivative, step,
                       total_energy)
from .invstat import (ForceDensities, InputTrajectory, RigidBodyEquilibrium,
                      assemble_nodal, assemble_rigid_body,
                      generate_input_trajectory, reduction_matrices,
                      rest_lengths_from_densities, solve_min_norm_tensions)
from .mpc import (ControllerTrace, LinearizedDynamics, RunSettings,
                  SmoothingConfig, TrackingConfig, build_cftoc_smoothing,
                  build_cftoc_tracking, discretize, error_metrics, linearize,
                  run_closed_loop)
from .numopt import (QpProblem, QpSolution, numeric_rank, solve_equality_kkt,
                     solve_qp)
from .spine import (Pose, SpineModel, VertebraGeometry, cable_vectors,
                    default_spine_2d, default_spine_3d, larger_spine_2d,
                    load_model, node_positions, resolve_model, save_model)
from .trajectory import (SweepSpec, build_trajectory, default_sweep,
                         reference_state, state_at)

__version__ = "0.1.0"
