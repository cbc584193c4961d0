"""
Exit problems for stochastic reaction-diffusion equations with Dirichlet
boundary conditions: discretisation, simulation, controls, minimum action
paths and exit-time Monte Carlo.
"""
__version__ = "0.1.0"

from .errors import (AllDiverged, BlowUp, ConfigError, InsufficientData, NoConvergence, NoMerge,
                     SpdeExitError, TaskError, UnknownTask)
from .grid import GridSpec, OperatorDisc, build_operator, implicit_solve, sobolev_norm, sup_norm
from .model import ModelSpec, allen_cahn, coupled_cubic, polynomial_model, validate_assumptions
from .noise import NoiseStream, split_stream
from .sim import ControlPath, SimConfig, TrajectoryPath, integrate_flow, integrate_skeleton, integrate_spde
from .control import action, feedback_connector, recover_control, reversed_path
from .quasipotential import (MamProblem, boundary_quasipotential, find_equilibria, mam_minimize,
                             quasipotential, rho_sweep)
from .exit import (BasinOracle, build_oracle, exit_scaling_report, exit_shape_histogram,
                   run_exit_mc)
