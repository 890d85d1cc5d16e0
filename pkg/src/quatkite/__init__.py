"""Quaternion tethered-kite model and periodic pumping-cycle optimizer."""

from .params import ConfigError, KiteParams
from .kite_dynamics import (ChartWarning, DomainError, SingularityError, air_path_speed,
                       body_rates, euler_rhs, euler_state_to_ocp, euler_to_quat,
                       position_from_angles, position_from_quat, quat_rhs, quat_to_euler,
                       tether_force)
from .integrator import Trajectory, mean_power, rk4_step, simulate, singularity_demo
from .ocp_model import (ObjectiveWeights, OcpMetrics, StagePlan, boundary_residuals,
                  compute_metrics, loyd_power, objective_terms, path_constraints,
                  topo_indicator)
from .transcription import (EvaluationError, NlpProblem, ShootingCell, ShootingNlp,
                            build_nlp, nlp_jacobian, shoot_cell, variable_count)

from .guess import GuessInfeasible, GuessResult, GuessSpec, generate_guess, lissajous, plan_for
from .nlp_solver import SolveReport, SolverOptions, kkt_residual, solve
from .trajio import TrajectoryFormatError, read_trajectory, write_trajectory

__version__ = "0.1.0"
