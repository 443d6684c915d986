"""Sensor selection and initial-state estimation for nonlinear network models."""

from .estimation import (EstimationProblem, EstimationResult, ObservationSet, SolverSettings,
                         estimate_initial_state, estimation_error, observe, selection_matrix)
from .gramians import (GramianConfig, GramianObjective, analytic_linear_gramian, empirical_gramian,
                       gramian_def1, gramian_def2, gramian_def3, gramian_select)
from .harness import ExperimentConfig, compare_methods, generate_truth, run_sweep, selection_probabilities
from .integrators import DiscreteModel, Scheme, Trajectory, reference_simulate, simulate
from .models import ContinuousModel, ModelConfigError, load_model
from .oid import Digraph, build_oid, centralities, scc_decompose
from .reactions import load_mechanism
from .selection import (JacobianObjective, SelectionConstraints, SensorMask, select_exhaustive,
                        select_greedy, select_stochastic, selection_objective)
from .sensitivity import stack_output_jacobian

__version__ = "0.1.0"
