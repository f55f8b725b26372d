"""Off-policy evaluation on factored MDPs with greedy structure learning."""

from . import domains  # noqa: F401  (registers domain reward kinds)
from .fmdp import (FactoredMdp, InitialDist, Policy, Reward, StateSpaceTooLarge,
                   Trajectory, TrajectoryBatch, epsilon_floor, exact_value,
                   monte_carlo_value, sample_batch, sample_trajectory, step)
from .gscope import (CountStore, LearnedModel, build_model, candidate_scores,
                     empirical_cpt, l1_diff, learn_structure, model_from_true,
                     sample_threshold)
from .evaluators import (EvalResult, LoggingInconsistency, evaluate_cis,
                         evaluate_flat, evaluate_known_structure,
                         evaluate_mfmc, evaluate_model_based, normalized_error)
from .theory import (AssumptionReport, BoundInputs, Theorem1Bound,
                     check_assumptions, compute_psi, exact_scores, occupancy,
                     pairwise_scores, theorem1_bound)
from .sweep import SweepConfig, run_sweep

__version__ = "0.1.0"
