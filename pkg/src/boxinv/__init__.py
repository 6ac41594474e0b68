"""boxinv: box-constrained QP active-set solver and elliptic inverse-problem benchmarks."""

from .qp import ActivePair, BoxQP, KKTPoint, SolveReport, enumerate_oracle, feasible_active_set
from .gn import GNConfig, GNIterate, GNReport, InverseProblem, gauss_newton_solve
from .bench import ExperimentConfig, Metrics, run_experiment

__all__ = [
    "ActivePair",
    "BoxQP",
    "KKTPoint",
    "SolveReport",
    "enumerate_oracle",
    "feasible_active_set",
    "GNConfig",
    "GNIterate",
    "GNReport",
    "InverseProblem",
    "gauss_newton_solve",
    "ExperimentConfig",
    "Metrics",
    "run_experiment",
]

__version__ = "0.1.0"
