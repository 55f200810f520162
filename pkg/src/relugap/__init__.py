"""Randomly subsampled convex relaxations of two-layer ReLU networks.

Solvers for the gated group lasso and its cone-constrained relaxation,
certified optimality-gap bounds for sampled activation patterns, cone
decompositions, and the nonconvex network they relax.
"""

from .arrangements import PatternSet, enumerate_patterns, paired_patterns, sample_patterns
from .bounds import bound_report, compute_kappa, expected_gram
from .core import BoundReport, Dataset, SolverConfig, generate_dataset, load_dataset, save_dataset
from .decomposition import cone_sharpness, decompose_min_norm
from .network import NetworkParams, convex_to_network, init_network, network_loss, train_gd
from .solvers import solve_cone_constrained, solve_gated, solve_gated_l2

__version__ = "0.1.0"

__all__ = [
    "BoundReport",
    "Dataset",
    "NetworkParams",
    "PatternSet",
    "SolverConfig",
    "bound_report",
    "compute_kappa",
    "cone_sharpness",
    "convex_to_network",
    "decompose_min_norm",
    "enumerate_patterns",
    "expected_gram",
    "generate_dataset",
    "init_network",
    "load_dataset",
    "network_loss",
    "paired_patterns",
    "sample_patterns",
    "save_dataset",
    "solve_cone_constrained",
    "solve_gated",
    "solve_gated_l2",
    "train_gd",
]
