"""Pooled classification and outlier detection via group testing and compressed sensing.

A calibrated noisy counting oracle stands in for a pooled neural network, so
decoders, matrix properties and experiment trends can be studied cheaply.
"""

__version__ = "0.1.0"

from .errors import (BudgetExceeded, ConfigError, DegenerateComponent, DimensionMismatch,
                     InfeasibleParameters, PooledCSError)
from .matrix import (MatrixCertificate, PoolingMatrix, certify, check_disjunctness, check_rip1,
                     construct_balanced, erdos_cardinality_bound, mutual_coherence,
                     qgt_lower_bound, verify_balanced)
from .oracle import (ConfusionModel, Population, binarize_counts, exact_counts, noisy_counts,
                     sample_population)
from .gt import comp_decode, dorfman_decode, ncomp_decode, optimal_dorfman_pool_size
from .cs import DecoderConfig, classo_decode, grid_search, mip_decode

__all__ = [
    "BudgetExceeded", "ConfigError", "DegenerateComponent", "DimensionMismatch",
    "InfeasibleParameters", "PooledCSError", "MatrixCertificate", "PoolingMatrix", "certify",
    "check_disjunctness", "check_rip1", "construct_balanced", "erdos_cardinality_bound",
    "mutual_coherence", "qgt_lower_bound", "verify_balanced", "ConfusionModel", "Population",
    "binarize_counts", "exact_counts", "noisy_counts", "sample_population", "comp_decode",
    "dorfman_decode", "ncomp_decode", "optimal_dorfman_pool_size", "DecoderConfig",
    "classo_decode", "grid_search", "mip_decode",
]
