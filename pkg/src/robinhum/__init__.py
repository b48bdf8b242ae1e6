"""Penalized HUM null controls for stochastic parabolic equations with Robin conditions."""

__version__ = "0.1.0"

from .grid import SpatialGrid, build_grid, assemble_operators, trace_inequality_gap, weak_divergence_pairing
from .noise import NoiseTree, AdaptedField, build_tree, cond_expect, martingale_part, ito_duality_residual
from .spde import (CoefficientSet, SourceSpec, ProblemInstance, SolutionBundle, solve_forward,
                   solve_backward, energy_estimate)
from .weights import WeightFamily, build_psi, eval_weights, lambda_threshold, constant_K, constant_M
from .hum import (HumConfig, HumResult, solve_hum_forward, solve_hum_backward, solve_weighted_hum_A,
                  solve_weighted_hum_B, kkt_oracle, cost_report)
from .estimates import (CarlemanReport, ObservabilityReport, carleman_eval_backward, carleman_eval_forward,
                        observability_forward, observability_backward, time_window_energy)
