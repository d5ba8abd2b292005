"""Finite-difference schemes and convergence-rate experiments for the
stochastic heat equation on [0,1]^d with multiplicative Gaussian noise,
white in time and Riesz-correlated (or white, d=1) in space."""

from .green import (KernelSpec, RateCheckResult, eval_kernel, h_alpha_norm,
                    rate_check_space, rate_check_time, save_rate_csv)
from .lattice import (DIRICHLET, NEUMANN, GridSpec, LatticeField, cell_of,
                      flatten_index, interpolate, kappa_n, unflatten_index)
from .noise import (CovarianceFactor, FactorizationError, NoiseModel,
                    NoiseSlab, aggregate, aggregation_matrix,
                    build_covariance, cell_covariance, dump_factor,
                    load_factor, product_bound_exponents, sample_slab,
                    sample_slab_sequence)
from .operators import (ImplicitSolver, Laplacian, SpectralData,
                        build_laplacian, explicit_step, implicit_step,
                        spectral_data)
from .schemes import (EXPLICIT, IMPLICIT, CoefficientSet, InitialCondition,
                      SchemeOverflowError, SchemeRun, StabilityError,
                      Trajectory, load_trajectory_binary, run, step_explicit,
                      step_implicit)
from .study import (SPACE, TIME, ConvergenceReport, StudyAbortError,
                    StudyPlan, compute_errors, loglog_regression, run_study,
                    theoretical_exponent)

__version__ = "0.1.0"

__all__ = [
    "DIRICHLET", "NEUMANN", "GridSpec", "LatticeField", "cell_of",
    "flatten_index", "interpolate", "kappa_n", "unflatten_index",
    "Laplacian", "SpectralData", "ImplicitSolver", "build_laplacian",
    "spectral_data", "implicit_step", "explicit_step",
    "NoiseModel", "NoiseSlab", "CovarianceFactor", "FactorizationError",
    "build_covariance", "cell_covariance", "sample_slab",
    "sample_slab_sequence", "aggregate", "aggregation_matrix",
    "product_bound_exponents", "dump_factor", "load_factor",
    "IMPLICIT", "EXPLICIT", "CoefficientSet", "InitialCondition",
    "SchemeRun", "SchemeOverflowError", "StabilityError", "Trajectory",
    "run", "step_implicit", "step_explicit", "load_trajectory_binary",
    "KernelSpec", "RateCheckResult", "eval_kernel", "h_alpha_norm",
    "rate_check_space", "rate_check_time", "save_rate_csv",
    "TIME", "SPACE", "StudyPlan", "ConvergenceReport", "StudyAbortError",
    "run_study", "compute_errors", "loglog_regression",
    "theoretical_exponent",
    "__version__",
]
