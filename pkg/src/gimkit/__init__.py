"""Bootstrap generalized inferential models for M- and Z-estimation targets."""

from .engine import (BootstrapDistribution, ContourTable, PlausibilityRegion, build_distribution,
                     contour_at, contour_grid, exact_bootstrap, lower_probability, marginal_contour,
                     plausibility_region, sample_weights, t_bootstrap, t_observed, upper_probability)
from .errors import ConvergenceError, DomainError, GimError, SingularityError, SolverQualityError
from .estimation import EstimateResult, solve
from .problems import (AffineFeature, Dataset, DTRProblem, MProblem, QuantileProblem,
                       QuantileRegressionProblem, SpatialMedianProblem, ZProblem, read_csv)

__version__ = "0.1.0"
