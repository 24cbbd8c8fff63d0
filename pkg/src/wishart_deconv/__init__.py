"""Deconvolution density estimation on the cone of 2x2 positive-definite matrices."""

from .estimator import (
    DensityGrid,
    EstimationError,
    EstimatorConfig,
    GridSpec,
    deconvolve,
    mise_against,
    risk_curve,
    select_cutoff,
    unbiased_risk,
)
from .finance import (
    PriceSeries,
    WeeklyCovariance,
    estimate_from_prices,
    fill_and_weekly,
    parse_prices,
)
from .sampling import (
    BIMODAL,
    UNIMODAL,
    MixtureSpec,
    ProtocolConfig,
    run_protocol,
    run_study,
    sample_wishart,
)
from .spd import EigenPair, PolarPoint, SpdMatrix, UpperTriangular, convolve, eigen_sorted
from .special import KAPPA2, conical_legendre, conical_legendre_mehler, log_gamma_complex, multivariate_gamma_log
from .transform import (
    CutoffRegion,
    QuadratureSpec,
    SpectralPoint,
    empirical_transform,
    forward_transform_numeric,
    inverse_transform,
    spherical_function,
    wishart_transform,
)

__version__ = "0.1.0"
