"""Second-order Tweedie posterior sampling with closed-form Gaussian and mixture oracles."""

from .operators import LatentCodec, LinearOperator, MeasurementTask, make_task
from .samplers import RunReport, SamplerConfig, first_order_invert, sample_prior, stsl_biased_invert, stsl_invert
from .schedule import NoiseSchedule, build_schedule
from .scoremodels import GaussianMixturePrior, GaussianPrior, MixtureScore
from .tweedie import SurrogateTerms, posterior_cov, posterior_mean

__all__ = [
    "GaussianMixturePrior",
    "GaussianPrior",
    "LatentCodec",
    "LinearOperator",
    "MeasurementTask",
    "MixtureScore",
    "NoiseSchedule",
    "RunReport",
    "SamplerConfig",
    "SurrogateTerms",
    "build_schedule",
    "first_order_invert",
    "make_task",
    "posterior_cov",
    "posterior_mean",
    "sample_prior",
    "stsl_biased_invert",
    "stsl_invert",
]
