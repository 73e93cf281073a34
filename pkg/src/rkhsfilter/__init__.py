"""Ensemble Kalman filtering with nonparametric observation-model error correction.

The package pairs a primary ensemble Kalman filter with a secondary Bayesian
filter that estimates the systematic error of a trusted-but-wrong observation
operator. The secondary likelihood is learned offline from (error, observation)
training pairs via kernel embedding of conditional distributions on a
data-driven diffusion-maps basis. Two synthetic testbeds exercise the method:
a cyclic 40-variable chaotic flow with randomly obstructed gridpoint readings,
and a stochastic cloud-topped column observed through a two-deck radiative
transfer model.
"""

from .diffmaps import BasisConfig, DiffusionBasis, diffusion_basis, kde_density
from .dynamics import (CloudColumnState, CloudModelConfig, IntegratorConfig,
                       cloud_column_step, integrate_l96, lorenz96_tendency,
                       simulate_cloud_column)
from .embedding import (EmbeddingConfig, EmbeddingModel, ExtrapolationError,
                        PriorSpec, SecondaryPosterior, likelihood_matrix,
                        likelihood_vector, posterior_stats, prior_params,
                        query_table)
from .embedding import train as train_embedding
from .enkf import (AdaptiveQR, FilterConfig, FilterModels, analysis_corrected,
                   analysis_standard, filter_step, forecast)
from .harness import (ExperimentConfig, PointResult, PRESETS, load_config,
                      preset, report, rmse, run_cloud, run_l96, sweep)
from .observation import (NoiseSpec, ObstructionConfig, TrainingPairs,
                          cloudy_observe_l96, generate_training_set,
                          implied_bias, observe_rtm)
from .rtm import (Channel, RtmConfig, brightness_clear, brightness_cloudy,
                  default_channels, weighting_function)

__version__ = "0.1.0"

__all__ = [
    "AdaptiveQR", "BasisConfig", "Channel", "CloudColumnState",
    "CloudModelConfig", "DiffusionBasis", "EmbeddingConfig", "EmbeddingModel",
    "ExperimentConfig", "ExtrapolationError", "FilterConfig", "FilterModels",
    "IntegratorConfig", "NoiseSpec", "ObstructionConfig", "PRESETS",
    "PointResult", "PriorSpec", "RtmConfig", "SecondaryPosterior",
    "TrainingPairs", "analysis_corrected", "analysis_standard",
    "brightness_clear", "brightness_cloudy", "cloud_column_step",
    "cloudy_observe_l96", "default_channels", "diffusion_basis", "filter_step",
    "forecast", "generate_training_set", "implied_bias", "integrate_l96",
    "kde_density", "likelihood_matrix", "likelihood_vector", "load_config",
    "lorenz96_tendency", "observe_rtm", "posterior_stats", "preset",
    "prior_params", "query_table", "report", "rmse", "run_cloud", "run_l96",
    "simulate_cloud_column", "sweep", "train_embedding", "weighting_function",
]
