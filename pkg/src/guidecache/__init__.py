"""Sparse classifier-free guidance schedules and calibrated feature caching
for diffusion samplers, with analytic toy models for exact checks."""

from .cache import (
    CachedPredictor,
    CachePolicy,
    CalibrationBank,
    RankConfig,
    RankObjective,
    collect_calibration_data,
    fit_bank,
    fit_calibration,
    optimize_ranks,
    uniform_configs,
)
from .diffusion import (
    ConfigurationError,
    GuidanceSchedule,
    NoiseSchedule,
    NumericalDivergenceError,
    apply_cfg,
    build_noise_schedule,
    ddim_step,
    deviation_scale,
    deviation_switch,
    make_grid,
    sample,
)
from .evo import EvoConfig, optimize_schedule, rank_weights
from .experiments import bench, blocknet_testbed, calibrate, repro_fig2
from .metrics import PassLedger, count_passes, energy_distance, wasserstein_1d
from .toy import BlockNet, GaussianMixture, MixtureDenoiser, exact_eps, mixture_guided_target

__version__ = "0.1.0"
