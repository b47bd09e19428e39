"""Unfolded RED reconstruction with stochastic data-consistency layers.

Subpackages are importable directly; the most used names are re-exported
here for convenience.
"""

from .operators import (
    ComponentOperator,
    ForwardModel,
    MeasurementSet,
    make_radon_model,
    make_conv_model,
    model_from_config,
    full_gradient,
    minibatch_gradient,
    bp_init,
    fbp_init,
    add_awgn_to_input_snr,
)
from .unfolding import (
    PriorNet,
    UnfoldConfig,
    UnfoldOutput,
    sgdnet_forward,
    ured_forward,
    r_theta_apply,
    d_theta,
)
from .training import (
    Dataset,
    TrainConfig,
    TrainTrace,
    Checkpoint,
    DivergenceError,
    CheckpointError,
    train_unfolded,
    pretrain_artifact_removal,
    save_checkpoint,
    load_checkpoint,
)
from .baselines import (
    TVConfig,
    REDConfig,
    tv_apgm,
    tv_prox,
    red_fixed_point,
    train_denoiser,
    power_iteration_lipschitz,
)
from .metrics import affine_fit, snr_db, ssim, MetricReport, write_metrics_csv
from .phantoms import make_phantom, make_phantoms
from .theory import (
    SweepProblem,
    standard_problem,
    check_phi_unbiasedness,
    check_variance_scaling,
    check_training_gradient_unbiasedness,
    theorem1_sweep,
    evaluate_sweep,
    ToleranceFailure,
)
from .configs import ConfigError, load_config, validate_config

__version__ = "0.1.0"

__all__ = [
    "ComponentOperator", "ForwardModel", "MeasurementSet",
    "make_radon_model", "make_conv_model", "model_from_config",
    "full_gradient", "minibatch_gradient", "bp_init", "fbp_init",
    "add_awgn_to_input_snr",
    "PriorNet", "UnfoldConfig", "UnfoldOutput", "sgdnet_forward",
    "ured_forward", "r_theta_apply", "d_theta",
    "Dataset", "TrainConfig", "TrainTrace", "Checkpoint",
    "DivergenceError", "CheckpointError", "train_unfolded",
    "pretrain_artifact_removal", "save_checkpoint", "load_checkpoint",
    "TVConfig", "REDConfig", "tv_apgm", "tv_prox", "red_fixed_point",
    "train_denoiser", "power_iteration_lipschitz",
    "affine_fit", "snr_db", "ssim", "MetricReport", "write_metrics_csv",
    "make_phantom", "make_phantoms",
    "SweepProblem", "standard_problem", "check_phi_unbiasedness",
    "check_variance_scaling", "check_training_gradient_unbiasedness",
    "theorem1_sweep", "evaluate_sweep", "ToleranceFailure",
    "ConfigError", "load_config", "validate_config",
]
