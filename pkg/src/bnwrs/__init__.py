"""Weight-norm dynamics and weight-rescaling regularization for
batch-normalized networks.

The package bundles a small float64 autodiff core, BN network building
blocks, the SGD/Adam optimizer family with a momentum-projection variant,
weight decay and periodic weight-rescaling regularizers, an analysis
pipeline (norm trajectories, generalized-Gaussian sparsity fits,
input-space projection), a config-driven experiment harness, and
scikit-learn style estimator wrappers.
"""

from .analysis import (
    CovarianceSummary,
    GGDFit,
    NormTrajectory,
    continuous_decay_reference,
    ema,
    estimate_feature_covariance,
    fit_ggd,
    ggd_logpdf,
    ggd_sample,
    project_weights_isp,
    record_step_metrics,
    sparsity_profile,
    spearman,
)
from .config import (
    DatasetConfig,
    ExperimentConfig,
    OptimizerConfig,
    SweepSpec,
    config_from_dict,
    load_config,
    load_sweep_spec,
)
from .datasets import load_idx_dataset, make_synthetic, split_train_test
from .errors import ConfigError, DataFormatError, NumericalAbortError
from .estimators import BNNetClassifier, GeneralizedGaussian, InputSpaceProjection
from .layers import (
    BatchNormState,
    Network,
    batchnorm_forward,
    bn_layer_forward,
    build_network,
    slice_norms,
    weight_standardize,
)
from .optim import (
    LrSchedule,
    Optimizer,
    OptimizerState,
    adam_step,
    adamp_step,
    effective_gradient_norm,
    sgd_step,
)
from .regularize import (
    LAMBDA_GRID,
    TAU_GRID,
    RegularizerConfig,
    apply_regularizer_step,
    wd_gradient_contribution,
    weight_rescale,
    weight_rescale_ic,
)
from .runner import (
    Trainer,
    emit_plotdata,
    evaluate,
    load_snapshot,
    run_experiment,
    run_sweep,
    save_snapshot,
)
from .tensor import Tensor, backward, conv2d, matmul, no_grad, relu, softmax_xent

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "matmul", "conv2d", "relu", "softmax_xent", "no_grad",
    "BatchNormState", "batchnorm_forward", "bn_layer_forward", "weight_standardize",
    "Network", "build_network", "slice_norms",
    "OptimizerState", "Optimizer", "LrSchedule", "sgd_step", "adam_step",
    "adamp_step", "effective_gradient_norm",
    "RegularizerConfig", "weight_rescale", "weight_rescale_ic",
    "apply_regularizer_step", "wd_gradient_contribution", "LAMBDA_GRID", "TAU_GRID",
    "NormTrajectory", "GGDFit", "CovarianceSummary", "record_step_metrics",
    "continuous_decay_reference", "fit_ggd", "ggd_logpdf", "ggd_sample",
    "estimate_feature_covariance", "project_weights_isp", "sparsity_profile",
    "ema", "spearman",
    "load_idx_dataset", "make_synthetic", "split_train_test",
    "ExperimentConfig", "DatasetConfig", "OptimizerConfig", "SweepSpec",
    "load_config", "load_sweep_spec", "config_from_dict",
    "Trainer", "evaluate", "run_experiment", "run_sweep", "emit_plotdata",
    "save_snapshot", "load_snapshot",
    "BNNetClassifier", "GeneralizedGaussian", "InputSpaceProjection",
    "ConfigError", "DataFormatError", "NumericalAbortError",
    "__version__",
]
