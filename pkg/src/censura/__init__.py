"""Censored-regression uncertainty quantification.

Tobit-style losses that learn from censored labels, seven predictive
models with aleatoric/epistemic uncertainty estimates, censoring-adapted
evaluation metrics, date-ordered temporal splits, and a synthetic
ground-truth generator for end-to-end verification.
"""

from .dataset import (
    CensoredDataset,
    ColumnSchema,
    TemporalSettings,
    aggregate_duplicates,
    extract_control,
    hash_featurize,
    load_csv,
    observed_subset,
    save_csv,
    temporal_split,
)
from .evaluation import (
    CalibrationCurve,
    EvaluationReport,
    ablation_delta_nll,
    calibration_curve,
    compare_models,
    eval_ence,
    eval_mse,
    eval_nll,
    evaluate,
    inverse_normal_cdf,
    mann_whitney_u,
)
from .losses import (
    BatchTargets,
    EvidentialOutput,
    bbb_objective,
    censored_error,
    censored_mse,
    censored_nll,
    evidential_loss,
    evidential_uncertainties,
    kl_diag_gaussians,
)
from .models import (
    ForestParams,
    ModelKind,
    TrainedModel,
    UncertainPrediction,
    ensemble_aggregate,
    forest_fit,
    gaussian_ensemble_aggregate,
    predict,
    train,
)
from .network import (
    NetworkSpec,
    NetworkState,
    TrainConfig,
    TrainingLog,
    adam_step,
    backward,
    fit,
    forward,
    grid_search,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import (
    GaussianParams,
    gauss_cdf,
    gauss_log_cdf,
    gauss_log_pdf,
    gauss_log_survival,
    softplus,
)
from .synthgen import GroundTruth, SynthSpec, generate, oracle_predictions

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
