"""Self-distilled vision encoders for eye imaging, on procedural toy data.

The package covers the full loop at desk scale: render labeled toy
datasets for eight imaging modalities, pretrain a small transformer
encoder per modality by self-distillation, attach shared task heads
(classification, segmentation, landmarks, biomarker regression,
progression forecasting), adapt by linear or few-shot probing, study
real:synthetic data mixes, and export attention maps.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .adaptation import (
    FewShotResult,
    ProbeConfig,
    ProbeResult,
    extract_features,
    few_shot_episode,
    few_shot_probe,
    linear_probe,
    probe_encoder,
    shuffled_label_probe,
)
from .autodiff import Tensor, no_grad, numeric_grad
from .encoder import (
    EncoderConfig,
    EncoderState,
    attention_maps,
    encode,
    encode_batch,
    encoder_forward,
    load_checkpoint,
    new_encoder,
    save_checkpoint,
)
from .errors import ConfigError, DataError, EyelabError, NumericalError
from .explain import (
    AttentionMapSet,
    attention_evolution,
    export_attention,
    export_overlay,
    foreground_mass,
    head_attention,
)
from .heads import (
    ClassifierHead,
    ForecastHead,
    LandmarkHead,
    RegressorHead,
    SegmenterHead,
    detect_landmarks,
    forecast_prob,
    head_digest,
    load_head,
    save_head,
    soft_argmax,
)
from .metrics import (
    MetricReport,
    biomarker_accuracy,
    bootstrap_ci,
    dice,
    f1_binary,
    landmark_error,
    macro_f1,
    mean_dice,
    ovr_auc,
    pr_curve_and_ap,
    r_squared,
    roc_auc,
    roc_curve,
)
from .pretrain import SelfDistillConfig, multi_crop, pretrain, projection_spread
from .records import (
    ImageRecord,
    Manifest,
    Modality,
    load_manifest,
    manifest_digest,
    save_manifest,
    split_dataset,
)
from .synthetic import (
    GeneratorConfig,
    MixPlan,
    SweepConfig,
    fit_generator,
    mix_datasets,
    run_ratio_sweep,
    sample_synthetic,
    score_turing_csv,
)
from .toydata import ToyDataSpec, ToyTask, generate_toy_dataset
from .training import (
    TrainConfig,
    evaluate_task,
    finetune_task,
    train_head_for_task,
)

__all__ = [
    "__version__",
    "AttentionMapSet",
    "ClassifierHead",
    "ConfigError",
    "DataError",
    "EncoderConfig",
    "EncoderState",
    "EyelabError",
    "FewShotResult",
    "ForecastHead",
    "GeneratorConfig",
    "ImageRecord",
    "LandmarkHead",
    "Manifest",
    "MetricReport",
    "MixPlan",
    "Modality",
    "NumericalError",
    "ProbeConfig",
    "ProbeResult",
    "RegressorHead",
    "SegmenterHead",
    "SelfDistillConfig",
    "SweepConfig",
    "Tensor",
    "ToyDataSpec",
    "ToyTask",
    "TrainConfig",
    "attention_evolution",
    "attention_maps",
    "biomarker_accuracy",
    "bootstrap_ci",
    "detect_landmarks",
    "dice",
    "encode",
    "encode_batch",
    "encoder_forward",
    "evaluate_task",
    "export_attention",
    "export_overlay",
    "extract_features",
    "f1_binary",
    "few_shot_episode",
    "few_shot_probe",
    "finetune_task",
    "fit_generator",
    "forecast_prob",
    "foreground_mass",
    "generate_toy_dataset",
    "head_attention",
    "head_digest",
    "landmark_error",
    "linear_probe",
    "load_checkpoint",
    "load_head",
    "load_manifest",
    "macro_f1",
    "manifest_digest",
    "mean_dice",
    "mix_datasets",
    "multi_crop",
    "new_encoder",
    "no_grad",
    "numeric_grad",
    "ovr_auc",
    "pr_curve_and_ap",
    "pretrain",
    "probe_encoder",
    "projection_spread",
    "r_squared",
    "roc_auc",
    "roc_curve",
    "run_ratio_sweep",
    "sample_synthetic",
    "save_checkpoint",
    "save_head",
    "save_manifest",
    "score_turing_csv",
    "shuffled_label_probe",
    "soft_argmax",
    "split_dataset",
    "train_head_for_task",
]
