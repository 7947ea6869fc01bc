"""Unsupervised model selection for domain adaptation via Soft Neighborhood Density."""

from .baselines import (
    CriterionScore,
    DevConfig,
    ImportanceWeights,
    class_entropy,
    dev_risk,
    fit_domain_discriminator,
    iwv_risk,
    relative_within_class_variance,
    source_risk,
)
from .feature_store import (
    LabelVector,
    LogitMatrix,
    Manifest,
    ProbMatrix,
    SegmentationDump,
    load_labels,
    load_logit_matrix,
    load_manifest,
    load_prob_matrix,
    load_segmentation,
)
from .selection import SelectionReport, emit_report, score_manifest, select_source_domain
from .snd import (
    FeatureMatrix,
    SndConfig,
    SndResult,
    prepare_features,
    prepare_features_logits,
    snd,
    snd_dense_oracle,
    snd_segmentation,
)

__version__ = "0.1.0"

__all__ = [
    "CriterionScore",
    "DevConfig",
    "ImportanceWeights",
    "class_entropy",
    "dev_risk",
    "fit_domain_discriminator",
    "iwv_risk",
    "relative_within_class_variance",
    "source_risk",
    "LabelVector",
    "LogitMatrix",
    "Manifest",
    "ProbMatrix",
    "SegmentationDump",
    "load_labels",
    "load_logit_matrix",
    "load_manifest",
    "load_prob_matrix",
    "load_segmentation",
    "SelectionReport",
    "emit_report",
    "score_manifest",
    "select_source_domain",
    "FeatureMatrix",
    "SndConfig",
    "SndResult",
    "prepare_features",
    "prepare_features_logits",
    "snd",
    "snd_dense_oracle",
    "snd_segmentation",
]
