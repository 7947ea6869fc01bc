"""Comparison criteria: class entropy, source risk, IWV and DEV.

IWV/DEV weights come from a logistic domain discriminator fitted on source
validation vs target features. The DEV estimator follows You et al. (2019),
"Towards Accurate Model Selection in Deep Unsupervised Domain Adaptation":
the importance-weighted loss is corrected with the control variate W, whose
expectation is known to be 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import entr, expit

from .feature_store import LabelVector, ProbMatrix, SegmentationDump
from .snd import FeatureMatrix

MAXIMIZE = "maximize"
MINIMIZE = "minimize"

DIRECTIONS = {
    "snd": MAXIMIZE,
    "snd_no_softmax": MAXIMIZE,
    "c_ent": MINIMIZE,
    "source_risk": MINIMIZE,
    "iwv": MINIMIZE,
    "dev": MINIMIZE,
}


@dataclass(frozen=True)
class CriterionScore:
    criterion: str
    value: float

    def __post_init__(self):
        if self.criterion not in DIRECTIONS:
            raise ValueError(f"unknown criterion {self.criterion!r}")

    @property
    def direction(self) -> str:
        return DIRECTIONS[self.criterion]


@dataclass(frozen=True)
class DevConfig:
    val_per_class: int = 3  # cap on source-validation rows per class; 0 keeps all
    discriminator_epochs: int = 200
    discriminator_lr: float = 0.1
    l2_penalty: float = 1e-3
    rng_seed: int = 0
    weight_clip: float = 20.0

    def __post_init__(self):
        if self.val_per_class < 0:
            raise ValueError("val_per_class must be >= 0")
        if self.discriminator_epochs < 0:
            raise ValueError("discriminator_epochs must be >= 0")
        if not self.discriminator_lr > 0:
            raise ValueError("discriminator_lr must be positive")
        if self.l2_penalty < 0:
            raise ValueError("l2_penalty must be non-negative")
        if not self.weight_clip > 1:
            raise ValueError("weight_clip must be > 1")


@dataclass(frozen=True)
class ImportanceWeights:
    weights: np.ndarray
    source_prob: np.ndarray

    def __len__(self) -> int:
        return self.weights.shape[0]


def class_entropy(probs: Union[ProbMatrix, SegmentationDump]) -> CriterionScore:
    """Mean Shannon entropy (nats) of the predicted class distributions.

    For a segmentation dump the mean runs over every pixel of every image.
    """
    if isinstance(probs, SegmentationDump):
        rows = np.vstack([probs.pixel_rows(k) for k in range(probs.n_images)])
    else:
        rows = probs.rows
    return CriterionScore("c_ent", float(entr(rows).sum(axis=1).mean()))


def zero_one_losses(probs: ProbMatrix, labels: LabelVector) -> np.ndarray:
    """Per-sample 0/1 error; argmax ties go to the lowest class index."""
    labels.check_against(probs.n_samples, probs.n_classes)
    return (probs.rows.argmax(axis=1) != labels.labels).astype(np.float64)


def source_val_subset(labels: LabelVector, per_class: int, rng_seed: int = 0) -> np.ndarray:
    """Sorted row indices keeping at most ``per_class`` rows of each class.

    Classes with more rows are subsampled without replacement from a stream
    seeded by ``rng_seed``; ``per_class = 0`` keeps every row.
    """
    y = labels.labels
    if per_class == 0:
        return np.arange(y.shape[0])
    rng = np.random.default_rng(rng_seed)
    keep = []
    for c in np.unique(y):
        rows = np.flatnonzero(y == c)
        keep.append(rows if rows.size <= per_class else rng.choice(rows, size=per_class, replace=False))
    return np.sort(np.concatenate(keep))


def source_risk(probs: ProbMatrix, labels: LabelVector) -> CriterionScore:
    return CriterionScore("source_risk", float(zero_one_losses(probs, labels).mean()))


def fit_domain_discriminator(
    source_val: FeatureMatrix, target: FeatureMatrix, config: DevConfig = DevConfig()
) -> ImportanceWeights:
    """Logistic regression separating source (1) from target (0), full-batch GD.

    The weight of source sample i estimates p_t(x_i) / p_s(x_i) by the odds
    (n_s / n_t) * (1 - d_i) / d_i, clipped to ``config.weight_clip``.
    """
    xs, xt = source_val.rows, target.rows
    if xs.shape[1] != xt.shape[1]:
        raise ValueError(f"feature dims differ: source {xs.shape[1]}, target {xt.shape[1]}")
    n_s, n_t = xs.shape[0], xt.shape[0]
    if n_s == 0 or n_t == 0:
        raise ValueError("discriminator needs samples from both domains")

    x = np.vstack([xs, xt])
    y = np.concatenate([np.ones(n_s), np.zeros(n_t)])
    rng = np.random.default_rng(config.rng_seed)
    w = rng.normal(scale=1e-3, size=x.shape[1])
    b = 0.0
    n = x.shape[0]
    for _ in range(config.discriminator_epochs):
        d = expit(x @ w + b)
        r = d - y
        w -= config.discriminator_lr * (x.T @ r / n + config.l2_penalty * w)
        b -= config.discriminator_lr * r.mean()

    d = np.clip(expit(xs @ w + b), 1e-12, 1 - 1e-12)
    weights = (n_s / n_t) * (1.0 - d) / d
    weights = np.clip(weights, 1e-12, config.weight_clip)
    return ImportanceWeights(weights=weights, source_prob=d)


def _paired(losses, weights: ImportanceWeights) -> tuple[np.ndarray, np.ndarray]:
    l = np.asarray(losses, dtype=np.float64)
    w = np.asarray(weights.weights, dtype=np.float64)
    if l.shape != w.shape:
        raise ValueError(f"losses ({l.shape[0]}) and weights ({w.shape[0]}) differ in length")
    return l, w


def iwv_risk(losses, weights: ImportanceWeights) -> CriterionScore:
    l, w = _paired(losses, weights)
    return CriterionScore("iwv", float(np.mean(w * l)))


def dev_risk(losses, weights: ImportanceWeights) -> CriterionScore:
    """Importance-weighted risk with a control variate on the weights.

    ``control_eta`` is chosen to minimise variance: -Cov(WL, W) / Var(W).
    Degenerate (constant) weights fall back to the plain IWV risk.
    """
    l, w = _paired(losses, weights)
    if l.shape[0] < 2:
        raise ValueError("dev_risk needs at least 2 samples")
    wl = w * l
    var_w = np.var(w, ddof=1)
    if var_w < 1e-12:
        control_eta = 0.0
    else:
        control_eta = -np.cov(wl, w, ddof=1)[0, 1] / var_w
    value = wl.mean() + control_eta * w.mean() - control_eta
    return CriterionScore("dev", float(value))


def relative_within_class_variance(features: FeatureMatrix, labels: LabelVector) -> float:
    """Within-class scatter divided by total scatter, in [0, 1]."""
    x = features.rows
    y = labels.labels
    if y.shape[0] != x.shape[0]:
        raise ValueError("labels and features differ in length")
    total = float(((x - x.mean(axis=0)) ** 2).sum())
    if total <= 0.0:
        raise ValueError("total variance is zero")
    within = 0.0
    for c in np.unique(y):
        xc = x[y == c]
        within += float(((xc - xc.mean(axis=0)) ** 2).sum())
    return min(within / total, 1.0)
