"""Gaussian source/target generator for the toy experiments."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class ToyConfig:
    """One synthetic two-class adaptation problem plus its training settings.

    Source classes are isotropic Gaussians at ``source_means``. The target
    holds ``n_per_class`` points for every class in ``target_classes``; the
    Gaussians of ``shifted_classes`` are moved by ``target_shift`` and, when
    ``target_modes > 1``, split into modes evenly spaced on a circle of
    ``mode_radius`` around the shifted mean, starting at ``mode_angle``.

    Defaults give the false-alignment fixture: a partial target holding only
    class 1, shifted toward the class boundary and split into two modes lying
    across the class axis.
    """

    source_means: tuple = ((0.0, 0.0), (5.0, 5.0))
    source_std: float = 1.0
    target_std: Optional[float] = None  # None: same as source_std
    target_shift: tuple = (-1.5, -1.5)
    shifted_classes: tuple = (1,)
    target_classes: tuple = (1,)
    target_modes: int = 2
    mode_radius: float = 3.5
    mode_angle: float = -math.pi / 4
    n_per_class: int = 200
    lambda_adv: float = 1.0
    hidden_units: int = 15
    domain_hidden: int = 15
    epochs: int = 3000
    learning_rate: float = 0.3
    standardize: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_per_class < 10:
            raise ValueError("n_per_class must be >= 10")
        if self.hidden_units < 2:
            raise ValueError("hidden_units must be >= 2")
        if self.domain_hidden < 0:
            raise ValueError("domain_hidden must be >= 0")
        if self.source_std <= 0 or (self.target_std is not None and self.target_std <= 0):
            raise ValueError("standard deviations must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lambda_adv < 0:
            raise ValueError("lambda_adv must be >= 0")
        if self.target_modes < 1:
            raise ValueError("target_modes must be >= 1")
        if self.rng_seed < 0:
            raise ValueError("rng_seed must be non-negative")
        n_cls = len(self.source_means)
        if n_cls < 2:
            raise ValueError("need at least two source classes")
        if not self.target_classes:
            raise ValueError("target_classes must not be empty")
        for c in (*self.shifted_classes, *self.target_classes):
            if not 0 <= c < n_cls:
                raise ValueError(f"class index {c} out of range for {n_cls} source classes")

    def with_(self, **overrides) -> "ToyConfig":
        return replace(self, **overrides)

    @property
    def n_classes(self) -> int:
        return len(self.source_means)


@dataclass(frozen=True)
class ToyData:
    xs: np.ndarray
    ys: np.ndarray
    xt: np.ndarray
    yt: np.ndarray  # target ground truth, evaluation only


def target_centers(config: ToyConfig, cls: int) -> np.ndarray:
    center = np.asarray(config.source_means[cls], dtype=float)
    if cls in config.shifted_classes:
        center = center + np.asarray(config.target_shift, dtype=float)
    if config.target_modes == 1 or cls not in config.shifted_classes:
        return center[None, :]
    angles = config.mode_angle + 2 * np.pi * np.arange(config.target_modes) / config.target_modes
    return center + config.mode_radius * np.column_stack([np.cos(angles), np.sin(angles)])


def _split(total: int, parts: int) -> np.ndarray:
    counts = np.full(parts, total // parts)
    counts[: total % parts] += 1
    return counts


def sample_source(config: ToyConfig, n_per_class: int, rng: np.random.Generator):
    xs = [rng.normal(mu, config.source_std, size=(n_per_class, 2)) for mu in config.source_means]
    ys = [np.full(n_per_class, c) for c in range(config.n_classes)]
    return np.vstack(xs), np.concatenate(ys)


def generate_toy_data(config: ToyConfig) -> ToyData:
    """Draw source and target sets; deterministic in ``config.rng_seed``."""
    rng = np.random.default_rng([config.rng_seed, 0])
    xs, ys = sample_source(config, config.n_per_class, rng)
    std_t = config.source_std if config.target_std is None else config.target_std
    xt, yt = [], []
    for c in config.target_classes:
        centers = target_centers(config, c)
        for mu, k in zip(centers, _split(config.n_per_class, len(centers))):
            xt.append(rng.normal(mu, std_t, size=(k, 2)))
            yt.append(np.full(k, c))
    return ToyData(xs, ys, np.vstack(xt), np.concatenate(yt))


def generate_source_validation(config: ToyConfig, per_class: int = 3):
    """Held-out labelled source draw, independent of the training sample."""
    rng = np.random.default_rng([config.rng_seed, 2])
    return sample_source(config, per_class, rng)
