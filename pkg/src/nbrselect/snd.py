"""Soft Neighborhood Density.

For L2-normalized features f_i, similarities S_ij = <f_i, f_j> are turned into a
neighbourhood distribution P_i over all *other* samples by a temperature
softmax; SND is the mean entropy of those distributions (in nats). A higher
value means target samples sit in dense neighbourhoods.

The production kernel never materialises the N x N similarity matrix: it walks
row tiles of height ``block_rows`` so peak memory is O(block_rows * N).
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .feature_store import LogitMatrix, ProbMatrix, SegmentationDump

DEFAULT_TEMPERATURE = 0.05
DEFAULT_BLOCK_ROWS = 256
DEFAULT_SUBSAMPLE_PIXELS = 100
DENSE_ORACLE_MAX_N = 5000
NORM_ATOL = 1e-9
THREADS_ENV = "NBRSELECT_THREADS"


@dataclass(frozen=True)
class FeatureMatrix:
    rows: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        rows = np.ascontiguousarray(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 1:
            raise ValueError(f"feature matrix must be non-empty 2-D, got shape {rows.shape}")
        if not np.isfinite(rows).all():
            raise ValueError("feature matrix contains non-finite values")
        if self.normalized:
            norms = np.linalg.norm(rows, axis=1)
            worst = int(np.argmax(np.abs(norms - 1.0)))
            if abs(norms[worst] - 1.0) > NORM_ATOL:
                raise ValueError(f"row {worst} has norm {norms[worst]:.12g}, expected 1")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def n_samples(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class SndConfig:
    temperature: float = DEFAULT_TEMPERATURE
    block_rows: int = DEFAULT_BLOCK_ROWS
    subsample_pixels: int = DEFAULT_SUBSAMPLE_PIXELS
    rng_seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.block_rows < 1:
            raise ValueError(f"block_rows must be >= 1, got {self.block_rows}")
        if self.subsample_pixels < 2:
            raise ValueError(f"subsample_pixels must be >= 2, got {self.subsample_pixels}")
        if self.rng_seed < 0:
            raise ValueError("rng_seed must be non-negative")


@dataclass(frozen=True)
class SndResult:
    value: float
    n_used: int
    per_sample_entropy: Optional[np.ndarray] = None


def l2_normalize(rows: np.ndarray) -> FeatureMatrix:
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValueError(f"cannot L2-normalize all-zero row {int(zero[0])}")
    return FeatureMatrix(rows / norms[:, None], normalized=True)


def prepare_features(probs: ProbMatrix) -> FeatureMatrix:
    """L2-normalize softmax rows; these are the features SND is computed on."""
    return l2_normalize(probs.rows)


def prepare_features_logits(logits: LogitMatrix) -> FeatureMatrix:
    """L2-normalized raw logits, for the no-softmax ablation."""
    return l2_normalize(logits.rows)


def _row_entropies(tile: np.ndarray, diag_cols: np.ndarray, inv_tau: float) -> np.ndarray:
    """Entropy of the diagonal-excluded temperature softmax for each tile row.

    ``tile`` holds similarity rows; ``diag_cols[r]`` is the column of row r's
    self-similarity, which is masked out before the softmax.
    """
    a = tile * inv_tau
    rows = np.arange(a.shape[0])
    a[rows, diag_cols] = -np.inf
    m = a.max(axis=1, keepdims=True)
    shifted = a - m
    e = np.exp(shifted)
    z = e.sum(axis=1)
    # masked entries: exp(-inf) = 0 and 0 * (-inf) must count as 0
    shifted[rows, diag_cols] = 0.0
    weighted = np.einsum("ij,ij->i", e, shifted)
    return np.log(z) - weighted / z


def _n_threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None


def snd(features: FeatureMatrix, config: SndConfig = SndConfig()) -> SndResult:
    """Blocked, numerically stable SND.

    Per row i with logits a_ij = S_ij / tau (j != i), shift m_i = max_j a_ij:
    H_i = ln Z_i - sum_j P_ij (a_ij - m_i), Z_i = sum_j exp(a_ij - m_i).
    Tiles are independent and may run on ``NBRSELECT_THREADS`` threads; each
    writes its own slice of the per-row vector, so the final mean is taken in
    a fixed order and results do not depend on scheduling.
    """
    if not features.normalized:
        raise ValueError("snd requires L2-normalized features")
    n = features.n_samples
    if n < 2:
        raise ValueError(f"snd needs at least 2 samples, got {n}")
    if not config.temperature > 0:
        raise ValueError("temperature must be positive")

    f = features.rows
    inv_tau = 1.0 / config.temperature
    h = np.empty(n)
    b = config.block_rows
    starts = range(0, n, b)

    def work(start: int) -> None:
        stop = min(start + b, n)
        tile = f[start:stop] @ f.T
        h[start:stop] = _row_entropies(tile, np.arange(start, stop), inv_tau)

    threads = _n_threads()
    if threads > 1 and n > b:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, starts))
    else:
        for s in starts:
            work(s)

    np.clip(h, 0.0, math.log(n - 1), out=h)
    return SndResult(value=float(h.mean()), n_used=n, per_sample_entropy=h)


def snd_dense_oracle(features: FeatureMatrix, temperature: float) -> SndResult:
    """Reference SND with an explicit N x N similarity and probability matrix.

    Deliberately naive: no shifting, no tiling. Only usable for moderate N and
    temperatures where exp(S / tau) does not overflow.
    """
    n = features.n_samples
    if n > DENSE_ORACLE_MAX_N:
        raise ValueError(f"dense oracle refuses N={n} > {DENSE_ORACLE_MAX_N}")
    if n < 2:
        raise ValueError("need at least 2 samples")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    f = features.rows
    s = f @ f.T
    k = np.exp(s / temperature)
    np.fill_diagonal(k, 0.0)
    p = k / k.sum(axis=1, keepdims=True)
    plogp = np.zeros_like(p)
    nz = p > 0
    plogp[nz] = p[nz] * np.log(p[nz])
    h = -plogp.sum(axis=1)
    return SndResult(value=float(h.mean()), n_used=n, per_sample_entropy=h)


def neighbourhood_probabilities(features: FeatureMatrix, temperature: float) -> np.ndarray:
    """The dense P matrix of the oracle, for inspection in tests."""
    f = features.rows
    k = np.exp(f @ f.T / temperature)
    np.fill_diagonal(k, 0.0)
    return k / k.sum(axis=1, keepdims=True)


def segmentation_pixel_indices(dump: SegmentationDump, config: SndConfig) -> list[np.ndarray]:
    """Sampled pixel indices per image, one independent stream per image index."""
    out = []
    for k in range(dump.n_images):
        n_pix = dump.pixel_rows(k).shape[0]
        if n_pix < config.subsample_pixels:
            raise ValueError(
                f"image {k} has {n_pix} pixels, fewer than subsample size {config.subsample_pixels}"
            )
        rng = np.random.default_rng([config.rng_seed, k])
        out.append(np.sort(rng.choice(n_pix, size=config.subsample_pixels, replace=False)))
    return out


def snd_segmentation(dump: SegmentationDump, config: SndConfig = SndConfig()) -> SndResult:
    """Mean over images of SND on ``subsample_pixels`` pixels drawn per image."""
    values = []
    for k, idx in enumerate(segmentation_pixel_indices(dump, config)):
        feats = l2_normalize(dump.pixel_rows(k)[idx])
        values.append(snd(feats, config).value)
    values = np.asarray(values)
    return SndResult(value=float(values.mean()), n_used=config.subsample_pixels, per_sample_entropy=None)
