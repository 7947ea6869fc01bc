import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group, spearmanr

from nbrselect.feature_store import ProbMatrix, SegmentationDump
from nbrselect.snd import (
    FeatureMatrix,
    SndConfig,
    l2_normalize,
    neighbourhood_probabilities,
    prepare_features,
    segmentation_pixel_indices,
    snd,
    snd_dense_oracle,
    snd_segmentation,
)
from synth import random_probs


def unit_rows(rng, n, d):
    return l2_normalize(rng.normal(size=(n, d)))


def test_identical_vectors_give_ln_n_minus_one():
    f = l2_normalize(np.tile([0.3, 0.4, 0.5], (5, 1)))
    for tau in (0.01, 0.05, 1.0):
        assert snd(f, SndConfig(temperature=tau)).value == pytest.approx(math.log(4), abs=1e-9)


def test_two_samples_have_zero_entropy():
    f = unit_rows(np.random.default_rng(0), 2, 3)
    assert abs(snd(f).value) <= 1e-12


def test_one_hot_classes():
    # 8 one-hot rows over 2 classes: 4 per class, each row's only near neighbours are its 3 twins
    rows = np.repeat(np.eye(2), 4, axis=0)
    got = snd(l2_normalize(rows)).value
    # exact: 3 neighbours at weight e^20, 4 at weight 1
    w = np.array([math.exp(20.0)] * 3 + [1.0] * 4)
    p = w / w.sum()
    assert got == pytest.approx(float(-(p * np.log(p)).sum()), abs=1e-12)
    assert got == pytest.approx(math.log(3), abs=1e-6)


def test_prepare_features_fixed_points():
    f = prepare_features(ProbMatrix(np.array([[1.0, 0.0], [0.5, 0.5]])))
    np.testing.assert_allclose(f.rows, [[1.0, 0.0], [math.sqrt(0.5), math.sqrt(0.5)]], atol=1e-15)
    rng = np.random.default_rng(11)
    for rows in (random_probs(rng, 50, 10).rows, rng.normal(size=(20, 5))):
        np.testing.assert_allclose(np.linalg.norm(l2_normalize(rows).rows, axis=1), 1.0, atol=1e-12)


def test_l2_normalize():
    np.testing.assert_allclose(l2_normalize(np.array([[3.0, 4.0]])).rows, [[0.6, 0.8]])
    with pytest.raises(ValueError, match="all-zero row 1"):
        l2_normalize(np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_unnormalized_features_rejected():
    with pytest.raises(ValueError):
        snd(FeatureMatrix(np.array([[1.0, 1.0], [1.0, 0.0]])))
    with pytest.raises(ValueError, match="norm"):
        FeatureMatrix(np.array([[1.0, 1.0]]), normalized=True)


def test_single_sample_rejected():
    with pytest.raises(ValueError, match="at least 2"):
        snd(l2_normalize(np.array([[1.0, 0.0]])))


@pytest.mark.parametrize("n", [2, 3, 17, 200])
@pytest.mark.parametrize("block", [1, 7, 64, 256, 10_000])
def test_blocked_matches_dense(n, block):
    f = prepare_features(random_probs(np.random.default_rng(n), n, 10))
    dense = snd_dense_oracle(f, 0.05).value
    got = snd(f, SndConfig(block_rows=block)).value
    assert got == pytest.approx(dense, rel=1e-6, abs=1e-12)


def test_threaded_is_bit_identical(monkeypatch):
    f = prepare_features(random_probs(np.random.default_rng(5), 700, 12))
    monkeypatch.delenv("NBRSELECT_THREADS", raising=False)
    one = snd(f, SndConfig(block_rows=64))
    monkeypatch.setenv("NBRSELECT_THREADS", "4")
    four = snd(f, SndConfig(block_rows=64))
    assert one.value == four.value
    np.testing.assert_array_equal(one.per_sample_entropy, four.per_sample_entropy)


def test_bad_thread_env(monkeypatch):
    monkeypatch.setenv("NBRSELECT_THREADS", "many")
    f = unit_rows(np.random.default_rng(0), 600, 3)
    with pytest.raises(ValueError, match="NBRSELECT_THREADS"):
        snd(f)


def test_dense_oracle_size_cap():
    f = FeatureMatrix(np.tile([1.0, 0.0], (5001, 1)), normalized=True)
    with pytest.raises(ValueError, match="refuses"):
        snd_dense_oracle(f, 0.05)


def test_low_temperature_stays_finite():
    # naive exp(S / tau) overflows at tau = 1e-4; the shifted kernel must not
    f = prepare_features(random_probs(np.random.default_rng(6), 50, 4))
    r = snd(f, SndConfig(temperature=1e-4))
    assert np.isfinite(r.value) and 0.0 <= r.value <= math.log(49)


def test_diagonal_excluded():
    f = unit_rows(np.random.default_rng(7), 9, 4)
    p = neighbourhood_probabilities(f, 0.05)
    np.testing.assert_array_equal(np.diag(p), 0.0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_spread_lowers_density():
    # unit vectors on an arc; widening the arc can only sharpen each neighbourhood
    u = np.random.default_rng(8).uniform(-1, 1, 60)
    values = []
    for width in (0.05, 0.1, 0.2, 0.4, 0.8):
        ang = width * u
        values.append(snd(FeatureMatrix(np.column_stack([np.cos(ang), np.sin(ang)]), normalized=True)).value)
    assert all(a > b for a, b in zip(values, values[1:]))


def test_two_cluster_noise_sweep():
    rng = np.random.default_rng(12)
    centers = np.repeat(np.array([[1.0, 0.2, 0.1], [0.1, 0.3, 1.0]]), 40, axis=0)
    z = rng.normal(size=centers.shape)
    sigmas = (0.02, 0.05, 0.1, 0.2, 0.4)
    values = [snd(l2_normalize(np.abs(centers + s * z))).value for s in sigmas]
    assert spearmanr(sigmas, values).statistic <= -0.9


def test_config_validation():
    with pytest.raises(ValueError):
        SndConfig(temperature=0.0)
    with pytest.raises(ValueError):
        SndConfig(block_rows=0)
    with pytest.raises(ValueError):
        SndConfig(subsample_pixels=1)


# --- properties ---------------------------------------------------------------

feature_sets = st.tuples(st.integers(2, 40), st.integers(2, 12), st.integers(0, 2**32 - 1))


@settings(max_examples=200, deadline=None)
@given(feature_sets, st.sampled_from([0.01, 0.05, 0.3, 2.0]))
def test_bounds(shape, tau):
    n, d, seed = shape
    f = prepare_features(random_probs(np.random.default_rng(seed), n, d))
    v = snd(f, SndConfig(temperature=tau)).value
    assert 0.0 <= v <= math.log(n - 1) + 1e-12


@settings(max_examples=100, deadline=None)
@given(feature_sets)
def test_permutation_invariance(shape):
    n, d, seed = shape
    rng = np.random.default_rng(seed)
    f = prepare_features(random_probs(rng, n, d))
    perm = rng.permutation(n)
    a = snd(f).value
    b = snd(FeatureMatrix(f.rows[perm], normalized=True)).value
    assert abs(a - b) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(feature_sets)
def test_rotation_invariance(shape):
    n, d, seed = shape
    rng = np.random.default_rng(seed)
    f = unit_rows(rng, n, d)
    q = ortho_group.rvs(d, random_state=rng)
    rotated = FeatureMatrix(f.rows @ q, normalized=True)
    assert abs(snd(f).value - snd(rotated).value) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(feature_sets)
def test_high_temperature_limit(shape):
    n, d, seed = shape
    f = unit_rows(np.random.default_rng(seed), n, d)
    assert snd(f, SndConfig(temperature=1e6)).value == pytest.approx(math.log(n - 1), abs=1e-3)


@settings(max_examples=100, deadline=None)
@given(feature_sets, st.integers(1, 50))
def test_block_size_invariance(shape, block):
    n, d, seed = shape
    f = prepare_features(random_probs(np.random.default_rng(seed), n, d))
    ref = snd(f).value
    assert snd(f, SndConfig(block_rows=block)).value == pytest.approx(ref, rel=1e-12, abs=1e-15)


# --- segmentation ---------------------------------------------------------------


def seg_dump(rng, shapes, c=4):
    imgs = []
    for h, w in shapes:
        x = rng.random((h, w, c))
        imgs.append(x / x.sum(axis=2, keepdims=True))
    return SegmentationDump(tuple(imgs))


def test_segmentation_identical_pixels():
    dump = SegmentationDump((np.tile([0.2, 0.3, 0.5], (20, 20, 1)),))
    assert snd_segmentation(dump).value == pytest.approx(math.log(99), abs=1e-9)


def test_segmentation_replay_and_seed_dependence():
    dump = seg_dump(np.random.default_rng(9), [(16, 16), (12, 20), (30, 10)])
    a = snd_segmentation(dump, SndConfig(rng_seed=3)).value
    b = snd_segmentation(dump, SndConfig(rng_seed=3)).value
    assert a == b
    idx3 = segmentation_pixel_indices(dump, SndConfig(rng_seed=3))
    idx4 = segmentation_pixel_indices(dump, SndConfig(rng_seed=4))
    assert any(not np.array_equal(x, y) for x, y in zip(idx3, idx4))
    for idx in idx3:
        assert len(np.unique(idx)) == 100


def test_segmentation_replays_through_dense_oracle():
    dump = seg_dump(np.random.default_rng(10), [(10, 10), (11, 11), (12, 9)])
    cfg = SndConfig(rng_seed=1)
    per = [
        snd_dense_oracle(l2_normalize(dump.pixel_rows(k)[idx]), cfg.temperature).value
        for k, idx in enumerate(segmentation_pixel_indices(dump, cfg))
    ]
    assert snd_segmentation(dump, cfg).value == pytest.approx(np.mean(per), rel=1e-12)


def test_segmentation_too_few_pixels():
    dump = SegmentationDump((np.full((5, 5, 2), 0.5),))
    with pytest.raises(ValueError, match="fewer than"):
        snd_segmentation(dump)
