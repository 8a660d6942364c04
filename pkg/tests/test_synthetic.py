import numpy as np
import pytest

from uvmatch.exceptions import InvalidConfigError
from uvmatch.synthetic import (
    SyntheticConfig,
    generate_synthetic_dataset,
    strip_window_segments,
)


def test_deterministic():
    cfg = SyntheticConfig(n_images=6, features_per_image=60)
    sets_a, gt_a = generate_synthetic_dataset(cfg, seed=42)
    sets_b, gt_b = generate_synthetic_dataset(cfg, seed=42)
    assert gt_a.pairs == gt_b.pairs
    for a, b in zip(sets_a, sets_b):
        np.testing.assert_array_equal(a.keypoints, b.keypoints)
        np.testing.assert_array_equal(a.descriptors, b.descriptors)
    for p in gt_a.pairs:
        np.testing.assert_array_equal(gt_a.correspondences[p], gt_b.correspondences[p])


def test_different_seed_differs():
    cfg = SyntheticConfig(n_images=4, features_per_image=40)
    sets_a, _ = generate_synthetic_dataset(cfg, seed=1)
    sets_b, _ = generate_synthetic_dataset(cfg, seed=2)
    assert not np.array_equal(sets_a[0].descriptors, sets_b[0].descriptors)


def test_full_overlap_identical_multisets():
    cfg = SyntheticConfig(
        n_images=2,
        features_per_image=50,
        overlap_fraction=1.0,
        noise_px=0.0,
        noise_desc=0,
        scale_jitter=0.0,
        rot_jitter_deg=0.0,
    )
    sets, gt = generate_synthetic_dataset(cfg, seed=9)
    a = np.sort(sets[0].descriptors.view("S128").ravel())
    b = np.sort(sets[1].descriptors.view("S128").ravel())
    np.testing.assert_array_equal(a, b)
    assert gt.pairs == {(0, 1)}


def test_strip_pairs_match_config():
    # f = 2/3 gives a 3-segment window, so images overlap up to lag 2.
    cfg = SyntheticConfig(n_images=50, features_per_image=60, overlap_fraction=2 / 3)
    sets, gt = generate_synthetic_dataset(cfg, seed=3)
    S = strip_window_segments(cfg.overlap_fraction)
    assert S == 3
    expected = {
        (i, i + d) for i in range(cfg.n_images) for d in range(1, S)
        if i + d < cfg.n_images
    }
    assert gt.pairs == expected


def test_no_overlap():
    cfg = SyntheticConfig(n_images=5, features_per_image=30, overlap_fraction=0.0)
    _, gt = generate_synthetic_dataset(cfg, seed=0)
    assert gt.pairs == set()


def test_feature_counts_uniform():
    cfg = SyntheticConfig(n_images=4, features_per_image=300, overlap_fraction=0.75)
    sets, gt = generate_synthetic_dataset(cfg, seed=5)
    S = strip_window_segments(0.75)
    assert S == 4
    for i, dset in enumerate(sets):
        assert dset.image_id == i
        assert len(dset) == 300  # S divides the requested count


def test_correspondences_consistent():
    cfg = SyntheticConfig(n_images=8, features_per_image=120, overlap_fraction=0.75)
    sets, gt = generate_synthetic_dataset(cfg, seed=17)
    assert len(gt.pairs) > 0
    for (i, j), corr in gt.correspondences.items():
        assert corr.shape[1] == 2
        assert corr[:, 0].max() < len(sets[i])
        assert corr[:, 1].max() < len(sets[j])
        # Matched descriptors differ only by the bounded per-observation
        # noise (at most 2 * noise_desc per component).
        da = sets[i].descriptors[corr[:, 0]].astype(np.int16)
        db = sets[j].descriptors[corr[:, 1]].astype(np.int16)
        assert np.abs(da - db).max() <= 2 * cfg.noise_desc

        # Matched keypoints are related by the recorded plane transform
        # up to the keypoint noise.
        H = gt.homographies[(i, j)]
        pa = sets[i].keypoints[corr[:, 0], :2].astype(np.float64)
        pb = sets[j].keypoints[corr[:, 1], :2].astype(np.float64)
        ones = np.ones((len(pa), 1))
        mapped = np.hstack([pa, ones]) @ H.T
        mapped = mapped[:, :2] / mapped[:, 2:3]
        err = np.linalg.norm(mapped - pb, axis=1)
        assert err.max() < 4 * cfg.noise_px + 1e-6


def test_overlap_depth_shrinks_shared_count():
    cfg = SyntheticConfig(n_images=6, features_per_image=200, overlap_fraction=0.75)
    _, gt = generate_synthetic_dataset(cfg, seed=2)
    n1 = len(gt.correspondences[(0, 1)])
    n2 = len(gt.correspondences[(0, 2)])
    n3 = len(gt.correspondences[(0, 3)])
    assert n1 > n2 > n3 > 0
    assert (0, 4) not in gt.pairs


def test_invalid_config():
    with pytest.raises(InvalidConfigError):
        SyntheticConfig(n_images=1)
    with pytest.raises(InvalidConfigError):
        SyntheticConfig(overlap_fraction=1.5)
    with pytest.raises(InvalidConfigError):
        SyntheticConfig(overlap_fraction=-0.1)
    with pytest.raises(InvalidConfigError):
        SyntheticConfig(noise_px=-1.0)
