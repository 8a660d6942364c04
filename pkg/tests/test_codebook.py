import numpy as np
import pytest

from uvmatch.codebook import (
    Codebook,
    CodebookKMeans,
    SamplingConfig,
    assign_to_centers,
    load_codebook,
    nearest_center,
    sample_training_descriptors,
    save_codebook,
    train_codebook,
)
from uvmatch.exceptions import (
    EmptyInputError,
    MalformedHeaderError,
    NaNInputError,
    TooFewDescriptorsError,
    TruncatedFileError,
)
from uvmatch.synthetic import SyntheticConfig, generate_synthetic_dataset


def three_blobs(seed, n_per=200, d=8, sigma=0.01):
    """Tight Gaussian blobs at unit-distance centers, plus oracle means."""
    rng = np.random.default_rng(seed)
    true = np.zeros((3, d))
    for i in range(3):
        true[i, i] = 1.0 / np.sqrt(2)  # pairwise distance exactly 1
    X = np.concatenate(
        [true[i] + sigma * rng.standard_normal((n_per, d)) for i in range(3)]
    )
    labels = np.repeat(np.arange(3), n_per)
    oracle = np.stack([X[labels == i].mean(axis=0) for i in range(3)])
    return X.astype(np.float32), labels, oracle


def test_square_corners_exact():
    X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=np.float32)
    cb = train_codebook(X, k=4, seed=0)
    assert cb.inertia == 0.0
    got = set(map(tuple, np.round(cb.centers).astype(int)))
    assert got == {(0, 0), (0, 1), (1, 0), (1, 1)}


def test_blob_recovery():
    X, _, oracle = three_blobs(seed=1)
    cb = train_codebook(X, k=3, seed=1)
    # Match recovered centers to oracle means greedily by distance.
    for om in oracle:
        d = np.linalg.norm(cb.centers - om, axis=1)
        assert d.min() < 0.05


def test_too_few_descriptors():
    X = np.random.default_rng(0).random((3, 4), dtype=np.float32)
    with pytest.raises(TooFewDescriptorsError):
        train_codebook(X, k=5)


def test_nan_input():
    X = np.ones((10, 4), dtype=np.float32)
    X[3, 2] = np.nan
    with pytest.raises(NaNInputError):
        train_codebook(X, k=2)


def test_inertia_monotone():
    rng = np.random.default_rng(7)
    for seed in range(4):
        X = rng.random((500, 16), dtype=np.float32)
        est = CodebookKMeans(n_clusters=12, max_iter=30, tol=0.0, seed=seed).fit(X)
        h = np.asarray(est.inertia_history_)
        assert len(h) >= 2
        assert np.all(np.diff(h) <= 1e-6 * h[:-1])


def test_centers_are_cluster_means_at_convergence():
    X = np.random.default_rng(3).random((400, 8), dtype=np.float32)
    est = CodebookKMeans(n_clusters=10, max_iter=200, tol=0.0, seed=3).fit(X)
    labels = est.predict(X)
    np.testing.assert_array_equal(labels, est.labels_)
    X64 = X.astype(np.float64)
    for c in range(10):
        members = X64[labels == c]
        assert len(members) > 0
        np.testing.assert_allclose(
            members.mean(axis=0), est.cluster_centers_[c], atol=1e-6
        )


def test_permutation_invariance_fixed_init():
    rng = np.random.default_rng(11)
    X = rng.random((300, 8), dtype=np.float32)
    init = X[rng.choice(300, 5, replace=False)].astype(np.float64)
    a = CodebookKMeans(n_clusters=5, init=init, tol=0.0, max_iter=100).fit(X)
    perm = rng.permutation(300)
    b = CodebookKMeans(n_clusters=5, init=init, tol=0.0, max_iter=100).fit(X[perm])
    np.testing.assert_allclose(a.cluster_centers_, b.cluster_centers_, atol=1e-9)


def test_empty_cluster_reseed():
    # Identical initial centers force empty clusters on iteration one.
    rng = np.random.default_rng(4)
    X = rng.random((60, 4), dtype=np.float32)
    init = np.tile(X[0], (3, 1)).astype(np.float64)
    est = CodebookKMeans(n_clusters=3, init=init, tol=0.0, max_iter=50).fit(X)
    assert np.isfinite(est.cluster_centers_).all()
    assert len(np.unique(est.labels_)) == 3
    h = np.asarray(est.inertia_history_)
    assert np.all(np.diff(h) <= 1e-6 * h[:-1])


def test_random_init_supported():
    X = np.random.default_rng(0).random((50, 4), dtype=np.float32)
    cb = train_codebook(X, k=4, seed=9, init="random")
    assert cb.k == 4


def test_nearest_center_exact_and_ties():
    centers = np.array([[0, 0], [2, 0], [5, 5]], dtype=np.float32)
    cb = Codebook(centers)
    assert nearest_center(cb, np.array([5.0, 5.0])) == 2
    # Equidistant from centers 0 and 1 -> lowest index wins.
    assert nearest_center(cb, np.array([1.0, 0.0])) == 0


def test_nearest_center_matches_bruteforce():
    rng = np.random.default_rng(21)
    centers = rng.random((256, 128)).astype(np.float32)
    cb = Codebook(centers)
    for _ in range(50):
        v = rng.random(128)
        diff = centers.astype(np.float64) - v
        want = int(np.argmin(np.einsum("ij,ij->i", diff, diff)))
        assert nearest_center(cb, v) == want


def test_assign_matches_predict():
    rng = np.random.default_rng(2)
    X = rng.random((100, 8), dtype=np.float32)
    est = CodebookKMeans(n_clusters=6, seed=0).fit(X)
    np.testing.assert_array_equal(
        est.predict(X), assign_to_centers(X, est.cluster_centers_)
    )


def test_sampling_counts():
    cfg = SyntheticConfig(n_images=10, features_per_image=40, overlap_fraction=0.0)
    sets, _ = generate_synthetic_dataset(cfg, seed=0)
    # ceil(0.2 * 10) = 2 images, each fully below h.
    out = sample_training_descriptors(sets, SamplingConfig(p=0.2, h=1500, seed=5))
    assert out.shape == (80, 128)

    out_all = sample_training_descriptors(sets, SamplingConfig(p=1.0, h=10_000, seed=5))
    assert out_all.shape == (400, 128)


def test_sampling_h_prefix_is_largest_scales():
    cfg = SyntheticConfig(n_images=5, features_per_image=60, overlap_fraction=0.0)
    sets, _ = generate_synthetic_dataset(cfg, seed=1)
    out = sample_training_descriptors(sets, SamplingConfig(p=1.0, h=10, seed=0))
    assert out.shape == (50, 128)
    # Sampled rows must be the unit descriptors of each image's top-10
    # scale prefix, in image order.
    expect = np.concatenate([s.unit_descriptors()[:10] for s in sets])
    np.testing.assert_array_equal(out, expect)


def test_sampling_deterministic():
    cfg = SyntheticConfig(n_images=12, features_per_image=30, overlap_fraction=0.0)
    sets, _ = generate_synthetic_dataset(cfg, seed=2)
    a = sample_training_descriptors(sets, SamplingConfig(p=0.4, h=20, seed=7))
    b = sample_training_descriptors(sets, SamplingConfig(p=0.4, h=20, seed=7))
    np.testing.assert_array_equal(a, b)


def test_sampling_empty():
    with pytest.raises(EmptyInputError):
        sample_training_descriptors([], SamplingConfig())


def test_codebook_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    X = rng.random((200, 16), dtype=np.float32)
    cb = train_codebook(X, k=8, seed=1)
    path = tmp_path / "cb.uvc"
    save_codebook(cb, path)
    loaded = load_codebook(path)
    np.testing.assert_array_equal(loaded.centers, cb.centers)
    assert loaded.n_iterations == cb.n_iterations
    assert loaded.inertia == cb.inertia


def test_codebook_bad_files(tmp_path):
    path = tmp_path / "bad.uvc"
    path.write_bytes(b"NOPE" + b"\x00" * 12)
    with pytest.raises(MalformedHeaderError):
        load_codebook(path)

    rng = np.random.default_rng(5)
    cb = train_codebook(rng.random((50, 8), dtype=np.float32), k=4)
    good = tmp_path / "good.uvc"
    save_codebook(cb, good)
    blob = good.read_bytes()
    good.write_bytes(blob[:-5])
    with pytest.raises(TruncatedFileError):
        load_codebook(good)


def test_estimator_params():
    est = CodebookKMeans(n_clusters=32, tol=1e-3)
    params = est.get_params()
    assert params["n_clusters"] == 32
    est.set_params(n_clusters=64)
    assert est.n_clusters == 64
