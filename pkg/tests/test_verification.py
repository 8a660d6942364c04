import numpy as np
import pytest

from _twoview import rotation_matrix, two_view_scene
from uvmatch.descriptors import DescriptorSet
from uvmatch.exceptions import (
    EmptyInputError,
    MalformedHeaderError,
    TooFewMatchesError,
    TruncatedFileError,
)
from uvmatch.retrieval import MatchPairCandidateSet
from uvmatch.synthetic import SyntheticConfig, generate_synthetic_dataset
from uvmatch.verification import (
    FeatureMatch,
    VerificationConfig,
    VerifiedPair,
    eight_point,
    estimate_fundamental_ransac,
    load_matches,
    match_descriptors,
    save_matches,
    symmetric_epipolar_distance,
    verify_pairs,
)


def make_set(image_id, descriptors, coords=None):
    descriptors = np.asarray(descriptors, dtype=np.uint8)
    n = descriptors.shape[0]
    kp = np.ones((n, 4), dtype=np.float32)
    kp[:, 0] = np.arange(n) if coords is None else coords[:, 0]
    if coords is not None:
        kp[:, 1] = coords[:, 1]
    return DescriptorSet(
        image_id=image_id, width=1000, height=750,
        keypoints=kp, descriptors=descriptors,
    )


def as_matches(n):
    return [FeatureMatch(i, i, 0.0) for i in range(n)]


def as_keypoints(pts):
    return np.column_stack([pts, np.ones((len(pts), 2))]).astype(np.float64)


# -- descriptor matching --------------------------------------------------


def test_identity_matching():
    rng = np.random.default_rng(0)
    desc = rng.integers(0, 255, size=(40, 128), dtype=np.uint8)
    a = make_set(0, desc)
    b = make_set(1, desc)
    got = match_descriptors(a, b, ratio=0.8)
    assert [(m.index_a, m.index_b) for m in got] == [(i, i) for i in range(40)]
    assert all(m.distance == 0.0 for m in got)


def test_equidistant_neighbors_rejected():
    both = np.zeros((1, 128), dtype=np.uint8)
    both[0, 0] = 200
    both[0, 1] = 200
    targets = np.zeros((2, 128), dtype=np.uint8)
    targets[0, 0] = 255
    targets[1, 1] = 255
    a = make_set(0, both)
    b = make_set(1, targets)
    assert match_descriptors(a, b) == []


def test_cross_check_symmetry():
    cfg = SyntheticConfig(n_images=2, features_per_image=150,
                          overlap_fraction=0.75)
    sets, _ = generate_synthetic_dataset(cfg, seed=3)
    ab = match_descriptors(sets[0], sets[1])
    ba = match_descriptors(sets[1], sets[0])
    assert {(m.index_a, m.index_b) for m in ab} == \
        {(m.index_b, m.index_a) for m in ba}


def test_planted_correspondences_recovered():
    cfg = SyntheticConfig(n_images=2, features_per_image=280,
                          overlap_fraction=0.75)
    sets, gt = generate_synthetic_dataset(cfg, seed=5)
    planted = {tuple(row) for row in gt.correspondences[(0, 1)]}
    got = match_descriptors(sets[0], sets[1])
    got_pairs = {(m.index_a, m.index_b) for m in got}
    recovered = len(planted & got_pairs) / len(planted)
    assert recovered >= 0.9
    # One-to-one: no feature used twice on either side.
    assert len({m.index_a for m in got}) == len(got)
    assert len({m.index_b for m in got}) == len(got)


def test_matching_rejects_bad_input():
    empty = DescriptorSet(
        image_id=0, width=8, height=8,
        keypoints=np.empty((0, 4), np.float32),
        descriptors=np.empty((0, 128), np.uint8),
    )
    filled = make_set(1, np.eye(128, dtype=np.uint8) * 255)
    with pytest.raises(EmptyInputError):
        match_descriptors(empty, filled)
    with pytest.raises(ValueError):
        match_descriptors(filled, filled, ratio=1.5)


# -- eight-point solver ----------------------------------------------------


def test_eight_point_exact_on_clean_data():
    pa, pb, _, F_true = two_view_scene(n=60, seed=2)
    F = eight_point(pa, pb)
    assert np.linalg.norm(F) == pytest.approx(1.0, abs=1e-12)
    assert abs(np.linalg.det(F)) <= 1e-10
    delta = min(np.abs(F - F_true).max(), np.abs(F + F_true).max())
    assert delta <= 1e-9


def test_eight_point_similarity_invariance():
    pa, pb, _, _ = two_view_scene(n=50, seed=4)
    F = eight_point(pa, pb)

    def similarity(scale, angle, shift):
        S = np.eye(3)
        S[:2, :2] = scale * rotation_matrix([0, 0, 1], angle)[:2, :2]
        S[:2, 2] = shift
        return S

    Sa = similarity(3.0, 0.6, [40.0, -25.0])
    Sb = similarity(0.4, -1.1, [-300.0, 12.0])
    ta = (np.column_stack([pa, np.ones(len(pa))]) @ Sa.T)[:, :2]
    tb = (np.column_stack([pb, np.ones(len(pb))]) @ Sb.T)[:, :2]
    F_t = eight_point(ta, tb)
    want = np.linalg.inv(Sb).T @ F @ np.linalg.inv(Sa)
    want = want / np.linalg.norm(want)
    delta = min(np.abs(F_t - want).max(), np.abs(F_t + want).max())
    assert delta <= 1e-6


# -- RANSAC ----------------------------------------------------------------


def test_ransac_zero_noise_recovers_everything():
    pa, pb, _, F_true = two_view_scene(n=200, seed=1)
    F, mask = estimate_fundamental_ransac(
        as_matches(len(pa)), as_keypoints(pa), as_keypoints(pb), seed=7
    )
    assert mask.all()
    err = symmetric_epipolar_distance(F, pa, pb)
    assert err.max() <= 1e-8
    delta = min(np.abs(F - F_true).max(), np.abs(F + F_true).max())
    assert delta <= 1e-6


def test_ransac_with_outliers_and_pixel_noise():
    recalls, false_rates = [], []
    for seed in range(3):
        pa, pb, labels, _ = two_view_scene(
            n=250, seed=seed, quantize=True, outlier_frac=0.5
        )
        F, mask = estimate_fundamental_ransac(
            as_matches(len(pa)), as_keypoints(pa), as_keypoints(pb), seed=seed
        )
        recalls.append((mask & labels).sum() / labels.sum())
        false_rates.append((mask & ~labels).sum() / (~labels).sum())
        err = symmetric_epipolar_distance(F, pa, pb)
        assert err[mask].max() < 1.0  # mask consistent with returned F
    assert np.mean(recalls) >= 0.95
    assert np.mean(false_rates) <= 0.05


def test_ransac_deterministic():
    pa, pb, _, _ = two_view_scene(n=120, seed=9, quantize=True,
                                  outlier_frac=0.3)
    args = (as_matches(len(pa)), as_keypoints(pa), as_keypoints(pb))
    F1, m1 = estimate_fundamental_ransac(*args, seed=42)
    F2, m2 = estimate_fundamental_ransac(*args, seed=42)
    assert np.array_equal(F1, F2)
    assert np.array_equal(m1, m2)


def test_ransac_too_few_matches():
    pa, pb, _, _ = two_view_scene(n=40, seed=0)
    with pytest.raises(TooFewMatchesError):
        estimate_fundamental_ransac(
            as_matches(7), as_keypoints(pa[:7]), as_keypoints(pb[:7])
        )


def test_ransac_degenerate_input_returns_none():
    # All points coincident: no valid sample exists.
    pts = np.tile([[5.0, 5.0]], (20, 1))
    F, mask = estimate_fundamental_ransac(
        as_matches(20), as_keypoints(pts), as_keypoints(pts),
        max_iters=50, seed=0,
    )
    assert F is None
    assert not mask.any()


# -- pair verification ------------------------------------------------------


def strip_candidates(n_images=8, f=0.75, seed=11, features=220):
    cfg = SyntheticConfig(n_images=n_images, features_per_image=features,
                          overlap_fraction=f)
    sets, gt = generate_synthetic_dataset(cfg, seed=seed)
    return sets, gt


def test_verify_pairs_keeps_true_drops_false():
    sets, gt = strip_candidates()
    cand = MatchPairCandidateSet()
    cand.add(0, 1, 0.9)        # true neighbors (overlap depth 3)
    cand.add(0, 7, 0.1)        # disjoint content
    verified, notes = verify_pairs(cand, sets, VerificationConfig())
    kept = {(p.i, p.j) for p in verified}
    assert (0, 1) in kept
    assert (0, 7) not in kept
    assert any(n["pair"] == [0, 7] for n in notes)
    p01 = next(p for p in verified if (p.i, p.j) == (0, 1))
    assert p01.n_inlier > 15
    assert p01.mean_error < 1.0
    assert abs(np.linalg.det(p01.F)) <= 1e-10
    # Inlier count is in the neighborhood of the planted overlap.
    planted = len(gt.correspondences[(0, 1)])
    assert p01.n_inlier >= 0.5 * planted


def test_min_inlier_rule_is_strict():
    sets, _ = strip_candidates(seed=13)
    cand = MatchPairCandidateSet()
    cand.add(2, 3, 0.9)
    base, _ = verify_pairs(cand, sets, VerificationConfig())
    assert len(base) == 1
    n = base[0].n_inlier
    kept, _ = verify_pairs(
        cand, sets, VerificationConfig(min_inliers=n - 1)
    )
    dropped, notes = verify_pairs(
        cand, sets, VerificationConfig(min_inliers=n)
    )
    assert len(kept) == 1
    assert dropped == []  # exactly n inliers is not enough: rule is >
    assert notes and f"{n} inliers" in notes[0]["dropped"]


def test_verify_accepts_plain_pair_list():
    sets, _ = strip_candidates(seed=17, n_images=4)
    verified, _ = verify_pairs([(0, 1), (1, 2)], sets, VerificationConfig())
    assert {(p.i, p.j) for p in verified} == {(0, 1), (1, 2)}


def test_verify_records_missing_images():
    sets, _ = strip_candidates(seed=19, n_images=3)
    verified, notes = verify_pairs([(0, 99)], sets, VerificationConfig())
    assert verified == []
    assert notes[0]["dropped"] == "missing image"


def test_verify_deterministic():
    sets, _ = strip_candidates(seed=23, n_images=5)
    pairs = [(0, 1), (1, 2), (2, 3), (3, 4)]
    a, _ = verify_pairs(pairs, sets, VerificationConfig(seed=5))
    b, _ = verify_pairs(pairs, sets, VerificationConfig(seed=5))
    assert len(a) == len(b)
    for pa, pb in zip(a, b):
        assert (pa.i, pa.j, pa.n_inlier) == (pb.i, pb.j, pb.n_inlier)
        assert np.array_equal(pa.F, pb.F)


# -- persistence -------------------------------------------------------------


def test_uvm1_roundtrip(tmp_path):
    sets, _ = strip_candidates(seed=29, n_images=4)
    verified, _ = verify_pairs([(0, 1), (1, 2)], sets, VerificationConfig())
    assert verified
    path = tmp_path / "matches.uvm"
    save_matches(verified, path)
    back = load_matches(path)
    assert len(back) == len(verified)
    for orig, got in zip(verified, back):
        assert (got.i, got.j, got.n_inlier) == (orig.i, orig.j, orig.n_inlier)
        assert np.allclose(got.F, orig.F, atol=0)
        assert [(m.index_a, m.index_b) for m in got.matches] == \
            [(m.index_a, m.index_b) for m in orig.matches]


def test_uvm1_bad_files(tmp_path):
    sets, _ = strip_candidates(seed=31, n_images=3)
    verified, _ = verify_pairs([(0, 1)], sets, VerificationConfig())
    path = tmp_path / "matches.uvm"
    save_matches(verified, path)
    blob = path.read_bytes()

    bad = tmp_path / "bad.uvm"
    bad.write_bytes(b"ZZZZ" + blob[4:])
    with pytest.raises(MalformedHeaderError):
        load_matches(bad)
    cut = tmp_path / "cut.uvm"
    cut.write_bytes(blob[:-4])
    with pytest.raises(TruncatedFileError):
        load_matches(cut)
    padded = tmp_path / "padded.uvm"
    padded.write_bytes(blob + b"\x00" * 3)
    with pytest.raises(TruncatedFileError):
        load_matches(padded)
