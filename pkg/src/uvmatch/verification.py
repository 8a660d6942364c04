"""Descriptor matching and epipolar verification of candidate pairs.

Candidate pairs survive three filters.  First, putative matches come
from a mutual 2-NN ratio test (nearest over second-nearest descriptor
distance strictly below the ratio, checked in both directions, so the
output is one-to-one).  Second, a fundamental matrix is estimated with
RANSAC around the normalized eight-point solver; inliers are matches
whose symmetric epipolar distance (mean of the point-to-epipolar-line
distances in the two images) stays below a pixel threshold.  Third,
only pairs with strictly more than ``min_inliers`` surviving matches
are retained.

The RANSAC iteration budget adapts to the best inlier ratio w seen so
far: N = log(1 - confidence) / log(1 - w^8), hard-capped.  Minimal
samples with coincident or collinear points are discarded and count
against the budget, which keeps the loop finite on degenerate input.

UVM1 layout (little-endian): magic "UVM1", version u32 = 1, pair count
u64, then per pair: i u64, j u64, N_inlier u32, the 3x3 fundamental
matrix row-major as 9 f64, and N_inlier (u32, u32) inlier feature
index pairs.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass

import numpy as np

from ._distances import pairwise_sq_dists
from .descriptors import DescriptorSet
from .exceptions import (
    EmptyInputError,
    MalformedHeaderError,
    TooFewMatchesError,
    TruncatedFileError,
)
from .seeding import derive_seed

logger = logging.getLogger(__name__)

MAGIC = b"UVM1"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_PAIR_HEADER = struct.Struct("<QQI")

MIN_SAMPLE = 8


@dataclass(frozen=True)
class FeatureMatch:
    """One putative or inlier correspondence between two images."""

    index_a: int
    index_b: int
    distance: float


@dataclass(frozen=True)
class VerifiedPair:
    """A geometrically verified image pair."""

    i: int
    j: int
    matches: tuple          # inlier FeatureMatch tuples, index order
    n_inlier: int
    F: np.ndarray           # (3, 3) float64, rank 2, unit Frobenius norm
    mean_error: float       # mean symmetric epipolar distance, pixels


@dataclass(frozen=True)
class VerificationConfig:
    ratio: float = 0.8
    max_error_px: float = 1.0
    confidence: float = 0.999
    max_iters: int = 10_000
    min_inliers: int = 15
    seed: int = 0


def match_descriptors(a: DescriptorSet, b: DescriptorSet, ratio: float = 0.8):
    """Mutual ratio-test matching; returns one-to-one FeatureMatch list.

    A feature matches when its nearest/second-nearest distance ratio is
    strictly below ``ratio`` and the nearest neighbor picks it back
    under the same test (cross-check).  Equidistant 2-NN candidates
    (ratio exactly 1) are rejected.
    """
    if a.descriptors.shape[0] == 0 or b.descriptors.shape[0] == 0:
        raise EmptyInputError("cannot match an empty descriptor set")
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must be in (0, 1]")
    da = a.unit_descriptors()
    db = b.unit_descriptors()

    fwd = _ratio_test_nn(da, db, ratio)      # index in b per row of a, or -1
    back = _ratio_test_nn(db, da, ratio)
    out = []
    for ia, ib in enumerate(fwd):
        if ib >= 0 and back[ib] == ia:
            d = float(np.linalg.norm(da[ia].astype(np.float64)
                                     - db[ib].astype(np.float64)))
            out.append(FeatureMatch(ia, int(ib), d))
    return out


def _ratio_test_nn(X, Y, ratio, chunk=2048):
    """Nearest row of Y per row of X passing the 2-NN ratio test, else -1."""
    n = X.shape[0]
    out = np.full(n, -1, dtype=np.int64)
    if Y.shape[0] < 2:
        # No second neighbor to test against; everything is ambiguous.
        return out
    for start in range(0, n, chunk):
        block = X[start:start + chunk]
        D = pairwise_sq_dists(block, Y)
        two = np.argpartition(D, 1, axis=1)[:, :2]
        rows = np.arange(D.shape[0])[:, None]
        pair_d = D[rows, two]
        swap = pair_d[:, 0] > pair_d[:, 1]
        two[swap] = two[swap][:, ::-1]
        pair_d[swap] = pair_d[swap][:, ::-1]
        d1 = np.sqrt(np.maximum(pair_d[:, 0], 0.0))
        d2 = np.sqrt(np.maximum(pair_d[:, 1], 0.0))
        ok = d1 < ratio * d2
        out[start:start + chunk][ok] = two[ok, 0]
    return out


def _hartley_normalize(pts):
    """Similarity transform taking pts to zero centroid, mean norm sqrt(2)."""
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    mean_norm = float(np.mean(np.linalg.norm(centered, axis=1)))
    scale = math.sqrt(2.0) / mean_norm if mean_norm > 0 else 1.0
    T = np.array(
        [[scale, 0.0, -scale * centroid[0]],
         [0.0, scale, -scale * centroid[1]],
         [0.0, 0.0, 1.0]]
    )
    return centered * scale, T


def eight_point(pts_a, pts_b):
    """Normalized 8-point fundamental matrix (rank 2, unit norm)."""
    na, Ta = _hartley_normalize(pts_a)
    nb, Tb = _hartley_normalize(pts_b)
    x, y = na[:, 0], na[:, 1]
    xp, yp = nb[:, 0], nb[:, 1]
    A = np.column_stack(
        [xp * x, xp * y, xp, yp * x, yp * y, yp, x, y, np.ones_like(x)]
    )
    _, _, vt = np.linalg.svd(A)
    F = vt[-1].reshape(3, 3)
    u, s, vt = np.linalg.svd(F)
    F = (u * np.array([s[0], s[1], 0.0])) @ vt
    F = Tb.T @ F @ Ta
    return _canonical_f(F)


def _canonical_f(F):
    """Unit Frobenius norm with a deterministic sign."""
    F = F / np.linalg.norm(F)
    flat = F.ravel()
    lead = flat[np.argmax(np.abs(flat))]
    return -F if lead < 0 else F


def symmetric_epipolar_distance(F, pts_a, pts_b):
    """Mean of the two point-to-epipolar-line distances, in pixels."""
    ha = np.column_stack([pts_a, np.ones(len(pts_a))])
    hb = np.column_stack([pts_b, np.ones(len(pts_b))])
    lb = ha @ F.T           # epipolar lines in image b
    la = hb @ F             # epipolar lines in image a
    num = np.abs(np.sum(hb * lb, axis=1))
    db = num / np.hypot(lb[:, 0], lb[:, 1])
    da = num / np.hypot(la[:, 0], la[:, 1])
    return 0.5 * (da + db)


def _degenerate_sample(pts_a, pts_b):
    """True when a minimal sample cannot constrain F.

    Coincident points in either image, or all points collinear in
    either image, make the 8-point system rank deficient.
    """
    for pts in (pts_a, pts_b):
        rounded = np.round(pts, 9)
        if len(np.unique(rounded, axis=0)) < len(pts):
            return True
        centered = pts - pts.mean(axis=0)
        if np.linalg.matrix_rank(centered, tol=1e-9) < 2:
            return True
    return False


def estimate_fundamental_ransac(
    matches,
    keypoints_a,
    keypoints_b,
    max_error_px: float = 1.0,
    confidence: float = 0.999,
    max_iters: int = 10_000,
    seed: int = 0,
):
    """RANSAC fundamental matrix from matched keypoints.

    Returns (F, inlier_mask).  F is None (and the mask all-false) when
    no valid minimal sample was found within the budget.  The mask is
    evaluated against the final F, re-estimated from all inliers of the
    best sample, so every flagged match satisfies the pixel threshold
    under the returned matrix.
    """
    idx_a = np.array([m.index_a for m in matches], dtype=np.int64)
    idx_b = np.array([m.index_b for m in matches], dtype=np.int64)
    m = idx_a.shape[0]
    if m < MIN_SAMPLE:
        raise TooFewMatchesError(f"need >= {MIN_SAMPLE} matches, got {m}")
    pts_a = np.asarray(keypoints_a, dtype=np.float64)[idx_a, :2]
    pts_b = np.asarray(keypoints_b, dtype=np.float64)[idx_b, :2]

    rng = np.random.Generator(np.random.PCG64(seed))
    best_count = 0
    best_mask = np.zeros(m, dtype=bool)
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        it += 1
        pick = rng.choice(m, MIN_SAMPLE, replace=False)
        sa, sb = pts_a[pick], pts_b[pick]
        if _degenerate_sample(sa, sb):
            continue
        F = eight_point(sa, sb)
        err = symmetric_epipolar_distance(F, pts_a, pts_b)
        mask = err < max_error_px
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            w = count / m
            if w >= 1.0:
                break
            denom = math.log(1.0 - w ** MIN_SAMPLE)
            if denom < 0:
                needed = min(
                    max_iters,
                    int(math.ceil(math.log(1.0 - confidence) / denom)),
                )
    if best_count < MIN_SAMPLE:
        return None, np.zeros(m, dtype=bool)

    F = eight_point(pts_a[best_mask], pts_b[best_mask])
    err = symmetric_epipolar_distance(F, pts_a, pts_b)
    return F, err < max_error_px


def verify_pairs(candidates, sets, cfg: VerificationConfig = VerificationConfig()):
    """Run matching + RANSAC over candidate pairs; keep strong pairs.

    ``candidates`` may be a MatchPairCandidateSet or any iterable of
    (i, j) or (i, j, similarity).  Pairs keep only when strictly more
    than ``cfg.min_inliers`` matches survive.  Per-pair failures are
    recorded, not fatal.  Returns (list of VerifiedPair, notes).
    """
    by_id = {s.image_id: s for s in sets}
    if hasattr(candidates, "sorted_pairs"):
        pair_list = [(i, j) for i, j, _ in candidates.sorted_pairs()]
    else:
        pair_list = sorted((p[0], p[1]) for p in candidates)
    verified = []
    notes = []
    for i, j in pair_list:
        a, b = by_id.get(i), by_id.get(j)
        if a is None or b is None:
            notes.append({"pair": [i, j], "dropped": "missing image"})
            continue
        try:
            putative = match_descriptors(a, b, cfg.ratio)
            F, mask = estimate_fundamental_ransac(
                putative, a.keypoints, b.keypoints,
                max_error_px=cfg.max_error_px,
                confidence=cfg.confidence,
                max_iters=cfg.max_iters,
                seed=derive_seed(cfg.seed, "verify", i, j),
            )
        except (EmptyInputError, TooFewMatchesError) as exc:
            notes.append({"pair": [i, j], "dropped": str(exc)})
            continue
        n_inlier = int(mask.sum())
        if F is None or n_inlier <= cfg.min_inliers:
            notes.append(
                {"pair": [i, j], "dropped": f"{n_inlier} inliers"}
            )
            continue
        inliers = tuple(mm for mm, keep in zip(putative, mask) if keep)
        pts_a = a.keypoints[[mm.index_a for mm in inliers], :2].astype(np.float64)
        pts_b = b.keypoints[[mm.index_b for mm in inliers], :2].astype(np.float64)
        mean_err = float(symmetric_epipolar_distance(F, pts_a, pts_b).mean())
        verified.append(
            VerifiedPair(i, j, inliers, n_inlier, F, mean_err)
        )
    return verified, notes


def save_matches(pairs, path) -> None:
    """Persist verified pairs as UVM1."""
    parts = [_HEADER.pack(MAGIC, VERSION, len(pairs))]
    for p in pairs:
        parts.append(_PAIR_HEADER.pack(p.i, p.j, p.n_inlier))
        parts.append(np.asarray(p.F, dtype="<f8").tobytes())
        idx = np.array(
            [[mm.index_a, mm.index_b] for mm in p.matches], dtype="<u4"
        )
        parts.append(idx.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_matches(path):
    """Read UVM1.  Match distances are not stored; they load as NaN."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise MalformedHeaderError(f"{path}: file shorter than UVM1 header")
    magic, version, count = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise MalformedHeaderError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    out = []
    for _ in range(count):
        if off + _PAIR_HEADER.size + 72 > len(blob):
            raise TruncatedFileError(f"{path}: pair record cut short")
        i, j, n = _PAIR_HEADER.unpack_from(blob, off)
        off += _PAIR_HEADER.size
        F = np.frombuffer(blob, dtype="<f8", count=9, offset=off).reshape(3, 3)
        off += 72
        need = n * 8
        if off + need > len(blob):
            raise TruncatedFileError(f"{path}: inlier list cut short")
        idx = np.frombuffer(blob, dtype="<u4", count=2 * n, offset=off)
        idx = idx.reshape(n, 2)
        off += need
        matches = tuple(
            FeatureMatch(int(ia), int(ib), float("nan")) for ia, ib in idx
        )
        out.append(VerifiedPair(int(i), int(j), matches, int(n),
                                F.astype(np.float64), float("nan")))
    if off != len(blob):
        raise TruncatedFileError(f"{path}: trailing bytes after last pair")
    return out
