"""Synthetic descriptor datasets with known overlap ground truth.

The generator lays world points along a 1-d strip of unit segments.
Image ``i`` observes a window of ``S`` consecutive segments starting at
segment ``i``, so images ``i`` and ``j`` overlap exactly when
``|i - j| < S``.  ``S`` is derived from the requested overlap fraction
``f`` between consecutive images: ``S = round(1 / (1 - f))`` (``f = 1``
collapses the strip to a single shared window).  Every world point has
one fixed descriptor; each image observes the shared points through its
own affine pixel map plus bounded keypoint/descriptor noise, so matched
keypoints across a pair are related by a known plane-to-plane transform.

Everything is a pure function of (config, seed): per-segment and
per-image substreams are derived with :func:`uvmatch.seeding.derive_seed`,
so outputs are bit-identical across runs and platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .descriptors import DESCRIPTOR_DIM, DescriptorSet
from .exceptions import InvalidConfigError
from .seeding import rng_for

__all__ = [
    "SyntheticConfig",
    "SyntheticGroundTruth",
    "strip_window_segments",
    "generate_synthetic_dataset",
]


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for the strip generator.

    ``features_per_image`` is rounded to a multiple of the window size
    so every segment carries the same point count; the exact per-image
    count is ``window_segments * points_per_segment``.
    """

    n_images: int = 50
    features_per_image: int = 300
    overlap_fraction: float = 0.75
    image_width: int = 1000
    image_height: int = 1000
    noise_px: float = 0.3
    noise_desc: int = 2
    scale_jitter: float = 0.02
    rot_jitter_deg: float = 2.0

    def __post_init__(self):
        if self.n_images < 2:
            raise InvalidConfigError("n_images must be >= 2")
        if not 0.0 <= self.overlap_fraction <= 1.0:
            raise InvalidConfigError(
                f"overlap_fraction must be in [0, 1], got {self.overlap_fraction}"
            )
        if self.features_per_image < 1:
            raise InvalidConfigError("features_per_image must be >= 1")
        if self.noise_px < 0 or self.noise_desc < 0:
            raise InvalidConfigError("noise must be non-negative")


@dataclass
class SyntheticGroundTruth:
    """Oracle emitted alongside a generated dataset.

    pairs
        Unordered overlapping image-id pairs, stored as (i, j) with i < j.
    correspondences
        Per pair, an (m, 2) int array of feature indices (row -> index in
        image i's DescriptorSet, index in image j's).  Indices account
        for the scale sorting applied by DescriptorSet.
    homographies
        Per pair, the 3x3 map taking image-i pixel coords of a shared
        keypoint to image-j pixel coords (exact up to the added noise).
    """

    pairs: set = field(default_factory=set)
    correspondences: dict = field(default_factory=dict)
    homographies: dict = field(default_factory=dict)
    window_segments: int = 1


def strip_window_segments(overlap_fraction: float) -> int:
    """Window size S in segments for a consecutive-image overlap fraction."""
    if overlap_fraction >= 1.0:
        return 1
    return max(1, round(1.0 / (1.0 - overlap_fraction)))


def _affine_for_image(cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    """Pixel map for one image: mild similarity jitter about the center."""
    theta = math.radians(rng.uniform(-cfg.rot_jitter_deg, cfg.rot_jitter_deg))
    s = 1.0 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter)
    cx, cy = cfg.image_width / 2.0, cfg.image_height / 2.0
    c, sn = s * math.cos(theta), s * math.sin(theta)
    A = np.array(
        [
            [c, -sn, cx - c * cx + sn * cy],
            [sn, c, cy - sn * cx - c * cy],
            [0.0, 0.0, 1.0],
        ]
    )
    return A


def generate_synthetic_dataset(cfg: SyntheticConfig, seed: int):
    """Generate descriptor sets plus ground truth for a strip scene.

    Returns
    -------
    (list of DescriptorSet, SyntheticGroundTruth)
    """
    S = strip_window_segments(cfg.overlap_fraction)
    stride = 0 if cfg.overlap_fraction >= 1.0 else 1
    n = cfg.n_images
    ms = max(1, round(cfg.features_per_image / S))
    n_segments = (n - 1) * stride + S

    # World points, one block per segment.  Positions are in segment
    # units: x in [seg, seg+1), y in [0, 1).
    seg_x = np.empty((n_segments, ms))
    seg_y = np.empty((n_segments, ms))
    seg_scale = np.empty((n_segments, ms), dtype=np.float32)
    seg_orient = np.empty((n_segments, ms), dtype=np.float32)
    seg_desc = np.empty((n_segments, ms, DESCRIPTOR_DIM), dtype=np.uint8)
    for s in range(n_segments):
        rng = rng_for(seed, "seg", s)
        seg_x[s] = s + rng.random(ms)
        seg_y[s] = rng.random(ms)
        seg_scale[s] = rng.uniform(1.0, 4.0, ms).astype(np.float32)
        seg_orient[s] = rng.uniform(0.0, 2.0 * math.pi, ms).astype(np.float32)
        seg_desc[s] = rng.integers(0, 181, size=(ms, DESCRIPTOR_DIM), dtype=np.uint8)

    sets = []
    pixel_maps = []
    inv_orders = []
    for i in range(n):
        rng = rng_for(seed, "img", i)
        A = _affine_for_image(cfg, rng)

        first = i * stride
        segs = slice(first, first + S)
        # Window map: world segment coords -> base pixel coords.
        W = np.array(
            [
                [cfg.image_width / S, 0.0, -first * cfg.image_width / S],
                [0.0, float(cfg.image_height), 0.0],
                [0.0, 0.0, 1.0],
            ]
        )
        pixel_maps.append(A @ W)
        # Base pixel coords before jitter: window maps to the full image.
        base_x = (seg_x[segs].reshape(-1) - first) / S * cfg.image_width
        base_y = seg_y[segs].reshape(-1) * cfg.image_height
        px = A[0, 0] * base_x + A[0, 1] * base_y + A[0, 2]
        py = A[1, 0] * base_x + A[1, 1] * base_y + A[1, 2]
        if cfg.noise_px > 0:
            px = px + rng.uniform(-cfg.noise_px, cfg.noise_px, px.shape)
            py = py + rng.uniform(-cfg.noise_px, cfg.noise_px, py.shape)

        jitter_scale = math.hypot(A[0, 0], A[1, 0])
        scales = seg_scale[segs].reshape(-1) * np.float32(jitter_scale)
        orients = np.mod(
            seg_orient[segs].reshape(-1) + np.float32(math.atan2(A[1, 0], A[0, 0])),
            np.float32(2.0 * math.pi),
        )
        desc = seg_desc[segs].reshape(-1, DESCRIPTOR_DIM)
        if cfg.noise_desc > 0:
            bump = rng.integers(
                -cfg.noise_desc, cfg.noise_desc + 1, size=desc.shape, dtype=np.int16
            )
            desc = np.clip(desc.astype(np.int16) + bump, 0, 255).astype(np.uint8)

        keypoints = np.column_stack(
            [px.astype(np.float32), py.astype(np.float32), scales, orients]
        )
        order = np.argsort(-keypoints[:, 2], kind="stable")
        inv = np.empty_like(order)
        inv[order] = np.arange(order.size)
        inv_orders.append(inv)
        sets.append(
            DescriptorSet(
                i,
                cfg.image_width,
                cfg.image_height,
                keypoints[order],
                np.ascontiguousarray(desc[order]),
            )
        )

    gt = SyntheticGroundTruth(window_segments=S)
    for i in range(n):
        for j in range(i + 1, n):
            if (j - i) * stride >= S:
                break
            shared_first = j * stride
            shared_last = i * stride + S  # exclusive
            rows = []
            for s in range(shared_first, shared_last):
                t = np.arange(ms)
                pre_i = (s - i * stride) * ms + t
                pre_j = (s - j * stride) * ms + t
                rows.append(
                    np.column_stack([inv_orders[i][pre_i], inv_orders[j][pre_j]])
                )
            gt.pairs.add((i, j))
            gt.correspondences[(i, j)] = np.concatenate(rows).astype(np.int64)
            gt.homographies[(i, j)] = pixel_maps[j] @ np.linalg.inv(pixel_maps[i])
    return sets, gt
