"""Local feature sets and the UVD1 on-disk format.

A descriptor set holds one image's keypoints (x, y, scale, orientation)
and their 128-dim unsigned-byte descriptors.  Sets are kept sorted by
descending scale so that capping to the strongest features is a prefix
operation, and they are immutable once constructed.

UVD1 layout (little-endian)::

    magic   "UVD1"      4 bytes
    version u32         = 1
    image_id u64
    image_width u32
    image_height u32
    feature_count u32
    descriptor_dim u32  = 128
    records feature_count x { x f32, y f32, scale f32, orientation f32,
                              descriptor 128 x u8 }
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    BadDimensionError,
    MalformedHeaderError,
    TruncatedFileError,
)

MAGIC = b"UVD1"
VERSION = 1
DESCRIPTOR_DIM = 128
DEFAULT_FEATURE_CAP = 8192

_HEADER = struct.Struct("<4sIQIIII")

FEATURE_RECORD = np.dtype(
    [
        ("x", "<f4"),
        ("y", "<f4"),
        ("scale", "<f4"),
        ("orientation", "<f4"),
        ("descriptor", "u1", (DESCRIPTOR_DIM,)),
    ]
)


@dataclass(frozen=True)
class DescriptorSet:
    """One image's local features, scale-descending.

    Parameters
    ----------
    image_id : int
        Unique non-negative image identifier.
    width, height : int
        Image dimensions in pixels, both > 0.
    keypoints : ndarray of shape (n, 4), float32
        Columns are x, y, scale, orientation.
    descriptors : ndarray of shape (n, 128), uint8
        Raw descriptor components.

    Rows are re-sorted at construction by descending scale (stable, so
    equal scales keep their given order) and both arrays are made
    read-only.
    """

    image_id: int
    width: int
    height: int
    keypoints: np.ndarray = field(repr=False)
    descriptors: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.image_id < 0:
            raise ValueError("image_id must be non-negative")
        if self.width <= 0 or self.height <= 0:
            raise BadDimensionError(
                f"image dimensions must be positive, got {self.width}x{self.height}"
            )
        kp = np.ascontiguousarray(self.keypoints, dtype=np.float32)
        desc = np.asarray(self.descriptors)
        if kp.ndim != 2 or kp.shape[1] != 4:
            raise BadDimensionError(f"keypoints must be (n, 4), got {kp.shape}")
        if desc.dtype != np.uint8:
            raise BadDimensionError(f"descriptors must be uint8, got {desc.dtype}")
        if desc.ndim != 2 or desc.shape[1] != DESCRIPTOR_DIM:
            raise BadDimensionError(
                f"descriptors must be (n, {DESCRIPTOR_DIM}), got {desc.shape}"
            )
        if kp.shape[0] != desc.shape[0]:
            raise BadDimensionError(
                f"keypoint/descriptor counts differ: {kp.shape[0]} vs {desc.shape[0]}"
            )
        if kp.size and not np.all(np.isfinite(kp)):
            raise ValueError("keypoints contain NaN or infinite values")
        if kp.size and not np.all(kp[:, 2] > 0):
            raise ValueError("all feature scales must be > 0")

        order = np.argsort(-kp[:, 2], kind="stable")
        kp = np.ascontiguousarray(kp[order])
        desc = np.ascontiguousarray(desc[order])
        kp.setflags(write=False)
        desc.setflags(write=False)
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "descriptors", desc)

    def __len__(self) -> int:
        return self.keypoints.shape[0]

    @property
    def n_features(self) -> int:
        return self.keypoints.shape[0]

    def capped(self, cap: int) -> "DescriptorSet":
        """Return a set keeping only the ``cap`` largest-scale features."""
        if cap < 0:
            raise ValueError("cap must be non-negative")
        if len(self) <= cap:
            return self
        return DescriptorSet(
            self.image_id,
            self.width,
            self.height,
            self.keypoints[:cap],
            self.descriptors[:cap],
        )

    def unit_descriptors(self) -> np.ndarray:
        """Descriptors as float32 rows L2-normalized to unit length.

        Computed on demand; not cached, so large collections do not pin
        the float copies in memory.  All-zero descriptors stay zero.
        """
        D = self.descriptors.astype(np.float32)
        norms = np.linalg.norm(D, axis=1, keepdims=True)
        np.maximum(norms, np.finfo(np.float32).tiny, out=norms)
        D /= norms
        return D

    def __eq__(self, other) -> bool:
        if not isinstance(other, DescriptorSet):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.width == other.width
            and self.height == other.height
            and self.keypoints.shape == other.keypoints.shape
            and np.array_equal(
                self.keypoints.view(np.uint32), other.keypoints.view(np.uint32)
            )
            and np.array_equal(self.descriptors, other.descriptors)
        )


def save_descriptor_set(dset: DescriptorSet, path) -> None:
    """Write ``dset`` to ``path`` in UVD1 format.

    Invariants are enforced by the DescriptorSet constructor, so a set
    that exists is always writable; I/O problems surface as ``OSError``.
    """
    n = len(dset)
    records = np.empty(n, dtype=FEATURE_RECORD)
    records["x"] = dset.keypoints[:, 0]
    records["y"] = dset.keypoints[:, 1]
    records["scale"] = dset.keypoints[:, 2]
    records["orientation"] = dset.keypoints[:, 3]
    records["descriptor"] = dset.descriptors
    header = _HEADER.pack(
        MAGIC, VERSION, dset.image_id, dset.width, dset.height, n, DESCRIPTOR_DIM
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(records.tobytes())


def load_descriptor_set(path, cap: int = DEFAULT_FEATURE_CAP) -> DescriptorSet:
    """Read a UVD1 file, returning at most ``cap`` largest-scale features.

    Raises
    ------
    MalformedHeaderError
        If the magic, version, or header length is wrong.
    BadDimensionError
        If the stored descriptor dimension is not 128.
    TruncatedFileError
        If the payload length disagrees with the header's feature count.
    """
    with open(path, "rb") as fh:
        blob = fh.read()

    if len(blob) < _HEADER.size:
        raise MalformedHeaderError(f"{path}: file shorter than UVD1 header")
    magic, version, image_id, width, height, count, dim = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise MalformedHeaderError(f"{path}: unsupported version {version}")
    if dim != DESCRIPTOR_DIM:
        raise BadDimensionError(f"{path}: descriptor dim {dim} != {DESCRIPTOR_DIM}")

    payload = blob[_HEADER.size :]
    expected = count * FEATURE_RECORD.itemsize
    if len(payload) != expected:
        raise TruncatedFileError(
            f"{path}: expected {expected} payload bytes for {count} features, "
            f"found {len(payload)}"
        )
    records = np.frombuffer(payload, dtype=FEATURE_RECORD)

    keypoints = np.empty((count, 4), dtype=np.float32)
    keypoints[:, 0] = records["x"]
    keypoints[:, 1] = records["y"]
    keypoints[:, 2] = records["scale"]
    keypoints[:, 3] = records["orientation"]
    dset = DescriptorSet(image_id, width, height, keypoints, records["descriptor"])
    return dset.capped(cap)
