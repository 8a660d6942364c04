"""VLAD aggregation: one global vector per image.

Each local descriptor is assigned to its nearest codebook center and
its residual (descriptor - center) is accumulated into that center's
block.  Blocks are L2-normalized independently (zero blocks stay zero)
and the concatenated vector is then L2-normalized globally, in that
order.  Images with no features, or whose residuals cancel exactly,
yield an all-zero vector flagged degenerate rather than an error;
degenerate vectors are excluded from indexing by the pipeline.

UVL1 layout (little-endian): magic "UVL1", version u32 = 1, count u64,
k u32, d u32, then per image: image_id u64, k*d f32.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_matrix
from .codebook import Codebook, assign_to_centers
from .descriptors import DescriptorSet
from .exceptions import (
    DimensionMismatchError,
    MalformedHeaderError,
    TruncatedFileError,
    UvmatchError,
)

MAGIC = b"UVL1"
VERSION = 1
_HEADER = struct.Struct("<4sIQII")


@dataclass(frozen=True)
class VladDescriptor:
    """Unit-norm k*d global vector for one image.

    ``vector`` is laid out as k contiguous blocks of d: block j holds
    the normalized residual sum against center j.  ``degenerate`` marks
    all-zero vectors (no features, or exactly cancelled residuals).
    """

    image_id: int
    vector: np.ndarray = field(repr=False)
    k: int = 0
    d: int = 0
    degenerate: bool = False

    def __post_init__(self):
        v = np.ascontiguousarray(self.vector, dtype=np.float32)
        if v.ndim != 1 or v.size != self.k * self.d:
            raise DimensionMismatchError(
                f"vector length {v.size} != k*d = {self.k * self.d}"
            )
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)


def vlad_from_descriptors(X, centers) -> np.ndarray:
    """Raw VLAD of descriptor rows ``X`` against ``centers``.

    Returns the normalized (k*d,) float32 vector.  Works for any
    descriptor dimension, which keeps the arithmetic directly checkable
    on small hand-worked examples.
    """
    centers = np.asarray(centers, dtype=np.float32)
    if centers.ndim != 2:
        raise DimensionMismatchError("centers must be 2-d")
    k, d = centers.shape
    X = np.asarray(X, dtype=np.float32)
    if X.size == 0:
        return np.zeros(k * d, dtype=np.float32)
    X = check_matrix(X, "descriptors")
    if X.shape[1] != d:
        raise DimensionMismatchError(f"descriptor dim {X.shape[1]} != codebook dim {d}")

    labels = assign_to_centers(X, centers)
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    X64 = X.astype(np.float64)
    sums = np.empty((k, d), dtype=np.float64)
    for j in range(d):
        sums[:, j] = np.bincount(labels, weights=X64[:, j], minlength=k)
    blocks = sums - counts[:, None] * centers.astype(np.float64)

    # Intra-normalization per block, then global L2.
    norms = np.linalg.norm(blocks, axis=1)
    nonzero = norms > 0
    blocks[nonzero] /= norms[nonzero, None]
    flat = blocks.reshape(-1)
    total = np.linalg.norm(flat)
    if total > 0:
        flat = flat / total
    return flat.astype(np.float32)


def aggregate_vlad(dset: DescriptorSet, codebook: Codebook) -> VladDescriptor:
    """VLAD of one image's unit-normalized descriptors."""
    if codebook.d != dset.descriptors.shape[1]:
        raise DimensionMismatchError(
            f"codebook dim {codebook.d} != descriptor dim {dset.descriptors.shape[1]}"
        )
    if len(dset) == 0:
        vec = np.zeros(codebook.k * codebook.d, dtype=np.float32)
    else:
        vec = vlad_from_descriptors(dset.unit_descriptors(), codebook.centers)
    degenerate = not np.any(vec)
    return VladDescriptor(dset.image_id, vec, codebook.k, codebook.d, degenerate)


def batch_aggregate(sets, codebook: Codebook, n_jobs: int = 1):
    """Aggregate many images; output order matches input order.

    Per-image work is independent, so results are identical whether run
    sequentially or on a thread pool.  Per-image failures are re-raised
    with the image id attached.
    """

    def one(dset):
        try:
            return aggregate_vlad(dset, codebook)
        except UvmatchError as exc:
            raise type(exc)(f"image {dset.image_id}: {exc}") from exc

    if n_jobs <= 1 or len(sets) <= 1:
        return [one(s) for s in sets]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(one, sets))


class VladEncoder(TransformerMixin, BaseEstimator):
    """Transformer view of VLAD aggregation for a fixed codebook.

    ``transform`` maps a list of DescriptorSets to the stacked
    (n, k*d) float32 matrix, in input order.
    """

    def __init__(self, codebook: Codebook = None, n_jobs: int = 1):
        self.codebook = codebook
        self.n_jobs = n_jobs

    def fit(self, X=None, y=None):
        if self.codebook is None:
            raise ValueError("VladEncoder needs a codebook")
        return self

    def transform(self, sets):
        self.fit()
        vlads = batch_aggregate(sets, self.codebook, self.n_jobs)
        return np.stack([v.vector for v in vlads]) if vlads else np.empty((0, 0), np.float32)


def save_vlad_matrix(vlads, path) -> None:
    """Write a list of VladDescriptors as UVL1."""
    if not vlads:
        raise UvmatchError("refusing to write an empty VLAD matrix")
    k, d = vlads[0].k, vlads[0].d
    for v in vlads:
        if (v.k, v.d) != (k, d):
            raise DimensionMismatchError("mixed k/d in VLAD batch")
    record = np.dtype([("image_id", "<u8"), ("vector", "<f4", (k * d,))])
    out = np.empty(len(vlads), dtype=record)
    for i, v in enumerate(vlads):
        out[i]["image_id"] = v.image_id
        out[i]["vector"] = v.vector
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(vlads), k, d))
        fh.write(out.tobytes())


def load_vlad_matrix(path):
    """Read UVL1; returns (image_ids u64 array, (n, k*d) f32 matrix, k, d)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise MalformedHeaderError(f"{path}: file shorter than UVL1 header")
    magic, version, count, k, d = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise MalformedHeaderError(f"{path}: unsupported version {version}")
    record = np.dtype([("image_id", "<u8"), ("vector", "<f4", (k * d,))])
    payload = blob[_HEADER.size :]
    if len(payload) != count * record.itemsize:
        raise TruncatedFileError(
            f"{path}: expected {count * record.itemsize} payload bytes, "
            f"found {len(payload)}"
        )
    records = np.frombuffer(payload, dtype=record)
    ids = records["image_id"].copy()
    matrix = records["vector"].reshape(count, k * d).copy()
    return ids, matrix, k, d
