"""Visual codebook training: online sampling plus Lloyd's K-means.

The codebook is trained on a sampled subset of the collection (a
fraction ``p`` of images chosen uniformly at random, and from each the
``h`` largest-scale features), then clustered with Lloyd iterations.

The K-means here is deliberately hand-rolled rather than delegated:
the pipeline contracts require the recorded inertia after every
assignment step (monotonicity is an acceptance check), deterministic
mean accumulation independent of thread count, and a documented
empty-cluster reseed rule.

UVC1 layout (little-endian): magic "UVC1", version u32 = 1, k u32,
d u32, then k*d f32.  Training metadata goes to a ``<path>.meta``
text sidecar.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_matrix
from .exceptions import (
    BadDimensionError,
    DimensionMismatchError,
    EmptyInputError,
    MalformedHeaderError,
    TooFewDescriptorsError,
    TruncatedFileError,
)
from .seeding import rng_for

MAGIC = b"UVC1"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class SamplingConfig:
    """Online sampling knobs: image fraction p, per-image feature cap h."""

    p: float = 0.20
    h: int = 1500
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"p must be in (0, 1], got {self.p}")
        if self.h < 1:
            raise ValueError(f"h must be >= 1, got {self.h}")


@dataclass(frozen=True)
class Codebook:
    """k cluster centers plus how they were reached."""

    centers: np.ndarray  # (k, d) float32
    n_iterations: int = 0
    inertia: float = 0.0

    def __post_init__(self):
        c = np.ascontiguousarray(self.centers, dtype=np.float32)
        if c.ndim != 2 or c.shape[0] < 1:
            raise BadDimensionError(f"centers must be (k, d) with k >= 1, got {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "centers", c)

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def d(self) -> int:
        return self.centers.shape[1]


def sample_training_descriptors(sets, cfg: SamplingConfig) -> np.ndarray:
    """Pool unit descriptors from ceil(p*n) random images, h per image.

    Images are drawn without replacement and processed in ascending id
    order; within an image the h largest-scale features are taken
    (DescriptorSets are already scale-descending).  Deterministic for a
    fixed seed.
    """
    if not sets:
        raise EmptyInputError("no descriptor sets to sample from")
    n = len(sets)
    n_pick = int(np.ceil(cfg.p * n))
    rng = rng_for(cfg.seed, "sample")
    picked = np.sort(rng.choice(n, size=n_pick, replace=False))
    blocks = []
    for idx in picked:
        dset = sets[int(idx)]
        take = min(cfg.h, len(dset))
        if take:
            blocks.append(dset.unit_descriptors()[:take])
    if not blocks:
        raise EmptyInputError("sampled images contain no features")
    return np.concatenate(blocks, axis=0)


def _sq_dist_matrix(X64: np.ndarray, C64: np.ndarray) -> np.ndarray:
    """(n, k) squared distances in float64 via the expanded form."""
    D = (
        np.einsum("ij,ij->i", X64, X64)[:, None]
        - 2.0 * (X64 @ C64.T)
        + np.einsum("ij,ij->i", C64, C64)[None, :]
    )
    np.maximum(D, 0.0, out=D)
    return D


class CodebookKMeans(BaseEstimator):
    """Lloyd's K-means over descriptor vectors.

    Parameters
    ----------
    n_clusters : int
        Number of centers k.
    max_iter : int
        Maximum Lloyd iterations (assignment + mean update).
    tol : float
        Stop when the relative inertia decrease falls below this.
    init : {"k-means++", "random"} or ndarray of shape (k, d)
        Seeding strategy, or explicit initial centers.
    seed : int
        Substream seed for initialization.

    Attributes
    ----------
    cluster_centers_ : ndarray of shape (k, d), float32
    labels_ : ndarray of shape (n,), int32
        Assignment of the training data to final centers.
    inertia_ : float
        Sum of squared distances at the final assignment.
    inertia_history_ : list of float
        Inertia after every assignment step, non-increasing.
    n_iter_ : int
        Lloyd iterations run (mean updates performed).
    """

    def __init__(self, n_clusters=256, max_iter=50, tol=1e-4, init="k-means++", seed=0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.tol = tol
        self.init = init
        self.seed = seed

    def _init_centers(self, X64: np.ndarray) -> np.ndarray:
        k = self.n_clusters
        n = X64.shape[0]
        if isinstance(self.init, np.ndarray):
            C = np.ascontiguousarray(self.init, dtype=np.float64)
            if C.shape != (k, X64.shape[1]):
                raise DimensionMismatchError(
                    f"explicit init must be ({k}, {X64.shape[1]}), got {C.shape}"
                )
            return C.copy()
        rng = rng_for(self.seed, "kmeans-init")
        if self.init == "random":
            picks = rng.choice(n, size=k, replace=False)
            return X64[picks].copy()
        if self.init != "k-means++":
            raise ValueError(f"unknown init {self.init!r}")
        centers = np.empty((k, X64.shape[1]))
        first = int(rng.integers(n))
        centers[0] = X64[first]
        min_d2 = np.einsum("ij,ij->i", X64 - centers[0], X64 - centers[0])
        for c in range(1, k):
            total = min_d2.sum()
            if total <= 0:
                # All remaining mass is on already-chosen points; fall
                # back to a uniform draw.
                pick = int(rng.integers(n))
            else:
                pick = int(rng.choice(n, p=min_d2 / total))
            centers[c] = X64[pick]
            d2 = np.einsum("ij,ij->i", X64 - centers[c], X64 - centers[c])
            np.minimum(min_d2, d2, out=min_d2)
        return centers

    def fit(self, X):
        X = check_matrix(X, "descriptors")
        n, d = X.shape
        k = int(self.n_clusters)
        if k < 1:
            raise ValueError("n_clusters must be >= 1")
        if n < k:
            raise TooFewDescriptorsError(f"{n} descriptors for k={k}")

        X64 = X.astype(np.float64)
        centers = self._init_centers(X64)

        D = _sq_dist_matrix(X64, centers)
        labels = np.argmin(D, axis=1)
        point_d2 = np.take_along_axis(D, labels[:, None], axis=1).ravel()
        history = [float(point_d2.sum())]

        n_iter = 0
        for n_iter in range(1, self.max_iter + 1):
            # Mean update with a deterministic reduction: bincount sums
            # in index order regardless of thread count.
            counts = np.bincount(labels, minlength=k).astype(np.float64)
            sums = np.empty_like(centers)
            for j in range(d):
                sums[:, j] = np.bincount(labels, weights=X64[:, j], minlength=k)
            nonempty = counts > 0
            centers[nonempty] = sums[nonempty] / counts[nonempty, None]

            # Reseed each empty cluster to the point farthest from its
            # previous center (distance column from the last assignment).
            empties = np.flatnonzero(~nonempty)
            taken = set()
            for c in empties:
                col = D[:, c].copy()
                if taken:
                    col[list(taken)] = -np.inf
                far = int(np.argmax(col))
                centers[c] = X64[far]
                taken.add(far)

            D = _sq_dist_matrix(X64, centers)
            new_labels = np.argmin(D, axis=1)
            point_d2 = np.take_along_axis(D, new_labels[:, None], axis=1).ravel()
            history.append(float(point_d2.sum()))

            stable = bool(np.array_equal(new_labels, labels))
            labels = new_labels
            if stable:
                break
            prev, cur = history[-2], history[-1]
            if prev <= 0.0 or (prev - cur) / prev < self.tol:
                break

        self.cluster_centers_ = centers.astype(np.float32)
        self.labels_ = labels.astype(np.int32)
        self.inertia_ = history[-1]
        self.inertia_history_ = history
        self.n_iter_ = n_iter
        return self

    def predict(self, X) -> np.ndarray:
        X = check_matrix(X, "descriptors")
        if X.shape[1] != self.cluster_centers_.shape[1]:
            raise DimensionMismatchError(
                f"query dim {X.shape[1]} != codebook dim {self.cluster_centers_.shape[1]}"
            )
        return assign_to_centers(X, self.cluster_centers_)

    def to_codebook(self) -> Codebook:
        return Codebook(self.cluster_centers_, self.n_iter_, self.inertia_)


def train_codebook(descriptors, k, max_iters=50, tol=1e-4, seed=0, init="k-means++"):
    """Train a Codebook on pooled descriptors.  See CodebookKMeans."""
    est = CodebookKMeans(
        n_clusters=k, max_iter=max_iters, tol=tol, init=init, seed=seed
    )
    est.fit(descriptors)
    return est.to_codebook()


def assign_to_centers(X, centers) -> np.ndarray:
    """Index of the nearest center per row, ties to the lowest index."""
    X64 = np.asarray(X, dtype=np.float64)
    C64 = np.asarray(centers, dtype=np.float64)
    if X64.shape[1] != C64.shape[1]:
        raise DimensionMismatchError(
            f"vector dim {X64.shape[1]} != center dim {C64.shape[1]}"
        )
    # Chunked so the (n, k) distance block stays cache-sized at scale.
    n = X64.shape[0]
    out = np.empty(n, dtype=np.int32)
    step = max(1, int(2_000_000 // max(1, C64.shape[0])))
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        D = _sq_dist_matrix(X64[lo:hi], C64)
        out[lo:hi] = np.argmin(D, axis=1)
    return out


def nearest_center(codebook, v) -> int:
    """Nearest-center index for one vector (ties to the lowest index)."""
    centers = codebook.centers if isinstance(codebook, Codebook) else codebook
    v = np.asarray(v, dtype=np.float64).reshape(1, -1)
    return int(assign_to_centers(v, centers)[0])


def save_codebook(codebook: Codebook, path) -> None:
    """Write UVC1 plus a ``<path>.meta`` text sidecar."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, codebook.k, codebook.d))
        fh.write(np.ascontiguousarray(codebook.centers, dtype="<f4").tobytes())
    with open(f"{path}.meta", "w") as fh:
        fh.write(f"iterations={codebook.n_iterations}\n")
        fh.write(f"inertia={codebook.inertia!r}\n")


def load_codebook(path) -> Codebook:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise MalformedHeaderError(f"{path}: file shorter than UVC1 header")
    magic, version, k, d = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise MalformedHeaderError(f"{path}: unsupported version {version}")
    payload = blob[_HEADER.size :]
    expected = k * d * 4
    if len(payload) != expected:
        raise TruncatedFileError(
            f"{path}: expected {expected} payload bytes, found {len(payload)}"
        )
    centers = np.frombuffer(payload, dtype="<f4").reshape(k, d)

    n_iterations, inertia = 0, 0.0
    try:
        with open(f"{path}.meta") as fh:
            for line in fh:
                key, _, value = line.strip().partition("=")
                if key == "iterations":
                    n_iterations = int(value)
                elif key == "inertia":
                    inertia = float(value)
    except FileNotFoundError:
        pass
    return Codebook(centers, n_iterations, inertia)
