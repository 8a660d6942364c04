"""Shared distance kernels.

Both the graph index and the exhaustive reference search call
:func:`sq_dists_to` so the two routes produce bit-identical distances;
any ranking difference between them is then attributable to the graph
traversal alone, never to arithmetic.
"""

from __future__ import annotations

import numpy as np


def sq_dists_to(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance from ``query`` to every row of ``matrix``.

    Computed as an explicit difference followed by a row-wise dot
    product.  Slower than the expanded ``|x|^2 - 2xy + |y|^2`` form but
    exact for equal rows (yields 0.0, never a small negative).
    """
    diff = matrix - query
    return np.einsum("ij,ij->i", diff, diff)


def pairwise_sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Dense (len(A), len(B)) squared-distance matrix via the matmul trick.

    Fast path for bulk assignment; values can drift by ~1e-5 relative
    and dip slightly negative, so results are clamped at zero.  Use
    :func:`sq_dists_to` where exactness matters.
    """
    aa = np.einsum("ij,ij->i", A, A)[:, None]
    bb = np.einsum("ij,ij->i", B, B)[None, :]
    D = aa + bb - 2.0 * (A @ B.T)
    np.maximum(D, 0.0, out=D)
    return D
