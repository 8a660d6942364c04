"""Synthetic calibrated two-view scenes for fundamental-matrix tests.

Builds a pair of pinhole cameras with a known relative pose, projects
random 3D points into both views, and returns the ground-truth F
computed independently from the camera matrices (F = K2^-T [t]x R K1^-1),
so solver output can be checked against a closed-form reference.
"""

import numpy as np

WIDTH, HEIGHT = 1000, 750


def rotation_matrix(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = skew(axis)
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def skew(v):
    return np.array(
        [[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]],
        dtype=np.float64,
    )


def two_view_scene(n=300, seed=0, quantize=False, outlier_frac=0.0):
    """Correspondences between two views of a random 3D point cloud.

    Returns (pts_a, pts_b, is_inlier, F_true).  With ``quantize`` the
    projections are rounded to the pixel grid (1-pixel measurement
    noise); ``outlier_frac`` of the output rows are independent random
    point pairs.
    """
    rng = np.random.default_rng(seed)
    K = np.array([[800.0, 0, 500], [0, 800, 375], [0, 0, 1]])
    R = rotation_matrix(rng.normal(size=3), 0.08 + 0.04 * rng.random())
    t = np.array([1.0, 0.15, 0.1]) + 0.05 * rng.normal(size=3)

    X = rng.uniform([-4, -3, 5], [4, 3, 12], size=(4 * n, 3))
    xa = X @ K.T
    xa = xa[:, :2] / xa[:, 2:3]
    xb = (X @ R.T + t) @ K.T
    xb = xb[:, :2] / xb[:, 2:3]
    keep = (
        (xa[:, 0] >= 0) & (xa[:, 0] < WIDTH)
        & (xa[:, 1] >= 0) & (xa[:, 1] < HEIGHT)
        & (xb[:, 0] >= 0) & (xb[:, 0] < WIDTH)
        & (xb[:, 1] >= 0) & (xb[:, 1] < HEIGHT)
    )
    xa, xb = xa[keep][:n], xb[keep][:n]
    n_in = xa.shape[0]

    if quantize:
        xa, xb = np.round(xa), np.round(xb)

    n_out = int(round(n_in * outlier_frac / (1.0 - outlier_frac))) \
        if outlier_frac else 0
    oa = rng.uniform([0, 0], [WIDTH, HEIGHT], size=(n_out, 2))
    ob = rng.uniform([0, 0], [WIDTH, HEIGHT], size=(n_out, 2))

    pts_a = np.concatenate([xa, oa])
    pts_b = np.concatenate([xb, ob])
    labels = np.concatenate([np.ones(n_in, bool), np.zeros(n_out, bool)])
    order = rng.permutation(pts_a.shape[0])

    Kinv = np.linalg.inv(K)
    F = Kinv.T @ skew(t) @ R @ Kinv
    F = F / np.linalg.norm(F)
    return pts_a[order], pts_b[order], labels[order], F
