"""Scene partitioning by recursive normalized cut.

A bisection step computes the Fiedler vector of the symmetric
normalized Laplacian

    L_sym = I - D^{-1/2} W D^{-1/2}

by shift-inverted power iteration: repeatedly solve L_sym y = x with
a conjugate-gradient inner loop while deflating the trivial
eigenvector D^{1/2} 1.  Candidate splits are every prefix of the
vertices sorted by Fiedler value; the one minimizing

    Ncut(A, B) = cut(A, B) / assoc(A) + cut(A, B) / assoc(B)

is taken.  Recursion splits connected components larger than the
cluster cap and leaves compliant components untouched.  If the
eigensolver does not reach tolerance within its iteration budget the
step falls back to a degree-sorted greedy halving and logs a warning,
so the size cap holds regardless.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DisconnectedGraphError, GraphTooSmallError
from .seeding import derive_seed, rng_for

logger = logging.getLogger(__name__)

MAX_CLUSTER_SIZE_DEFAULT = 500
EIG_TOL = 1e-8
EIG_MAX_ITER = 5000


class _ConvergenceFailure(RuntimeError):
    """Internal: eigensolver ran out of budget."""


@dataclass(frozen=True)
class SplitRecord:
    """Bookkeeping for one bisection during recursion."""

    size: int
    size_a: int
    size_b: int
    cut_cost: float
    ncut: float
    method: str  # "spectral" or "greedy"


@dataclass
class PartitionResult:
    assignment: dict           # image id -> cluster id
    sizes: list                # cluster id -> member count
    splits: list = field(default_factory=list)  # SplitRecord per bisection
    max_size: int = MAX_CLUSTER_SIZE_DEFAULT

    @property
    def n_clusters(self) -> int:
        return len(self.sizes)


def _check_square(W) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError(f"weight matrix must be square, got {W.shape}")
    if not np.allclose(W, W.T, atol=1e-12):
        raise ValueError("weight matrix must be symmetric")
    if np.any(W < 0):
        raise ValueError("weight matrix must be non-negative")
    return W


def connected_components(W) -> list:
    """Index sets of connected components, ordered by smallest member."""
    W = np.asarray(W)
    n = W.shape[0]
    unvisited = np.ones(n, dtype=bool)
    comps = []
    for start in range(n):
        if not unvisited[start]:
            continue
        frontier = [start]
        unvisited[start] = False
        members = [start]
        while frontier:
            nxt = []
            for u in frontier:
                nbrs = np.nonzero((W[u] > 0) & unvisited)[0]
                unvisited[nbrs] = False
                nxt.extend(nbrs.tolist())
            members.extend(nxt)
            frontier = nxt
        comps.append(np.array(sorted(members), dtype=np.int64))
    return comps


def fiedler_vector(W, tol: float = EIG_TOL, max_iter: int = EIG_MAX_ITER,
                   seed: int = 0):
    """Second eigenpair (v, lam) of L_sym for a connected graph.

    Shift-inverted power iteration at shift 0: each outer step solves
    L_sym y = x with conjugate gradients restricted to the complement
    of the trivial eigenvector.  ``max_iter`` caps the total number of
    operator applications across inner and outer loops; exhausting it
    raises an internal failure that callers turn into the greedy
    fallback.
    """
    W = np.asarray(W, dtype=np.float64)
    n = W.shape[0]
    d = W.sum(axis=1)
    if np.any(d <= 0):
        raise DisconnectedGraphError("graph has an isolated vertex")
    dis = 1.0 / np.sqrt(d)
    u0 = np.sqrt(d)
    u0 /= np.linalg.norm(u0)

    budget = [int(max_iter)]

    def apply_l(x):
        if budget[0] <= 0:
            raise _ConvergenceFailure("operator budget exhausted")
        budget[0] -= 1
        return x - dis * (W @ (dis * x))

    def deflate(x):
        return x - (u0 @ x) * u0

    def cg_solve(b):
        # Conjugate gradients on span(u0)^perp, where L_sym is positive
        # definite for a connected graph.  Exact after n steps.
        x = np.zeros_like(b)
        r = deflate(b.copy())
        p = r.copy()
        rs = r @ r
        b_norm = math.sqrt(rs)
        if b_norm == 0.0:
            return x
        for _ in range(n + 2):
            ap = deflate(apply_l(p))
            denom = p @ ap
            if denom <= 0:
                break
            alpha = rs / denom
            x += alpha * p
            r -= alpha * ap
            rs_new = r @ r
            if math.sqrt(rs_new) <= 0.01 * tol * b_norm:
                break
            p = r + (rs_new / rs) * p
            rs = rs_new
        return x

    rng = rng_for(seed, "fiedler")
    x = deflate(rng.standard_normal(n))
    nx = np.linalg.norm(x)
    if nx == 0.0:
        x = deflate(np.arange(1.0, n + 1.0))
        nx = np.linalg.norm(x)
    x /= nx
    while True:
        y = deflate(cg_solve(x))
        ny = np.linalg.norm(y)
        if ny == 0.0:
            raise _ConvergenceFailure("inverse iteration collapsed")
        y /= ny
        ly = apply_l(y)
        lam = float(y @ ly)
        residual = float(np.linalg.norm(ly - lam * y))
        if residual <= tol:
            return y, lam
        x = y


def ncut_value(W, mask_a) -> float:
    """Normalized-cut cost of a bipartition given by a boolean mask."""
    W = np.asarray(W, dtype=np.float64)
    mask_a = np.asarray(mask_a, dtype=bool)
    mask_b = ~mask_a
    cut = float(W[np.ix_(mask_a, mask_b)].sum())
    d = W.sum(axis=1)
    assoc_a = float(d[mask_a].sum())
    assoc_b = float(d[mask_b].sum())
    if assoc_a == 0.0 or assoc_b == 0.0:
        return math.inf
    return cut / assoc_a + cut / assoc_b


def _sweep(W, v):
    """Best prefix split of vertices sorted by Fiedler value.

    Returns (boolean mask of side A, cut weight, ncut).  Every one of
    the n - 1 prefixes is scored; the cut and the per-vertex
    connection to A are updated incrementally.
    """
    n = W.shape[0]
    d = W.sum(axis=1)
    total = float(d.sum())
    order = np.lexsort((np.arange(n), v))
    conn_a = np.zeros(n, dtype=np.float64)
    cut = 0.0
    assoc_a = 0.0
    best = (math.inf, -1, 0.0)
    for step in range(n - 1):
        u = order[step]
        cut += float(d[u]) - 2.0 * float(conn_a[u])
        assoc_a += float(d[u])
        conn_a += W[u]
        assoc_b = total - assoc_a
        if assoc_a > 0.0 and assoc_b > 0.0:
            ncut = cut / assoc_a + cut / assoc_b
            if ncut < best[0] - 1e-15:
                best = (ncut, step, cut)
    ncut, split_at, cut_w = best
    if split_at < 0:
        raise _ConvergenceFailure("no valid split in sweep")
    mask_a = np.zeros(n, dtype=bool)
    mask_a[order[: split_at + 1]] = True
    return mask_a, cut_w, ncut


def normalized_cut_bisect(W, seed: int = 0, tol: float = EIG_TOL,
                          max_iter: int = EIG_MAX_ITER):
    """Spectral bipartition of a connected graph.

    Returns (indices_a, indices_b, ncut) with both sides non-empty,
    side A holding the smaller minimum index.  Raises
    ``GraphTooSmallError`` for fewer than two vertices and
    ``DisconnectedGraphError`` when the graph is not connected.
    """
    W = _check_square(W)
    n = W.shape[0]
    if n < 2:
        raise GraphTooSmallError(f"need at least 2 vertices, got {n}")
    if len(connected_components(W)) != 1:
        raise DisconnectedGraphError("graph is not connected")
    v, _lam = fiedler_vector(W, tol=tol, max_iter=max_iter, seed=seed)
    mask_a, _cut, ncut = _sweep(W, v)
    idx_a = np.nonzero(mask_a)[0]
    idx_b = np.nonzero(~mask_a)[0]
    if idx_b[0] < idx_a[0]:
        idx_a, idx_b = idx_b, idx_a
    return idx_a, idx_b, float(ncut)


def _greedy_bisect(W):
    """Degree-sorted alternating halving used when the solver fails."""
    d = W.sum(axis=1)
    order = np.lexsort((np.arange(W.shape[0]), -d))
    mask_a = np.zeros(W.shape[0], dtype=bool)
    mask_a[order[0::2]] = True
    cut = float(W[np.ix_(mask_a, ~mask_a)].sum())
    return mask_a, cut, ncut_value(W, mask_a)


def partition_view_graph(graph, max_size: int = MAX_CLUSTER_SIZE_DEFAULT,
                         seed: int = 0, tol: float = EIG_TOL,
                         max_iter: int = EIG_MAX_ITER) -> PartitionResult:
    """Recursively bisect a view graph until every cluster fits the cap.

    ``graph`` is either a ``ViewGraph`` or an ``(ids, W)`` pair.
    Connected components are separated first and components already
    within ``max_size`` are never split.  Output cluster ids are dense
    and ordered by each cluster's smallest image id.
    """
    if max_size < 1:
        raise ValueError("max_size must be >= 1")
    if hasattr(graph, "weight_matrix"):
        ids, W = graph.weight_matrix()
    else:
        ids, W = graph
        W = _check_square(W)
    ids = list(ids)
    if len(ids) != W.shape[0]:
        raise ValueError("vertex ids and weight matrix disagree")
    if len(ids) == 0:
        return PartitionResult({}, [], [], max_size)

    splits = []
    clusters = []
    counter = [0]

    def process(idx):
        # idx: global indices, sorted; may be disconnected
        sub = W[np.ix_(idx, idx)]
        comps = connected_components(sub) if idx.size > 1 else [np.array([0])]
        for comp in comps:
            members = idx[comp]
            if members.size <= max_size:
                clusters.append(members)
                continue
            comp_w = W[np.ix_(members, members)]
            bisect_seed = derive_seed(seed, "ncut", counter[0])
            counter[0] += 1
            try:
                a, b, ncut = normalized_cut_bisect(
                    comp_w, seed=bisect_seed, tol=tol, max_iter=max_iter
                )
                mask_a = np.zeros(members.size, dtype=bool)
                mask_a[a] = True
                cut = float(comp_w[np.ix_(mask_a, ~mask_a)].sum())
                method = "spectral"
            except _ConvergenceFailure as exc:
                logger.warning(
                    "spectral bisection of %d vertices failed (%s); "
                    "falling back to degree-sorted greedy split",
                    members.size, exc,
                )
                mask_a, cut, ncut = _greedy_bisect(comp_w)
                method = "greedy"
            splits.append(
                SplitRecord(
                    size=int(members.size),
                    size_a=int(mask_a.sum()),
                    size_b=int((~mask_a).sum()),
                    cut_cost=cut,
                    ncut=float(ncut),
                    method=method,
                )
            )
            process(members[mask_a])
            process(members[~mask_a])

    process(np.arange(len(ids), dtype=np.int64))

    clusters.sort(key=lambda m: int(m[0]))
    assignment = {}
    sizes = []
    for cid, members in enumerate(clusters):
        sizes.append(int(members.size))
        for g in members:
            assignment[ids[int(g)]] = cid
    return PartitionResult(assignment, sizes, splits, max_size)


def save_partition(result: PartitionResult, txt_path, json_path) -> None:
    """Write `image_id cluster_id` lines plus a JSON run summary."""
    with open(txt_path, "w", encoding="utf-8") as fh:
        for image_id in sorted(result.assignment):
            fh.write(f"{image_id} {result.assignment[image_id]}\n")
    summary = {
        "n_clusters": result.n_clusters,
        "max_size": result.max_size,
        "sizes": result.sizes,
        "splits": [
            {
                "size": s.size,
                "size_a": s.size_a,
                "size_b": s.size_b,
                "cut_cost": s.cut_cost,
                "ncut": s.ncut,
                "method": s.method,
            }
            for s in result.splits
        ],
    }
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_partition(txt_path) -> dict:
    """Read an `image_id cluster_id` assignment file."""
    assignment = {}
    with open(txt_path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(
                    f"{txt_path}:{line_no}: expected 2 fields, got {len(parts)}"
                )
            assignment[int(parts[0])] = int(parts[1])
    return assignment
