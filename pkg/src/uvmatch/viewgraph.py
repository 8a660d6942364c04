"""Weighted view graph construction from verified pairs.

Each retained pair becomes one undirected edge.  The weight blends two
signals:

    w_inlier  = ln(N_inlier) / ln(N_max_inlier)     (global maximum)
    w_overlap = (CH_i + CH_j) / (A_i + A_j)
    w_ij      = R_ew * w_inlier + (1 - R_ew) * w_overlap

where CH is the convex-hull area of the pair's inlier keypoints in
each image and A the image area.  Hulls come from Andrew's monotone
chain, returned counter-clockwise with the shoelace area.  The vertex
set covers every input image; images that end up without edges are
kept and reported as isolated.

On disk the graph is a text edge list, one `i j w_ij N_inlier
w_inlier w_overlap` line per edge sorted by (i, j), next to a JSON
header holding the vertex ids, image dimensions, R_ew, the global
inlier maximum, and the isolated vertices.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import BadDimensionError
from .verification import VerifiedPair

R_EW_DEFAULT = 0.5


@dataclass(frozen=True)
class ConvexHull:
    """Counter-clockwise hull ring and its enclosed area."""

    vertices: np.ndarray  # (h, 2) float64
    area: float


@dataclass(frozen=True)
class GraphEdge:
    i: int
    j: int
    weight: float
    n_inlier: int
    w_inlier: float
    w_overlap: float


@dataclass
class ViewGraph:
    image_ids: list            # sorted vertex ids
    dims: dict                 # image id -> (width, height)
    edges: list                # GraphEdge, sorted by (i, j)
    r_ew: float = R_EW_DEFAULT
    n_max_inlier: int = 0
    isolated: list = field(default_factory=list)

    @property
    def n_vertices(self) -> int:
        return len(self.image_ids)

    def weight_matrix(self):
        """(ids, dense symmetric weight matrix) for partitioning."""
        ids = list(self.image_ids)
        pos = {v: k for k, v in enumerate(ids)}
        W = np.zeros((len(ids), len(ids)), dtype=np.float64)
        for e in self.edges:
            a, b = pos[e.i], pos[e.j]
            W[a, b] = W[b, a] = e.weight
        return ids, W


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points) -> ConvexHull:
    """Andrew monotone-chain hull of 2D points.

    Fewer than three distinct non-collinear points give a degenerate
    ring with area 0.  The returned ring is counter-clockwise and
    strictly convex (collinear boundary points are dropped).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        return ConvexHull(pts.copy(), 0.0)
    uniq = np.unique(pts, axis=0)  # lexicographic sort by (x, y)
    if uniq.shape[0] < 3:
        return ConvexHull(uniq, 0.0)

    def half(chain_pts):
        out = []
        for p in chain_pts:
            while len(out) >= 2 and _cross(out[-2], out[-1], p) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(uniq)
    upper = half(uniq[::-1])
    ring = np.array(lower[:-1] + upper[:-1])
    if ring.shape[0] < 3:
        return ConvexHull(ring, 0.0)
    x, y = ring[:, 0], ring[:, 1]
    area = 0.5 * float(
        np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
    )
    return ConvexHull(ring, area)


def edge_weight(
    pair: VerifiedPair,
    set_a,
    set_b,
    n_max_inlier: int,
    r_ew: float = R_EW_DEFAULT,
):
    """(w_ij, w_inlier, w_overlap) for one verified pair.

    The overlap term uses convex hulls of the pair's inlier keypoints
    in each image over the summed image areas, clipped to 1 in case
    keypoints fall outside the nominal frame.
    """
    if not 0.0 <= r_ew <= 1.0:
        raise ValueError("r_ew must be in [0, 1]")
    if n_max_inlier < pair.n_inlier:
        raise ValueError("n_max_inlier below this pair's inlier count")
    area_a = float(set_a.width) * float(set_a.height)
    area_b = float(set_b.width) * float(set_b.height)
    if area_a <= 0 or area_b <= 0:
        raise BadDimensionError("image area must be positive")

    w_inlier = math.log(pair.n_inlier) / math.log(n_max_inlier) \
        if n_max_inlier > 1 else 1.0
    ia = [m.index_a for m in pair.matches]
    ib = [m.index_b for m in pair.matches]
    ch_a = convex_hull(set_a.keypoints[ia, :2]).area
    ch_b = convex_hull(set_b.keypoints[ib, :2]).area
    w_overlap = min(1.0, (ch_a + ch_b) / (area_a + area_b))
    w_ij = r_ew * w_inlier + (1.0 - r_ew) * w_overlap
    return w_ij, w_inlier, w_overlap


def build_view_graph(pairs, sets, r_ew: float = R_EW_DEFAULT) -> ViewGraph:
    """Assemble the weighted graph over all images in ``sets``.

    The inlier-count normalizer is the global maximum over the given
    pairs, so edge weights are mutually comparable.  Vertices without
    any edge are retained and listed as isolated.
    """
    by_id = {s.image_id: s for s in sets}
    image_ids = sorted(by_id)
    if not pairs:
        return ViewGraph(image_ids, _dims(by_id), [], r_ew, 0, list(image_ids))
    n_max = max(p.n_inlier for p in pairs)
    edges = []
    seen = set()
    touched = set()
    for p in sorted(pairs, key=lambda p: (p.i, p.j)):
        key = (min(p.i, p.j), max(p.i, p.j))
        if key in seen or p.i == p.j:
            continue
        seen.add(key)
        w, w_in, w_ov = edge_weight(p, by_id[p.i], by_id[p.j], n_max, r_ew)
        edges.append(GraphEdge(key[0], key[1], w, p.n_inlier, w_in, w_ov))
        touched.update(key)
    isolated = [v for v in image_ids if v not in touched]
    return ViewGraph(image_ids, _dims(by_id), edges, r_ew, n_max, isolated)


def _dims(by_id):
    return {i: (s.width, s.height) for i, s in by_id.items()}


def save_view_graph(graph: ViewGraph, edges_path, header_path) -> None:
    with open(edges_path, "w", encoding="utf-8") as fh:
        for e in graph.edges:
            fh.write(
                f"{e.i} {e.j} {e.weight:.9f} {e.n_inlier} "
                f"{e.w_inlier:.9f} {e.w_overlap:.9f}\n"
            )
    header = {
        "n_vertices": graph.n_vertices,
        "n_edges": len(graph.edges),
        "r_ew": graph.r_ew,
        "n_max_inlier": graph.n_max_inlier,
        "image_ids": [int(v) for v in graph.image_ids],
        "dims": {str(i): [int(w), int(h)] for i, (w, h) in sorted(graph.dims.items())},
        "isolated": [int(v) for v in graph.isolated],
    }
    with open(header_path, "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_view_graph(edges_path, header_path) -> ViewGraph:
    with open(header_path, "r", encoding="utf-8") as fh:
        header = json.load(fh)
    edges = []
    with open(edges_path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ValueError(
                    f"{edges_path}:{line_no}: expected 6 fields, got {len(parts)}"
                )
            edges.append(
                GraphEdge(
                    int(parts[0]), int(parts[1]), float(parts[2]),
                    int(parts[3]), float(parts[4]), float(parts[5]),
                )
            )
    dims = {int(k): (v[0], v[1]) for k, v in header["dims"].items()}
    return ViewGraph(
        image_ids=list(header["image_ids"]),
        dims=dims,
        edges=edges,
        r_ew=float(header["r_ew"]),
        n_max_inlier=int(header["n_max_inlier"]),
        isolated=list(header["isolated"]),
    )
