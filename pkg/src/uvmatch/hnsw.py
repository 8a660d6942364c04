"""Hierarchical navigable small world index over global descriptors.

Layer 0 holds every vector; each higher layer keeps a geometrically
thinning subset that acts as an expressway for the greedy descent.  A
query walks greedily from the entry point down the upper layers, then
runs a best-first expansion with a bounded candidate list (ef) on layer
0.  Insertion reuses the same search to find candidate neighbors, picks
a diverse subset of them (keep a candidate only if it is closer to the
new vertex than to any already-kept neighbor, topping up nearest-first),
and keeps all degree caps and edge symmetry intact when reciprocal
edges overflow.

Exactness contract: the graph search and :func:`brute_force_knn` share
one distance kernel and one (distance, image_id) ordering rule, so with
``ef_search`` equal to the index size the two return identical results,
not merely close ones.

Per query, a vertex's distance is computed at most once across all
layers (cached), so distance computations never exceed the vertex
count.

UVH1 layout (little-endian): magic "UVH1", version u32 = 1, params
(M u32, M0 u32, ef_construction u32, ml f64, seed u64), entry u64,
max_level u32, dim u32, vlad filename (u16 length + utf-8), sha256 of
the vlad file (32 bytes), vertex count u64, then per layer and vertex:
layer u32, vertex u64, degree u32, neighbor u64 list.  Vectors are not
duplicated; they are loaded back from the referenced UVL1 file, guarded
by the content hash.
"""

from __future__ import annotations

import hashlib
import heapq
import logging
import math
import os
import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from ._distances import pairwise_sq_dists, sq_dists_to
from .exceptions import (
    ContentHashMismatchError,
    DimensionMismatchError,
    DuplicateImageIdError,
    EmptyIndexError,
    EmptyInputError,
    MalformedHeaderError,
    TruncatedFileError,
)
from .seeding import rng_for
from .vlad import load_vlad_matrix

logger = logging.getLogger(__name__)

MAGIC = b"UVH1"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIdQQIIH")

# Heuristic pool: how far beyond the degree cap the diversity selection
# looks into the candidate list.
_POOL_SLACK = 16


@dataclass(frozen=True)
class HnswParams:
    """Build/search knobs.  M0 defaults to 2*M, ml to 1/ln(M)."""

    M: int = 32
    M0: int | None = None
    ef_construction: int = 200
    ef_search: int | None = None
    ml: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.M < 2:
            raise ValueError("M must be >= 2")
        if self.ef_construction < self.M:
            raise ValueError("ef_construction must be >= M")

    def resolved_m0(self) -> int:
        return 2 * self.M if self.M0 is None else self.M0

    def resolved_ml(self) -> float:
        return 1.0 / math.log(self.M) if self.ml is None else self.ml


class HnswIndex(BaseEstimator):
    """Build-once, query-many HNSW graph.

    Parameters mirror :class:`HnswParams`.  ``fit`` inserts the rows of
    X sequentially; the structure is deterministic for a fixed seed and
    input order.

    Attributes
    ----------
    vectors_ : ndarray (n, dim) float32
    image_ids_ : ndarray (n,) uint64
    levels_ : ndarray (n,) int32
    entry_ : int
        Vertex index of the entry point.
    max_level_ : int
    """

    def __init__(self, M=32, M0=None, ef_construction=200, ml=None, seed=0):
        self.M = M
        self.M0 = M0
        self.ef_construction = ef_construction
        self.ml = ml
        self.seed = seed

    # -- construction -------------------------------------------------

    def fit(self, X, image_ids=None):
        params = HnswParams(
            M=self.M, M0=self.M0, ef_construction=self.ef_construction,
            ml=self.ml, seed=self.seed,
        )
        X = np.ascontiguousarray(X, dtype=np.float32)
        if X.ndim != 2 or X.shape[0] == 0:
            raise EmptyInputError("index needs a non-empty (n, dim) matrix")
        if not np.all(np.isfinite(X)):
            raise ValueError("vectors contain NaN or infinite values")
        n = X.shape[0]
        if image_ids is None:
            image_ids = np.arange(n, dtype=np.uint64)
        else:
            image_ids = np.asarray(image_ids, dtype=np.uint64)
            if image_ids.shape != (n,):
                raise DimensionMismatchError("image_ids length != vector count")
        if len(np.unique(image_ids)) != n:
            raise DuplicateImageIdError("image ids must be unique")

        self.vectors_ = X
        self.image_ids_ = image_ids
        self._m0 = params.resolved_m0()
        self._ml = params.resolved_ml()

        u = rng_for(params.seed, "hnsw-levels").random(n)
        # Guard against log(0); cap keeps pathological draws shallow.
        levels = np.minimum(
            np.floor(-np.log(np.maximum(u, 1e-300)) * self._ml), 64
        ).astype(np.int32)
        self.levels_ = levels
        top = int(levels.max())

        caps = [self._m0] + [self.M] * top
        self._caps = caps
        self._nbrs = [np.full((n, c), -1, dtype=np.int32) for c in caps]
        self._ndist = [np.zeros((n, c), dtype=np.float32) for c in caps]
        self._deg = [np.zeros(n, dtype=np.int32) for _ in caps]

        self.entry_ = 0
        self.max_level_ = int(levels[0])
        for v in range(1, n):
            self._insert(v)
        return self

    def _dist_block(self, ids, q, dist, computed):
        """Distances of ``ids`` to ``q`` through the per-query cache."""
        todo = ids[~computed[ids]]
        if todo.size:
            dist[todo] = sq_dists_to(self.vectors_[todo], q)
            computed[todo] = True
        return dist[ids]

    def _greedy_descent(self, q, ep, layer, dist, computed):
        d_ep = self._dist_block(np.array([ep]), q, dist, computed)[0]
        nbrs_l, deg_l = self._nbrs[layer], self._deg[layer]
        while True:
            deg = deg_l[ep]
            if deg == 0:
                return ep
            ids = nbrs_l[ep, :deg]
            d = self._dist_block(ids, q, dist, computed)
            j = int(np.argmin(d))
            if d[j] < d_ep:
                ep = int(ids[j])
                d_ep = d[j]
            else:
                return ep

    def _search_layer(self, q, eps, ef, layer, dist, computed):
        """Best-first expansion; returns [(sq_dist, vertex)] ascending.

        A fresh per-layer seen set guarantees no vertex is expanded or
        queued twice within the layer; distances come from the shared
        per-query cache.
        """
        n = self.vectors_.shape[0]
        seen = np.zeros(n, dtype=bool)
        eps_arr = np.asarray(eps, dtype=np.int64)
        seen[eps_arr] = True
        d0 = self._dist_block(eps_arr, q, dist, computed)
        cand = [(float(d), int(v)) for d, v in zip(d0, eps_arr)]
        heapq.heapify(cand)
        res = [(-d, v) for d, v in cand]
        heapq.heapify(res)
        while len(res) > ef:
            heapq.heappop(res)

        nbrs_l, deg_l = self._nbrs[layer], self._deg[layer]
        full = len(res) >= ef
        worst = -res[0][0] if full else np.inf
        while cand:
            d_c, c = heapq.heappop(cand)
            if full and d_c > worst:
                break
            deg = deg_l[c]
            if deg == 0:
                continue
            ids = nbrs_l[c, :deg]
            new = ids[~seen[ids]]
            if new.size == 0:
                continue
            seen[new] = True
            d_new = self._dist_block(new, q, dist, computed)
            for dd, u in zip(d_new.tolist(), new.tolist()):
                if not full:
                    heapq.heappush(res, (-dd, u))
                    heapq.heappush(cand, (dd, u))
                    if len(res) >= ef:
                        full = True
                        worst = -res[0][0]
                elif dd < worst:
                    heapq.heapreplace(res, (-dd, u))
                    heapq.heappush(cand, (dd, u))
                    worst = -res[0][0]
        out = sorted((-d, v) for d, v in res)
        return out

    def _select_neighbors(self, cands, cap):
        """Diversity-aware selection over the nearest pool of candidates.

        ``cands`` is [(sq_dist_to_base, vertex)] ascending.  Keeps a
        candidate if it is closer to the base than to any already-kept
        neighbor; prunes otherwise; fills remaining quota nearest-first
        from the pruned pool, then from the tail of the candidate list.
        """
        if len(cands) <= cap:
            return list(cands)
        pool = cands[: cap + _POOL_SLACK]
        ids = np.fromiter((v for _, v in pool), dtype=np.int64, count=len(pool))
        vecs = self.vectors_[ids]
        G = pairwise_sq_dists(vecs, vecs)
        kept, pruned = [], []
        for i, (d_i, _) in enumerate(pool):
            if len(kept) == cap:
                break
            if not kept or d_i < G[i, kept].min():
                kept.append(i)
            else:
                pruned.append(i)
        selected = [pool[i] for i in kept]
        for i in pruned:
            if len(selected) == cap:
                break
            selected.append(pool[i])
        if len(selected) < cap:
            selected.extend(cands[len(pool): len(pool) + cap - len(selected)])
        return selected

    def _set_neighbors(self, layer, v, selected):
        nbrs_l, nd_l = self._nbrs[layer], self._ndist[layer]
        for slot, (d, u) in enumerate(selected):
            nbrs_l[v, slot] = u
            nd_l[v, slot] = d
        self._deg[layer][v] = len(selected)

    def _drop_backlink(self, layer, w, u):
        """Remove u from w's list (keeps edges symmetric after pruning)."""
        deg = self._deg[layer][w]
        row = self._nbrs[layer][w, :deg]
        hits = np.flatnonzero(row == u)
        if hits.size == 0:
            return
        j = int(hits[0])
        last = deg - 1
        nbrs_l, nd_l = self._nbrs[layer], self._ndist[layer]
        nbrs_l[w, j] = nbrs_l[w, last]
        nd_l[w, j] = nd_l[w, last]
        nbrs_l[w, last] = -1
        self._deg[layer][w] = last

    def _add_reciprocal(self, layer, u, v, d_uv, cap):
        """Add edge u->v, re-selecting u's neighbor list on overflow.

        The overflow path re-runs the diversity rule over the union of
        u's current neighbors and v.  Standing neighbors keep their
        acceptance status relative to members nearer than themselves;
        the only new rejection threat is v itself, so one distance batch
        (v against the current list) decides everything.
        """
        deg = self._deg[layer][u]
        nbrs_l, nd_l = self._nbrs[layer], self._ndist[layer]
        if deg < cap:
            nbrs_l[u, deg] = v
            nd_l[u, deg] = d_uv
            self._deg[layer][u] = deg + 1
            return

        cur_ids = nbrs_l[u, :deg].copy()
        cur_d = nd_l[u, :deg].copy()
        d_v_to_cur = sq_dists_to(self.vectors_[cur_ids], self.vectors_[v])

        nearer = cur_d < d_uv
        v_ok = not np.any(d_v_to_cur[nearer] <= d_uv)
        keep_cur = np.ones(deg, dtype=bool)
        if v_ok:
            farther = ~nearer
            keep_cur[farther & (d_v_to_cur <= cur_d)] = False

        ids_all = np.concatenate([cur_ids, [v]])
        d_all = np.concatenate([cur_d, [np.float32(d_uv)]])
        keep_all = np.concatenate([keep_cur, [v_ok]])
        order = np.argsort(d_all, kind="stable")
        priority = [i for i in order if keep_all[i]]
        priority += [i for i in order if not keep_all[i]]

        # Exactly one element must go.  Walking from the worst end, skip
        # any vertex this drop would orphan: edges are kept symmetric, so
        # cutting a degree-1 vertex loose would disconnect it for good.
        deg_l = self._deg[layer]
        drop = priority[-1]
        for i in reversed(priority):
            if deg_l[ids_all[i]] > 1:
                drop = i
                break
        chosen = [i for i in priority if i != drop]

        if drop == deg:
            # The new vertex itself lost: remove u from v's fresh list.
            self._drop_backlink(layer, v, u)
        else:
            self._drop_backlink(layer, int(ids_all[drop]), u)
        nbrs_l[u, :cap] = ids_all[chosen]
        nd_l[u, :cap] = d_all[chosen]
        self._deg[layer][u] = cap

    def _insert(self, v):
        q = self.vectors_[v]
        lv = int(self.levels_[v])
        n = self.vectors_.shape[0]
        dist = np.empty(n, dtype=np.float32)
        computed = np.zeros(n, dtype=bool)

        ep = self.entry_
        for layer in range(self.max_level_, lv, -1):
            ep = self._greedy_descent(q, ep, layer, dist, computed)

        eps = [ep]
        for layer in range(min(self.max_level_, lv), -1, -1):
            W = self._search_layer(
                q, eps, self.ef_construction, layer, dist, computed
            )
            cap = self._caps[layer]
            selected = self._select_neighbors(W, cap)
            self._set_neighbors(layer, v, selected)
            for d_vu, u in selected:
                self._add_reciprocal(layer, u, v, d_vu, cap)
            eps = [u for _, u in W]

        if lv > self.max_level_:
            self.entry_ = v
            self.max_level_ = lv

    # -- queries -------------------------------------------------------

    def knn_search(self, query, topk, ef_search=None, return_stats=False):
        """Nearest image ids for one query vector.

        Returns a list of (image_id, euclidean_distance) sorted by
        (distance, image_id), at most ``topk`` long.  ``ef_search``
        defaults to ``max(topk, requested)`` and is clamped to >=topk.
        """
        if not hasattr(self, "vectors_") or self.vectors_.shape[0] == 0:
            raise EmptyIndexError("index has no vectors")
        q = np.ascontiguousarray(query, dtype=np.float32).reshape(-1)
        if q.shape[0] != self.vectors_.shape[1]:
            raise DimensionMismatchError(
                f"query dim {q.shape[0]} != index dim {self.vectors_.shape[1]}"
            )
        if topk < 1:
            raise ValueError("topk must be >= 1")
        ef = max(topk, topk if ef_search is None else int(ef_search))

        n = self.vectors_.shape[0]
        dist = np.empty(n, dtype=np.float32)
        computed = np.zeros(n, dtype=bool)
        ep = self.entry_
        for layer in range(self.max_level_, 0, -1):
            ep = self._greedy_descent(q, ep, layer, dist, computed)
        W = self._search_layer(q, [ep], ef, 0, dist, computed)

        ids = self.image_ids_
        ranked = sorted((d, int(ids[v])) for d, v in W)[:topk]
        results = [(i, math.sqrt(d)) for d, i in ranked]
        if return_stats:
            stats = {"distance_computations": int(computed.sum())}
            return results, stats
        return results

    def kneighbors(self, Q, n_neighbors=10, ef_search=None):
        """Batch query: returns (distances, image_ids) arrays."""
        Q = np.ascontiguousarray(Q, dtype=np.float32)
        if Q.ndim == 1:
            Q = Q[None, :]
        k = min(n_neighbors, self.vectors_.shape[0])
        D = np.empty((len(Q), k), dtype=np.float64)
        I = np.empty((len(Q), k), dtype=np.uint64)
        for r, q in enumerate(Q):
            hits = self.knn_search(q, k, ef_search=ef_search)
            D[r] = [d for _, d in hits]
            I[r] = [i for i, _ in hits]
        return D, I

    # -- integrity -----------------------------------------------------

    def audit(self, check_distances=200):
        """Verify structural invariants; returns a report dict.

        Checks degree caps, no self-loops or duplicate slots, neighbor
        levels (layer nesting), and edge bidirectionality on every
        layer; re-computes a sample of stored neighbor distances.
        """
        report = {"ok": True, "violations": []}

        def fail(msg):
            report["ok"] = False
            report["violations"].append(msg)

        n = self.vectors_.shape[0]
        rng = np.random.default_rng(0)
        for layer, cap in enumerate(self._caps):
            deg = self._deg[layer]
            nbrs = self._nbrs[layer]
            if np.any(deg > cap):
                fail(f"layer {layer}: degree cap exceeded")
            members = np.flatnonzero(self.levels_ >= layer)
            non_members = np.flatnonzero(self.levels_ < layer)
            if np.any(deg[non_members] > 0):
                fail(f"layer {layer}: edges on vertices below this level")
            lists = {}
            for v in members:
                row = nbrs[v, : deg[v]]
                if np.any(row == v):
                    fail(f"layer {layer}: self-loop at {v}")
                if len(np.unique(row)) != len(row):
                    fail(f"layer {layer}: duplicate neighbor at {v}")
                if row.size and np.any(self.levels_[row] < layer):
                    fail(f"layer {layer}: neighbor below layer at {v}")
                lists[int(v)] = set(row.tolist())
            for v, neigh in lists.items():
                for u in neigh:
                    if v not in lists.get(u, ()):
                        fail(f"layer {layer}: edge {v}->{u} not reciprocal")
            if check_distances and members.size:
                picks = rng.choice(members, min(check_distances, members.size))
                for v in picks:
                    dv = deg[v]
                    if dv == 0:
                        continue
                    row = nbrs[v, :dv]
                    want = sq_dists_to(self.vectors_[row], self.vectors_[v])
                    if not np.allclose(self._ndist[layer][v, :dv], want, rtol=1e-5):
                        fail(f"layer {layer}: stale stored distance at {v}")
        if not (0 <= self.entry_ < n):
            fail("entry point out of range")
        if self.levels_[self.entry_] != self.max_level_:
            fail("entry point not on the top layer")
        return report


def build_index(vlads, params: HnswParams = HnswParams()) -> HnswIndex:
    """Index a list of VladDescriptors, skipping degenerate ones."""
    usable = [v for v in vlads if not v.degenerate]
    skipped = [v.image_id for v in vlads if v.degenerate]
    if skipped:
        logger.warning("excluding %d degenerate (all-zero) vectors: %s",
                       len(skipped), skipped[:10])
    if not usable:
        raise EmptyInputError("no non-degenerate vectors to index")
    X = np.stack([v.vector for v in usable])
    ids = np.array([v.image_id for v in usable], dtype=np.uint64)
    index = HnswIndex(
        M=params.M, M0=params.M0, ef_construction=params.ef_construction,
        ml=params.ml, seed=params.seed,
    ).fit(X, ids)
    index.excluded_ids_ = skipped
    return index


def brute_force_knn(vectors, query, topk, image_ids=None):
    """Exact scan; ties broken by lower image id.

    Shares the distance kernel and ordering rule with knn_search so the
    two agree exactly when ef_search covers the whole index.
    """
    X = np.ascontiguousarray(vectors, dtype=np.float32)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyInputError("brute force needs a non-empty matrix")
    if image_ids is None:
        image_ids = np.arange(X.shape[0], dtype=np.uint64)
    q = np.ascontiguousarray(query, dtype=np.float32).reshape(-1)
    if q.shape[0] != X.shape[1]:
        raise DimensionMismatchError("query dimension mismatch")
    d = sq_dists_to(X, q)
    order = np.lexsort((image_ids, d))[:topk]
    return [(int(image_ids[i]), math.sqrt(float(d[i]))) for i in order]


def save_index(index: HnswIndex, path, vlad_path) -> None:
    """Persist the graph as UVH1, referencing the UVL1 vector file."""
    vlad_name = os.path.basename(str(vlad_path))
    with open(vlad_path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).digest()
    name_bytes = vlad_name.encode("utf-8")
    header = _HEADER.pack(
        MAGIC, VERSION,
        index.M, index._m0, index.ef_construction,
        index._ml, index.seed,
        index.entry_, index.max_level_, index.vectors_.shape[1],
        len(name_bytes),
    )
    n_vertices = index.vectors_.shape[0]
    parts = [header, name_bytes, digest, struct.pack("<Q", n_vertices)]
    for layer in range(len(index._caps)):
        deg = index._deg[layer]
        nbrs = index._nbrs[layer]
        members = np.flatnonzero(index.levels_ >= layer)
        for v in members:
            dv = int(deg[v])
            parts.append(struct.pack("<IQI", layer, int(v), dv))
            if dv:
                parts.append(nbrs[v, :dv].astype("<u8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_index(path, vlad_path=None) -> HnswIndex:
    """Load UVH1 + its referenced UVL1 vectors, verifying the hash."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise MalformedHeaderError(f"{path}: file shorter than UVH1 header")
    (magic, version, M, M0, efc, ml, seed, entry, max_level, dim,
     name_len) = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise MalformedHeaderError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    if len(blob) < off + name_len + 32 + 8:
        raise TruncatedFileError(f"{path}: header block cut short")
    vlad_name = blob[off: off + name_len].decode("utf-8")
    off += name_len
    stored_digest = blob[off: off + 32]
    off += 32
    (n,) = struct.unpack_from("<Q", blob, off)
    off += 8

    if vlad_path is None:
        vlad_path = os.path.join(os.path.dirname(os.path.abspath(path)), vlad_name)
    with open(vlad_path, "rb") as fh:
        actual = hashlib.sha256(fh.read()).digest()
    if actual != stored_digest:
        raise ContentHashMismatchError(
            f"{vlad_path} does not match the checksum recorded in {path}"
        )
    ids, X, _, _ = load_vlad_matrix(vlad_path)
    if X.shape != (n, dim):
        raise DimensionMismatchError(
            f"vector file shape {X.shape} != index expectation {(n, dim)}"
        )

    index = HnswIndex(M=M, M0=M0, ef_construction=efc, ml=ml, seed=seed)
    index.vectors_ = X
    index.image_ids_ = ids
    index._m0 = M0
    index._ml = ml
    index.entry_ = entry
    index.max_level_ = max_level

    caps = [M0] + [M] * max(max_level, 0)
    levels = np.zeros(n, dtype=np.int32)
    nbrs = [np.full((n, c), -1, dtype=np.int32) for c in caps]
    ndist = [np.zeros((n, c), dtype=np.float32) for c in caps]
    degs = [np.zeros(n, dtype=np.int32) for _ in caps]
    rec = struct.Struct("<IQI")
    while off < len(blob):
        if off + rec.size > len(blob):
            raise TruncatedFileError(f"{path}: adjacency record cut short")
        layer, v, dv = rec.unpack_from(blob, off)
        off += rec.size
        need = dv * 8
        if off + need > len(blob):
            raise TruncatedFileError(f"{path}: neighbor list cut short")
        while layer >= len(caps):
            caps.append(M)
            nbrs.append(np.full((n, M), -1, dtype=np.int32))
            ndist.append(np.zeros((n, M), dtype=np.float32))
            degs.append(np.zeros(n, dtype=np.int32))
        row = np.frombuffer(blob, dtype="<u8", count=dv, offset=off).astype(np.int32)
        off += need
        if dv > caps[layer]:
            raise TruncatedFileError(f"{path}: degree {dv} above cap at layer {layer}")
        nbrs[layer][v, :dv] = row
        if dv:
            ndist[layer][v, :dv] = sq_dists_to(X[row], X[v])
        degs[layer][v] = dv
        levels[v] = max(levels[v], layer)

    index._caps = caps
    index._nbrs = nbrs
    index._ndist = ndist
    index._deg = degs
    index.levels_ = levels
    return index
