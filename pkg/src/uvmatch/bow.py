"""Vocabulary-tree bag-of-words retrieval baseline.

A hierarchical vocabulary is trained by recursive K-means over unit
descriptors (branching b per node, depth L); the leaves are the visual
words.  Images are quantized by greedy descent, word counts become
TF-IDF weights

    t = (n_id / n_d) * ln(N / N_i)

(term frequency times inverse document frequency), and the weighted
vectors are L2-normalized so a dot product is a cosine similarity.
Queries are scored through an inverted file that touches only postings
of the query's words; the result is identical to scoring against the
dense weight matrix.

UVT1 layout (little-endian): magic "UVT1", version u32 = 1, b u32,
L u32, d u32, node count u64, word count u64, image count u64 (zero
when document frequencies were never attached), node centers (f32),
word id per node (i32, -1 for internal nodes), per node a u32 child
count plus u32 child ids, then word document frequencies (u64) if the
image count is non-zero.

The database dump (magic "UVB1") stores image ids, per-image feature
counts, the postings of every word as (image_id u64, count u32) pairs,
and the normalized sparse weight rows.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from ._distances import pairwise_sq_dists
from ._validation import check_matrix
from .codebook import assign_to_centers, train_codebook
from .descriptors import DescriptorSet
from .exceptions import (
    DimensionMismatchError,
    EmptyDatabaseError,
    EmptyInputError,
    MalformedHeaderError,
    TooFewDescriptorsError,
    TruncatedFileError,
)
from .seeding import derive_seed

TREE_MAGIC = b"UVT1"
DB_MAGIC = b"UVB1"
VERSION = 1
_TREE_HEADER = struct.Struct("<4sIIIIQQQ")
_DB_HEADER = struct.Struct("<4sIQQ")


@dataclass
class VocabularyTree:
    """Hierarchical quantizer; leaves are the visual words.

    ``doc_freq``/``n_images`` start empty and are attached by
    :func:`build_bow_database` so the tree carries everything needed to
    weight a fresh query.
    """

    b: int
    L: int
    centers: np.ndarray            # (n_nodes, d) float32
    children: list[np.ndarray]     # per node, int32 child node ids
    word_of_node: np.ndarray       # (n_nodes,) int32, -1 for internal
    leaf_nodes: np.ndarray         # (V,) int32, word id -> node id
    doc_freq: np.ndarray | None = None   # (V,) int64, N_i per word
    n_images: int = 0
    seed: int = 0

    @property
    def n_words(self) -> int:
        return int(self.leaf_nodes.shape[0])

    @property
    def d(self) -> int:
        return int(self.centers.shape[1])

    def idf(self) -> np.ndarray:
        """ln(N / N_i) per word; exactly 0 for words in every image."""
        if self.doc_freq is None:
            raise EmptyDatabaseError("tree has no document frequencies yet")
        out = np.zeros(self.n_words, dtype=np.float64)
        seen = self.doc_freq > 0
        out[seen] = np.log(self.n_images / self.doc_freq[seen])
        return out

    def audit(self) -> dict:
        """Structural checks: branching bound, leaf/word consistency."""
        report = {"ok": True, "violations": []}

        def fail(msg):
            report["ok"] = False
            report["violations"].append(msg)

        if self.n_words > self.b ** max(self.L, 0):
            fail("more words than b^L")
        for node, ch in enumerate(self.children):
            if len(ch) > self.b:
                fail(f"node {node} has more than b children")
            is_leaf = self.word_of_node[node] >= 0
            if is_leaf and len(ch):
                fail(f"leaf node {node} has children")
            if not is_leaf and node > 0 and len(ch) == 0:
                fail(f"internal node {node} is childless")
        words = self.word_of_node[self.leaf_nodes]
        if not np.array_equal(words, np.arange(self.n_words)):
            fail("leaf_nodes does not enumerate words in order")
        return report


@dataclass(frozen=True)
class BowVector:
    """Sparse L2-normalized TF-IDF vector for one image."""

    image_id: int
    words: np.ndarray    # (m,) int64, strictly increasing
    weights: np.ndarray  # (m,) float64, already normalized
    degenerate: bool = False

    def to_dense(self, n_words: int) -> np.ndarray:
        out = np.zeros(n_words, dtype=np.float64)
        out[self.words] = self.weights
        return out


@dataclass
class InvertedFile:
    """Word -> postings; postings are parallel arrays sorted by image id."""

    image_ids: np.ndarray                      # (n,) uint64, database order
    entries: dict[int, tuple] = field(default_factory=dict)
    # entries[word] = (rows int32, counts uint32, weights float64); rows
    # index into image_ids, weights are the normalized TF-IDF values.

    def postings(self, word: int):
        """(image_ids, term counts) for one word, sorted by image id."""
        rows, counts, _ = self.entries.get(int(word), (None, None, None))
        if rows is None:
            return np.empty(0, np.uint64), np.empty(0, np.uint32)
        return self.image_ids[rows], counts

    @property
    def n_postings(self) -> int:
        return sum(len(rows) for rows, _, _ in self.entries.values())


@dataclass
class BowDatabase:
    """Everything needed to score queries: tree, postings, vectors."""

    tree: VocabularyTree
    inverted_file: InvertedFile
    bow_vectors: list[BowVector]
    feature_counts: np.ndarray  # (n,) uint32, n_d per image

    @property
    def image_ids(self) -> np.ndarray:
        return self.inverted_file.image_ids

    def __iter__(self):
        return iter((self.inverted_file, self.bow_vectors))


def tfidf_weight(n_id: int, n_d: int, n_images: int, doc_freq: int) -> float:
    """Term weight (n_id/n_d) * ln(N/N_i); exactly 0 when N_i == N."""
    if min(n_id, n_d, n_images, doc_freq) <= 0:
        raise ValueError("tfidf_weight needs positive counts")
    return (n_id / n_d) * math.log(n_images / doc_freq)


def train_vocabulary(pool, b: int = 10, L: int = 4, seed: int = 0) -> VocabularyTree:
    """Recursive K-means vocabulary over an (n, d) descriptor pool.

    Splitting stops at depth L or when a node holds fewer than b
    descriptors; every leaf becomes a word.  Node numbering (and with
    it word numbering) follows breadth-first construction order, which
    makes the tree deterministic for a fixed pool and seed.
    """
    X = check_matrix(pool, "vocabulary pool")
    if b < 2:
        raise ValueError("branching factor must be >= 2")
    if L < 0:
        raise ValueError("depth must be >= 0")
    if X.shape[0] < b:
        raise TooFewDescriptorsError(
            f"need at least {b} descriptors, got {X.shape[0]}"
        )

    centers = [X.mean(axis=0).astype(np.float32)]
    children: list[list[int]] = [[]]
    depth_of = [0]
    queue = [(0, np.arange(X.shape[0]))]
    while queue:
        node, idx = queue.pop(0)
        depth = depth_of[node]
        if depth == L or idx.shape[0] < b:
            continue  # stays a leaf
        cb = train_codebook(X[idx], k=b, seed=derive_seed(seed, "vtree", node))
        labels = assign_to_centers(X[idx], cb.centers)
        for c in range(b):
            members = idx[labels == c]
            if members.shape[0] == 0:
                continue
            child = len(centers)
            centers.append(cb.centers[c])
            children.append([])
            depth_of.append(depth + 1)
            children[node].append(child)
            queue.append((child, members))

    n_nodes = len(centers)
    word_of_node = np.full(n_nodes, -1, dtype=np.int32)
    leaf_nodes = [v for v in range(n_nodes) if not children[v]]
    for word, node in enumerate(leaf_nodes):
        word_of_node[node] = word
    return VocabularyTree(
        b=b, L=L,
        centers=np.stack(centers),
        children=[np.asarray(ch, dtype=np.int32) for ch in children],
        word_of_node=word_of_node,
        leaf_nodes=np.asarray(leaf_nodes, dtype=np.int32),
        seed=seed,
    )


def quantize_descriptors(tree: VocabularyTree, X) -> np.ndarray:
    """Word id per row of X via greedy root-to-leaf descent."""
    X = np.ascontiguousarray(X, dtype=np.float32)
    if X.ndim != 2 or X.shape[1] != tree.d:
        raise DimensionMismatchError(
            f"descriptors must be (n, {tree.d}), got {X.shape}"
        )
    n = X.shape[0]
    cur = np.zeros(n, dtype=np.int32)
    while True:
        advanced = False
        for node in np.unique(cur):
            ch = tree.children[node]
            if len(ch) == 0:
                continue
            rows = np.flatnonzero(cur == node)
            D = pairwise_sq_dists(X[rows], tree.centers[ch])
            cur[rows] = ch[np.argmin(D, axis=1)]
            advanced = True
        if not advanced:
            break
    return tree.word_of_node[cur].astype(np.int64)


def quantize_image(tree: VocabularyTree, dset: DescriptorSet):
    """Sparse term counts (words, counts) for one image.

    The counts sum to the image's feature count; an empty image yields
    empty arrays.
    """
    if dset.descriptors.shape[0] == 0:
        return np.empty(0, np.int64), np.empty(0, np.uint32)
    words = quantize_descriptors(tree, dset.unit_descriptors())
    uniq, counts = np.unique(words, return_counts=True)
    return uniq, counts.astype(np.uint32)


def _weight_row(words, counts, n_d, idf):
    """Normalized TF-IDF weights for one image; degenerate if all zero."""
    raw = (counts.astype(np.float64) / n_d) * idf[words]
    norm = float(np.linalg.norm(raw))
    if norm == 0.0:
        return raw, True
    return raw / norm, False


def build_bow_database(tree: VocabularyTree, sets) -> BowDatabase:
    """Quantize all images, attach IDF statistics, fill the inverted file.

    Mutates ``tree``: document frequencies and the image count are
    stored on it so later queries can be weighted consistently.
    """
    if not sets:
        raise EmptyInputError("database needs at least one image")
    n_images = len(sets)
    quantized = []
    doc_freq = np.zeros(tree.n_words, dtype=np.int64)
    for dset in sets:
        words, counts = quantize_image(tree, dset)
        quantized.append((dset.image_id, words, counts))
        doc_freq[words] += 1

    tree.doc_freq = doc_freq
    tree.n_images = n_images
    idf = tree.idf()

    image_ids = np.array([i for i, _, _ in quantized], dtype=np.uint64)
    feature_counts = np.zeros(n_images, dtype=np.uint32)
    vectors = []
    post_rows: dict[int, list] = {}
    for row, (image_id, words, counts) in enumerate(quantized):
        n_d = int(counts.sum())
        feature_counts[row] = n_d
        if n_d == 0:
            vectors.append(BowVector(image_id, words, np.empty(0), True))
            continue
        weights, degenerate = _weight_row(words, counts, n_d, idf)
        vectors.append(BowVector(image_id, words, weights, degenerate))
        for w, c, t in zip(words.tolist(), counts.tolist(), weights.tolist()):
            post_rows.setdefault(w, []).append((row, c, t))

    entries = {}
    for w, items in post_rows.items():
        rows = np.array([r for r, _, _ in items], dtype=np.int32)
        counts = np.array([c for _, c, _ in items], dtype=np.uint32)
        weights = np.array([t for _, _, t in items], dtype=np.float64)
        order = np.argsort(image_ids[rows], kind="stable")
        entries[w] = (rows[order], counts[order], weights[order])

    inv = InvertedFile(image_ids=image_ids, entries=entries)
    return BowDatabase(tree, inv, vectors, feature_counts)


def make_query_vector(tree: VocabularyTree, dset: DescriptorSet) -> BowVector:
    """TF-IDF vector for a fresh image, weighted by the tree's IDF."""
    words, counts = quantize_image(tree, dset)
    if words.shape[0] == 0:
        return BowVector(dset.image_id, words, np.empty(0), True)
    weights, degenerate = _weight_row(
        words, counts, int(counts.sum()), tree.idf()
    )
    return BowVector(dset.image_id, words, weights, degenerate)


def bow_query(db: BowDatabase, query: BowVector, topk: int = 10):
    """Top images by cosine similarity, accumulated over shared words.

    Equivalent to ranking by dense dot product; ties break toward the
    lower image id.  Returns [(image_id, similarity)].
    """
    n = db.image_ids.shape[0]
    if n == 0:
        raise EmptyDatabaseError("cannot query an empty database")
    if topk < 1:
        raise ValueError("topk must be >= 1")
    scores = np.zeros(n, dtype=np.float64)
    for w, q_w in zip(query.words.tolist(), query.weights.tolist()):
        entry = db.inverted_file.entries.get(w)
        if entry is None or q_w == 0.0:
            continue
        rows, _, weights = entry
        scores[rows] += q_w * weights
    order = np.lexsort((db.image_ids, -scores))[:topk]
    return [(int(db.image_ids[i]), float(scores[i])) for i in order]


def dense_scores(db: BowDatabase, query: BowVector) -> np.ndarray:
    """Reference scoring path: dense dot against every stored vector."""
    V = db.tree.n_words
    q = query.to_dense(V)
    out = np.zeros(db.image_ids.shape[0], dtype=np.float64)
    for row, vec in enumerate(db.bow_vectors):
        out[row] = float(q @ vec.to_dense(V))
    return out


def save_vocabulary(tree: VocabularyTree, path) -> None:
    """Persist the tree (and document frequencies, if attached) as UVT1."""
    n_nodes = tree.centers.shape[0]
    parts = [
        _TREE_HEADER.pack(
            TREE_MAGIC, VERSION, tree.b, tree.L, tree.d,
            n_nodes, tree.n_words, tree.n_images,
        ),
        tree.centers.astype("<f4").tobytes(),
        tree.word_of_node.astype("<i4").tobytes(),
    ]
    for ch in tree.children:
        parts.append(struct.pack("<I", len(ch)))
        parts.append(ch.astype("<u4").tobytes())
    if tree.n_images > 0:
        parts.append(tree.doc_freq.astype("<u8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_vocabulary(path) -> VocabularyTree:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _TREE_HEADER.size:
        raise MalformedHeaderError(f"{path}: file shorter than UVT1 header")
    magic, version, b, L, d, n_nodes, V, n_images = _TREE_HEADER.unpack_from(blob)
    if magic != TREE_MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise MalformedHeaderError(f"{path}: unsupported version {version}")
    off = _TREE_HEADER.size

    def take(count, dtype):
        nonlocal off
        width = np.dtype(dtype).itemsize * count
        if off + width > len(blob):
            raise TruncatedFileError(f"{path}: payload cut short")
        out = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
        off += width
        return out

    centers = take(n_nodes * d, "<f4").reshape(n_nodes, d).copy()
    word_of_node = take(n_nodes, "<i4").astype(np.int32)
    children = []
    for _ in range(n_nodes):
        if off + 4 > len(blob):
            _raise_trunc(path)
        (k,) = struct.unpack_from("<I", blob, off)
        off += 4
        children.append(take(k, "<u4").astype(np.int32))
    doc_freq = take(V, "<u8").astype(np.int64) if n_images > 0 else None
    leaf_nodes = np.flatnonzero(word_of_node >= 0).astype(np.int32)
    leaf_nodes = leaf_nodes[np.argsort(word_of_node[leaf_nodes])]
    return VocabularyTree(
        b=b, L=L, centers=centers, children=children,
        word_of_node=word_of_node, leaf_nodes=leaf_nodes,
        doc_freq=doc_freq, n_images=n_images,
    )


def _raise_trunc(path):
    raise TruncatedFileError(f"{path}: payload cut short")


def save_bow_database(db: BowDatabase, path) -> None:
    """Inverted-file dump plus sparse weight rows (UVB1)."""
    n = db.image_ids.shape[0]
    parts = [
        _DB_HEADER.pack(DB_MAGIC, VERSION, n, db.tree.n_words),
        db.image_ids.astype("<u8").tobytes(),
        db.feature_counts.astype("<u4").tobytes(),
        struct.pack("<Q", len(db.inverted_file.entries)),
    ]
    for w in sorted(db.inverted_file.entries):
        rows, counts, weights = db.inverted_file.entries[w]
        parts.append(struct.pack("<QI", w, len(rows)))
        parts.append(rows.astype("<i4").tobytes())
        parts.append(counts.astype("<u4").tobytes())
        parts.append(weights.astype("<f8").tobytes())
    for vec in db.bow_vectors:
        parts.append(struct.pack("<QI?", vec.image_id, len(vec.words),
                                 vec.degenerate))
        parts.append(vec.words.astype("<i8").tobytes())
        parts.append(vec.weights.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_bow_database(path, tree: VocabularyTree) -> BowDatabase:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _DB_HEADER.size:
        raise MalformedHeaderError(f"{path}: file shorter than UVB1 header")
    magic, version, n, V = _DB_HEADER.unpack_from(blob)
    if magic != DB_MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise MalformedHeaderError(f"{path}: unsupported version {version}")
    if V != tree.n_words:
        raise DimensionMismatchError(
            f"{path}: word count {V} != tree vocabulary {tree.n_words}"
        )
    off = _DB_HEADER.size

    def take(count, dtype):
        nonlocal off
        width = np.dtype(dtype).itemsize * count
        if off + width > len(blob):
            raise TruncatedFileError(f"{path}: payload cut short")
        out = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
        off += width
        return out

    image_ids = take(n, "<u8").astype(np.uint64)
    feature_counts = take(n, "<u4").astype(np.uint32)
    (n_entries,) = struct.unpack_from("<Q", blob, off)
    off += 8
    entries = {}
    for _ in range(n_entries):
        if off + 12 > len(blob):
            _raise_trunc(path)
        w, m = struct.unpack_from("<QI", blob, off)
        off += 12
        rows = take(m, "<i4").astype(np.int32)
        counts = take(m, "<u4").astype(np.uint32)
        weights = take(m, "<f8").astype(np.float64)
        entries[int(w)] = (rows, counts, weights)
    vectors = []
    for _ in range(n):
        if off + 13 > len(blob):
            _raise_trunc(path)
        image_id, m, degenerate = struct.unpack_from("<QI?", blob, off)
        off += 13
        words = take(m, "<i8").astype(np.int64)
        weights = take(m, "<f8").astype(np.float64)
        vectors.append(BowVector(image_id, words, weights, bool(degenerate)))
    inv = InvertedFile(image_ids=image_ids, entries=entries)
    return BowDatabase(tree, inv, vectors, feature_counts)
