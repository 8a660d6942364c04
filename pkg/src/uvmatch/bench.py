"""Benchmark harness: VLAD+HNSW against brute force and the BoW tree.

Every method answers the same task (for each image, return the
``depth`` most similar other images) and is scored with the same
protocol: candidate pairs are the deduplicated union over queries,
compared against ground-truth overlap pairs when available.  Timings
are wall clock, split into codebook/vocabulary training, aggregation,
index build, and querying.  VLAD preprocessing is shared between the
two vlad methods (they rank with the same vectors), so their training
and aggregation figures are identical by construction.

The report is written as JSON plus a flat CSV for plotting.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bow import bow_query, build_bow_database, train_vocabulary
from .codebook import sample_training_descriptors, train_codebook
from .config import PipelineConfig
from .exceptions import UnknownMethodError
from .hnsw import brute_force_knn, build_index
from .pipeline import load_all_descriptors
from .seeding import derive_seed
from .vlad import batch_aggregate

KNOWN_METHODS = ("vlad_hnsw", "vlad_brute", "bow")
DEFAULT_DEPTH = 30


@dataclass
class MethodResult:
    method: str
    codebook_s: float = 0.0
    aggregate_s: float = 0.0
    build_s: float = 0.0
    query_s: float = 0.0
    n_queries: int = 0
    precision: float | None = None
    recall: float | None = None
    recall_vs_brute: float | None = None
    vocab_words: int | None = None

    @property
    def query_ms(self) -> float:
        if self.n_queries == 0:
            return 0.0
        return 1000.0 * self.query_s / self.n_queries

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "codebook_s": self.codebook_s,
            "aggregate_s": self.aggregate_s,
            "build_s": self.build_s,
            "query_s": self.query_s,
            "query_ms_per_query": self.query_ms,
            "n_queries": self.n_queries,
            "precision": self.precision,
            "recall": self.recall,
            "recall_vs_brute": self.recall_vs_brute,
            "vocab_words": self.vocab_words,
        }


@dataclass
class BenchmarkReport:
    n_images: int
    depth: int
    config_hash: str
    methods: dict = field(default_factory=dict)   # name -> MethodResult
    speedups: dict = field(default_factory=dict)  # "a_vs_b" -> query ratio

    def to_dict(self) -> dict:
        return {
            "n_images": self.n_images,
            "depth": self.depth,
            "config_hash": self.config_hash,
            "methods": {k: v.to_dict() for k, v in self.methods.items()},
            "speedups": self.speedups,
        }


def load_ground_truth_pairs(input_dir):
    """Overlap pairs from ``ground_truth.json``, or None if absent."""
    path = Path(input_dir) / "ground_truth.json"
    if not path.is_file():
        return None
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    return {(min(i, j), max(i, j)) for i, j in data["pairs"]}


def _pair_metrics(per_query_hits, gt_pairs):
    pairs = set()
    for qid, ids in per_query_hits.items():
        for other in ids:
            if other != qid:
                pairs.add((min(qid, other), max(qid, other)))
    if gt_pairs is None or not pairs:
        return None, None
    hit = len(pairs & gt_pairs)
    return hit / len(pairs), hit / len(gt_pairs)


def run_benchmark(cfg: PipelineConfig, methods, depth: int = DEFAULT_DEPTH,
                  bow_branching: int = 10, bow_depth: int = 4,
                  sets=None, gt_pairs=None) -> BenchmarkReport:
    """Time and score the requested methods on one dataset.

    ``methods`` must be a non-empty subset of
    ``{"vlad_hnsw", "vlad_brute", "bow"}``; anything else raises
    :class:`UnknownMethodError`.  Descriptor sets and ground truth are
    loaded from ``cfg.input_dir`` unless passed in.
    """
    methods = list(methods)
    if not methods:
        raise UnknownMethodError("no benchmark methods requested")
    unknown = [m for m in methods if m not in KNOWN_METHODS]
    if unknown:
        raise UnknownMethodError(
            f"unknown methods {unknown}; choose from {list(KNOWN_METHODS)}"
        )
    if sets is None:
        sets = load_all_descriptors(cfg.input_dir)
    if gt_pairs is None:
        gt_pairs = load_ground_truth_pairs(cfg.input_dir)

    report = BenchmarkReport(
        n_images=len(sets), depth=depth, config_hash=cfg.config_hash()
    )

    vlad_methods = [m for m in methods if m.startswith("vlad_")]
    results = {m: MethodResult(m) for m in methods}
    hits_by_method = {}

    if vlad_methods:
        t0 = time.perf_counter()
        pool = sample_training_descriptors(sets, cfg.sampling_config())
        codebook = train_codebook(
            pool, cfg.codebook_k, max_iters=cfg.kmeans_max_iters,
            tol=cfg.kmeans_tol, seed=cfg.codebook_seed(),
        )
        t_codebook = time.perf_counter() - t0
        t0 = time.perf_counter()
        vlads = batch_aggregate(sets, codebook, n_jobs=cfg.threads)
        t_aggregate = time.perf_counter() - t0
        queries = [v for v in vlads if not v.degenerate]
        for m in vlad_methods:
            results[m].codebook_s = t_codebook
            results[m].aggregate_s = t_aggregate

    if "vlad_hnsw" in methods:
        res = results["vlad_hnsw"]
        t0 = time.perf_counter()
        index = build_index(vlads, cfg.hnsw_params())
        res.build_s = time.perf_counter() - t0
        ef = max(depth + 1, cfg.ef_search or 0)
        hits = {}
        t0 = time.perf_counter()
        for v in queries:
            found = index.knn_search(v.vector, depth + 1, ef_search=ef)
            hits[v.image_id] = [i for i, _ in found if i != v.image_id][:depth]
        res.query_s = time.perf_counter() - t0
        res.n_queries = len(queries)
        hits_by_method["vlad_hnsw"] = hits

    if "vlad_brute" in methods:
        res = results["vlad_brute"]
        matrix = np.stack([v.vector for v in vlads])
        ids = np.array([v.image_id for v in vlads], dtype=np.uint64)
        hits = {}
        t0 = time.perf_counter()
        for v in queries:
            found = brute_force_knn(matrix, v.vector, depth + 1, image_ids=ids)
            hits[v.image_id] = [i for i, _ in found if i != v.image_id][:depth]
        res.query_s = time.perf_counter() - t0
        res.n_queries = len(queries)
        hits_by_method["vlad_brute"] = hits

    if "bow" in methods:
        res = results["bow"]
        t0 = time.perf_counter()
        bow_pool = sample_training_descriptors(sets, cfg.sampling_config())
        tree = train_vocabulary(
            bow_pool, b=bow_branching, L=bow_depth,
            seed=derive_seed(cfg.seed, "bow"),
        )
        res.codebook_s = time.perf_counter() - t0
        res.vocab_words = tree.n_words
        t0 = time.perf_counter()
        db = build_bow_database(tree, sets)
        res.aggregate_s = time.perf_counter() - t0
        bow_queries = [v for v in db.bow_vectors if not v.degenerate]
        hits = {}
        t0 = time.perf_counter()
        for v in bow_queries:
            found = bow_query(db, v, topk=depth + 1)
            hits[v.image_id] = [i for i, _ in found if i != v.image_id][:depth]
        res.query_s = time.perf_counter() - t0
        res.n_queries = len(bow_queries)
        hits_by_method["bow"] = hits

    for m, hits in hits_by_method.items():
        precision, recall = _pair_metrics(hits, gt_pairs)
        results[m].precision = precision
        results[m].recall = recall

    if "vlad_hnsw" in hits_by_method and "vlad_brute" in hits_by_method:
        approx = hits_by_method["vlad_hnsw"]
        exact = hits_by_method["vlad_brute"]
        fractions = [
            len(set(approx[q]) & set(exact[q])) / max(1, len(exact[q]))
            for q in exact
        ]
        results["vlad_hnsw"].recall_vs_brute = float(np.mean(fractions))
        results["vlad_brute"].recall_vs_brute = 1.0

    for m in methods:
        report.methods[m] = results[m]
    base = results.get("vlad_hnsw")
    if base and base.query_s > 0:
        for m in methods:
            if m != "vlad_hnsw":
                report.speedups[f"{m}_vs_vlad_hnsw"] = (
                    results[m].query_s / base.query_s
                )
    return report


def save_benchmark_report(report: BenchmarkReport, json_path, csv_path) -> None:
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    columns = [
        "method", "codebook_s", "aggregate_s", "build_s", "query_s",
        "query_ms_per_query", "n_queries", "precision", "recall",
        "recall_vs_brute", "vocab_words",
    ]
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for name in sorted(report.methods):
            writer.writerow(report.methods[name].to_dict())
