"""Sequential pipeline: descriptors in, scene clusters out.

Eight stages run in order: sample, train, aggregate, index, retrieve,
verify, graph, partition.  Each stage reads only the artifacts
of earlier stages from the output directory and writing its own.  A
``manifest.json`` records the config, its hash, and per-stage wall
time plus sha256 checksums of every artifact, so a rerun with the
same config and seed can be verified byte-for-byte (the manifest
itself carries timings and is exempt).

A stage failure raises :class:`StageError` naming the stage; artifacts
already written stay on disk and the manifest records the failure.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np

from .codebook import load_codebook, save_codebook, sample_training_descriptors, train_codebook
from .config import PipelineConfig
from .descriptors import load_descriptor_set
from .exceptions import StageError
from .hnsw import build_index, load_index, save_index
from .partition import partition_view_graph, save_partition
from .retrieval import retrieve_all_pairs, save_pairs, save_retrieval_summary
from .verification import load_matches, save_matches, verify_pairs
from .viewgraph import build_view_graph, load_view_graph, save_view_graph
from .vlad import VladDescriptor, batch_aggregate, load_vlad_matrix, save_vlad_matrix

logger = logging.getLogger(__name__)

DESCRIPTOR_SUFFIX = ".uvd"

ARTIFACTS = {
    "sample": ("sample.npy",),
    "train": ("codebook.uvc", "codebook.uvc.meta"),
    "aggregate": ("vlads.uvl",),
    "index": ("index.uvh",),
    "retrieve": ("pairs.txt", "retrieval.json"),
    "verify": ("matches.uvm", "verify.json"),
    "graph": ("graph.txt", "graph.json"),
    "partition": ("clusters.txt", "clusters.json"),
}

STAGES = tuple(ARTIFACTS)


def _out(cfg: PipelineConfig, name: str) -> Path:
    return Path(cfg.output_dir) / name


def descriptor_paths(input_dir) -> list:
    root = Path(input_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"descriptor directory not found: {root}")
    paths = sorted(root.glob(f"*{DESCRIPTOR_SUFFIX}"))
    if not paths:
        raise FileNotFoundError(f"no *{DESCRIPTOR_SUFFIX} files in {root}")
    return paths


def load_all_descriptors(input_dir) -> list:
    return [load_descriptor_set(p) for p in descriptor_paths(input_dir)]


def vlads_from_matrix(path) -> list:
    """Rebuild VladDescriptor objects from a stored UVL1 matrix."""
    ids, matrix, k, d = load_vlad_matrix(path)
    out = []
    for image_id, vec in zip(ids.tolist(), matrix):
        norm = float(np.linalg.norm(vec))
        out.append(
            VladDescriptor(
                image_id=int(image_id), vector=vec, k=k, d=d,
                degenerate=norm == 0.0,
            )
        )
    return out


# ---------------------------------------------------------------------------
# stages: each reads prior artifacts from disk and writes its own


def stage_sample(cfg: PipelineConfig) -> None:
    sets = load_all_descriptors(cfg.input_dir)
    pool = sample_training_descriptors(sets, cfg.sampling_config())
    np.save(_out(cfg, "sample.npy"), pool)


def stage_train(cfg: PipelineConfig) -> None:
    pool = np.load(_out(cfg, "sample.npy"))
    codebook = train_codebook(
        pool, cfg.codebook_k, max_iters=cfg.kmeans_max_iters,
        tol=cfg.kmeans_tol, seed=cfg.codebook_seed(),
    )
    save_codebook(codebook, _out(cfg, "codebook.uvc"))


def stage_aggregate(cfg: PipelineConfig) -> None:
    sets = load_all_descriptors(cfg.input_dir)
    codebook = load_codebook(_out(cfg, "codebook.uvc"))
    vlads = batch_aggregate(sets, codebook, n_jobs=cfg.threads)
    save_vlad_matrix(vlads, _out(cfg, "vlads.uvl"))


def stage_index(cfg: PipelineConfig) -> None:
    vlads = vlads_from_matrix(_out(cfg, "vlads.uvl"))
    index = build_index(vlads, cfg.hnsw_params())
    save_index(index, _out(cfg, "index.uvh"), _out(cfg, "vlads.uvl"))


def stage_retrieve(cfg: PipelineConfig) -> None:
    index = load_index(_out(cfg, "index.uvh"), _out(cfg, "vlads.uvl"))
    vlads = vlads_from_matrix(_out(cfg, "vlads.uvl"))
    candidates, summaries = retrieve_all_pairs(index, vlads, cfg.retrieval_config())
    save_pairs(candidates, _out(cfg, "pairs.txt"))
    save_retrieval_summary(summaries, _out(cfg, "retrieval.json"))


def stage_verify(cfg: PipelineConfig) -> None:
    from .retrieval import load_pairs

    pairs = load_pairs(_out(cfg, "pairs.txt"))
    sets = load_all_descriptors(cfg.input_dir)
    verified, notes = verify_pairs(
        [(i, j) for i, j, _ in pairs], sets, cfg.verification_config()
    )
    save_matches(verified, _out(cfg, "matches.uvm"))
    with open(_out(cfg, "verify.json"), "w", encoding="utf-8") as fh:
        json.dump(
            {"n_candidates": len(pairs), "n_verified": len(verified),
             "notes": notes},
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")


def stage_graph(cfg: PipelineConfig) -> None:
    pairs = load_matches(_out(cfg, "matches.uvm"))
    sets = load_all_descriptors(cfg.input_dir)
    graph = build_view_graph(pairs, sets, r_ew=cfg.r_ew)
    save_view_graph(graph, _out(cfg, "graph.txt"), _out(cfg, "graph.json"))


def stage_partition(cfg: PipelineConfig) -> None:
    graph = load_view_graph(_out(cfg, "graph.txt"), _out(cfg, "graph.json"))
    result = partition_view_graph(
        graph, max_size=cfg.max_cluster_size,
        seed=cfg.seed,
    )
    save_partition(result, _out(cfg, "clusters.txt"), _out(cfg, "clusters.json"))


_STAGE_FN = {
    "sample": stage_sample,
    "train": stage_train,
    "aggregate": stage_aggregate,
    "index": stage_index,
    "retrieve": stage_retrieve,
    "verify": stage_verify,
    "graph": stage_graph,
    "partition": stage_partition,
}


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def run_stage(name: str, cfg: PipelineConfig) -> dict:
    """Execute one stage; returns its manifest entry."""
    if name not in _STAGE_FN:
        raise ValueError(f"unknown stage {name!r}")
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    index = STAGES.index(name)
    try:
        _STAGE_FN[name](cfg)
    except Exception as exc:
        raise StageError(name, str(exc), index=index) from exc
    entry = {
        "name": name,
        "seconds": time.perf_counter() - started,
        "artifacts": {
            art: sha256_file(_out(cfg, art)) for art in ARTIFACTS[name]
        },
    }
    logger.info("stage %d (%s) done in %.2fs", index, name, entry["seconds"])
    return entry


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Run all eight stages and write ``manifest.json``.

    Returns the manifest dict.  On a stage failure the manifest (with
    the failure recorded) is still written, artifacts of completed
    stages are left in place, and :class:`StageError` propagates.
    """
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "stages": [],
    }
    try:
        for name in STAGES:
            manifest["stages"].append(run_stage(name, cfg))
    except StageError as exc:
        manifest["error"] = str(exc)
        _write_manifest(cfg, manifest)
        raise
    _write_manifest(cfg, manifest)
    return manifest


def _write_manifest(cfg: PipelineConfig, manifest: dict) -> None:
    with open(_out(cfg, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
