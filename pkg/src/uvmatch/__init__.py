"""uvmatch: match pair retrieval for large unordered image collections.

Local descriptors are aggregated into VLAD global vectors, indexed in
an HNSW graph, adaptively thresholded into candidate pairs, verified
epipolar-geometrically, and assembled into a weighted view graph that
is partitioned by recursive normalized cut.
"""

__version__ = "0.1.0"

from .bow import (
    BowDatabase,
    BowVector,
    VocabularyTree,
    bow_query,
    build_bow_database,
    quantize_image,
    tfidf_weight,
    train_vocabulary,
)
from .codebook import (
    Codebook,
    CodebookKMeans,
    SamplingConfig,
    assign_to_centers,
    load_codebook,
    sample_training_descriptors,
    save_codebook,
    train_codebook,
)
from .config import PipelineConfig, build_config, load_config, parse_config_file
from .descriptors import (
    DescriptorSet,
    load_descriptor_set,
    save_descriptor_set,
)
from .hnsw import (
    HnswIndex,
    HnswParams,
    brute_force_knn,
    build_index,
    load_index,
    save_index,
)
from .partition import (
    PartitionResult,
    normalized_cut_bisect,
    partition_view_graph,
    save_partition,
)
from .retrieval import (
    MatchPairCandidateSet,
    RetrievalConfig,
    fit_power_curve,
    normalize_similarities,
    retrieve_all_pairs,
    select_pairs,
)
from .seeding import derive_seed, rng_for
from .synthetic import SyntheticConfig, SyntheticGroundTruth, generate_synthetic_dataset
from .verification import (
    FeatureMatch,
    VerificationConfig,
    VerifiedPair,
    eight_point,
    estimate_fundamental_ransac,
    match_descriptors,
    verify_pairs,
)
from .viewgraph import ViewGraph, build_view_graph, convex_hull, edge_weight
from .vlad import VladDescriptor, VladEncoder, aggregate_vlad, batch_aggregate

__all__ = [
    "BowDatabase",
    "BowVector",
    "Codebook",
    "CodebookKMeans",
    "DescriptorSet",
    "FeatureMatch",
    "HnswIndex",
    "HnswParams",
    "MatchPairCandidateSet",
    "PartitionResult",
    "PipelineConfig",
    "RetrievalConfig",
    "SamplingConfig",
    "SyntheticConfig",
    "SyntheticGroundTruth",
    "VerificationConfig",
    "VerifiedPair",
    "ViewGraph",
    "VladDescriptor",
    "VladEncoder",
    "VocabularyTree",
    "aggregate_vlad",
    "assign_to_centers",
    "batch_aggregate",
    "bow_query",
    "brute_force_knn",
    "build_bow_database",
    "build_config",
    "build_index",
    "build_view_graph",
    "convex_hull",
    "derive_seed",
    "edge_weight",
    "eight_point",
    "estimate_fundamental_ransac",
    "fit_power_curve",
    "generate_synthetic_dataset",
    "load_codebook",
    "load_config",
    "load_descriptor_set",
    "load_index",
    "match_descriptors",
    "normalize_similarities",
    "normalized_cut_bisect",
    "parse_config_file",
    "partition_view_graph",
    "quantize_image",
    "retrieve_all_pairs",
    "rng_for",
    "sample_training_descriptors",
    "save_codebook",
    "save_descriptor_set",
    "save_index",
    "save_partition",
    "select_pairs",
    "tfidf_weight",
    "train_codebook",
    "train_vocabulary",
    "verify_pairs",
    "__version__",
]
