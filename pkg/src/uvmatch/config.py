"""Run configuration: one flat record driving every stage.

Config files are plain ``key=value`` text, with blank lines and ``#``
comments allowed, and command-line flags override file values.  All
randomness in a run flows from the single ``seed`` field; each stage
derives its own substream via :func:`uvmatch.seeding.derive_seed`.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

from .codebook import SamplingConfig
from .exceptions import InvalidConfigError
from .hnsw import HnswParams
from .retrieval import RetrievalConfig
from .seeding import derive_seed
from .verification import VerificationConfig


@dataclass
class PipelineConfig:
    """Everything a pipeline or benchmark run needs.

    Defaults follow the recommended operating point: a 256-word
    codebook trained on a 20% image sample capped at 1,500 features
    per image, HNSW at M=32 / ef_construction=200, 300 retrieval
    samples, a 0.8 ratio test with a 1.0 px epipolar gate and a
    >15-inlier acceptance rule, equal edge-weight mixing, and a
    500-image cluster cap.
    """

    input_dir: str = "data"
    output_dir: str = "out"
    seed: int = 0
    threads: int = 1

    codebook_k: int = 256
    sample_p: float = 0.20
    sample_h: int = 1500
    kmeans_max_iters: int = 50
    kmeans_tol: float = 1e-4

    hnsw_m: int = 32
    hnsw_m0: int | None = None
    ef_construction: int = 200
    ef_search: int | None = None

    sample_count: int = 300
    kappa: float = 0.4
    min_select: int = 5
    max_select: int | None = None

    ratio: float = 0.8
    max_error_px: float = 1.0
    ransac_confidence: float = 0.999
    ransac_max_iters: int = 10_000
    min_inliers: int = 15

    r_ew: float = 0.5
    max_cluster_size: int = 500

    def __post_init__(self):
        if self.threads < 1:
            raise InvalidConfigError("threads must be >= 1")
        if self.codebook_k < 1:
            raise InvalidConfigError("codebook_k must be >= 1")
        if not 0.0 < self.sample_p <= 1.0:
            raise InvalidConfigError("sample_p must be in (0, 1]")
        if not 0.0 <= self.r_ew <= 1.0:
            raise InvalidConfigError("r_ew must be in [0, 1]")
        if self.max_cluster_size < 1:
            raise InvalidConfigError("max_cluster_size must be >= 1")

    # -- stage views --------------------------------------------------

    def sampling_config(self) -> SamplingConfig:
        return SamplingConfig(
            p=self.sample_p, h=self.sample_h,
            seed=derive_seed(self.seed, "sample"),
        )

    def hnsw_params(self) -> HnswParams:
        return HnswParams(
            M=self.hnsw_m, M0=self.hnsw_m0,
            ef_construction=self.ef_construction, ef_search=self.ef_search,
            seed=derive_seed(self.seed, "hnsw"),
        )

    def retrieval_config(self) -> RetrievalConfig:
        return RetrievalConfig(
            sample_count=self.sample_count, kappa=self.kappa,
            min_select=self.min_select, max_select=self.max_select,
            ef_search=self.ef_search,
        )

    def verification_config(self) -> VerificationConfig:
        return VerificationConfig(
            ratio=self.ratio, max_error_px=self.max_error_px,
            confidence=self.ransac_confidence,
            max_iters=self.ransac_max_iters,
            min_inliers=self.min_inliers, seed=self.seed,
        )

    def codebook_seed(self) -> int:
        return derive_seed(self.seed, "codebook")

    # -- (de)serialization --------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """sha256 of the canonical JSON rendering, for the manifest."""
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for key, value in sorted(self.to_dict().items()):
                fh.write(f"{key}={'' if value is None else value}\n")


_FIELDS = {f.name: f for f in dataclasses.fields(PipelineConfig)}
_OPTIONAL_INT = {"hnsw_m0", "ef_search", "max_select"}


def _coerce(key: str, raw):
    """Parse one raw value (usually a string) to its field's type."""
    if key not in _FIELDS:
        raise InvalidConfigError(f"unknown config key {key!r}")
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if key in _OPTIONAL_INT:
        if text.lower() in ("", "none"):
            return None
        return int(text)
    typ = _FIELDS[key].type
    try:
        if typ == "int":
            return int(text)
        if typ == "float":
            return float(text)
    except ValueError as exc:
        raise InvalidConfigError(f"bad value for {key!r}: {text!r}") from exc
    return text


def parse_config_file(path) -> dict:
    """Read ``key=value`` lines into a raw string dict."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise InvalidConfigError(
                    f"{path}:{line_no}: expected key=value, got {stripped!r}"
                )
            key, _, value = stripped.partition("=")
            values[key.strip()] = value.strip()
    return values


def build_config(file_values: dict | None = None,
                 overrides: dict | None = None) -> PipelineConfig:
    """Merge config-file values with flag overrides; overrides win."""
    merged = {}
    for source in (file_values or {}, overrides or {}):
        for key, raw in source.items():
            if raw is None:
                continue
            merged[key] = _coerce(key, raw)
    return PipelineConfig(**merged)


def load_config(path, overrides: dict | None = None) -> PipelineConfig:
    return build_config(parse_config_file(path), overrides)
