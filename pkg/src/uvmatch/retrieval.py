"""Adaptive match-pair retrieval from nearest-neighbor lists.

Raw kNN distances are mapped to similarities by inverse linear
normalization

    s_i = (d_max - d_i) / (d_max - d_min)

so the nearest candidate scores 1 and the farthest 0.  The score decay
over rank x (1-based, similarity-sorted) is modeled as a power law
y = a * x^b via least squares in log-log space, and candidates above
the separation line t = mu + kappa * delta are selected, where mu and
delta are the mean and standard deviation of the sampled similarity
values.  Selection is clamped to a configurable minimum and maximum
per query, and per-query selections merge into one canonical pair set.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    DegenerateScoresError,
    EmptyInputError,
    InsufficientSamplesError,
)

logger = logging.getLogger(__name__)

SCORE_EPS = 1e-6
MIN_FIT_SAMPLES = 8


@dataclass(frozen=True)
class SimilarityList:
    """Ordered candidates of one query with normalized similarities."""

    query_id: int
    image_ids: np.ndarray     # (m,) uint64, nearest first
    distances: np.ndarray     # (m,) float64, non-decreasing
    similarities: np.ndarray  # (m,) float64, non-increasing, in [0, 1]
    degenerate: bool = False

    @property
    def m(self) -> int:
        return int(self.image_ids.shape[0])

    @property
    def d_min(self) -> float:
        return float(self.distances[0])

    @property
    def d_max(self) -> float:
        return float(self.distances[-1])


@dataclass(frozen=True)
class PowerFit:
    """Least-squares power-law fit y = a * x^b over ranked similarities."""

    a: float
    b: float
    mu: float
    delta: float
    n_samples: int

    def predict(self, x) -> np.ndarray:
        return self.a * np.asarray(x, dtype=np.float64) ** self.b


@dataclass
class MatchPairCandidateSet:
    """Canonical (i < j) pairs with the best similarity seen per pair."""

    pairs: dict = field(default_factory=dict)        # (i, j) -> similarity
    provenance: dict = field(default_factory=dict)   # (i, j) -> [query ids]

    def add(self, query_id: int, other_id: int, similarity: float) -> None:
        if query_id == other_id:
            return
        key = (min(query_id, other_id), max(query_id, other_id))
        if key not in self.pairs or similarity > self.pairs[key]:
            self.pairs[key] = float(similarity)
        self.provenance.setdefault(key, []).append(query_id)

    def __len__(self) -> int:
        return len(self.pairs)

    def __contains__(self, key) -> bool:
        i, j = key
        return (min(i, j), max(i, j)) in self.pairs

    def sorted_pairs(self):
        """[(i, j, similarity)] sorted by (i, j)."""
        return [(i, j, self.pairs[(i, j)]) for i, j in sorted(self.pairs)]


def normalize_similarities(candidates, query_id: int = 0) -> SimilarityList:
    """Inverse linear normalization of an ordered (id, distance) list.

    Equal minimum and maximum distances make every similarity 1.0 and
    flag the list degenerate.
    """
    if len(candidates) == 0:
        raise EmptyInputError("cannot normalize an empty candidate list")
    image_ids = np.array([i for i, _ in candidates], dtype=np.uint64)
    d = np.array([dist for _, dist in candidates], dtype=np.float64)
    if np.any(np.diff(d) < 0):
        raise ValueError("candidate distances must be non-decreasing")
    d_min, d_max = float(d[0]), float(d[-1])
    if d_max == d_min:
        s = np.ones_like(d)
        return SimilarityList(query_id, image_ids, d, s, degenerate=True)
    s = (d_max - d) / (d_max - d_min)
    return SimilarityList(query_id, image_ids, d, s)


def fit_power_curve(sim: SimilarityList, sample_count: int = 300) -> PowerFit:
    """Fit y = a * x^b over the top min(m, sample_count) ranks.

    x is the 1-based rank; values at or below 1e-6 are excluded (their
    log is unusable), which trims a suffix since similarities are
    non-increasing.  mu and delta summarize the surviving sample's raw
    similarity values.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    s = sim.similarities[: min(sim.m, sample_count)]
    if s.size and float(s.max()) == float(s.min()):
        raise DegenerateScoresError(
            f"query {sim.query_id}: all sampled similarities equal"
        )
    pos = s > SCORE_EPS
    y = s[pos]
    if y.size < MIN_FIT_SAMPLES:
        raise InsufficientSamplesError(
            f"query {sim.query_id}: {y.size} usable similarities, "
            f"need {MIN_FIT_SAMPLES}"
        )
    x = np.arange(1, s.size + 1, dtype=np.float64)[pos]
    lx, ly = np.log(x), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    return PowerFit(
        a=float(math.exp(intercept)),
        b=float(slope),
        mu=float(y.mean()),
        delta=float(y.std()),
        n_samples=int(y.size),
    )


def select_pairs(
    sim: SimilarityList,
    fit: PowerFit,
    kappa: float = 0.4,
    min_select: int = 5,
    max_select: int = 300,
):
    """Candidates above the separation line t = mu + kappa * delta.

    Similarities are non-increasing, so the selection is a prefix; its
    length is clamped into [min_select, max_select] (and to the list
    length).  Returns [(image_id, similarity)].
    """
    t = fit.mu + kappa * fit.delta
    count = int(np.sum(sim.similarities > t))
    low = min(min_select, sim.m)
    high = min(max_select, sim.m)
    count = max(low, min(count, high))
    return [
        (int(sim.image_ids[i]), float(sim.similarities[i]))
        for i in range(count)
    ]


@dataclass(frozen=True)
class RetrievalConfig:
    sample_count: int = 300
    kappa: float = 0.4
    min_select: int = 5
    max_select: int | None = None     # defaults to sample_count
    ef_search: int | None = None      # defaults to the retrieval depth

    def resolved_max_select(self) -> int:
        return self.sample_count if self.max_select is None else self.max_select


def retrieve_all_pairs(index, vlads, cfg: RetrievalConfig = RetrievalConfig()):
    """Query every image against the index and merge selected pairs.

    Per query: fetch sample_count + 1 neighbors (the self-hit is
    dropped), normalize, fit the power curve, select above the line.
    Queries whose score profile defeats the fit (too few usable values,
    or all equal) fall back to the minimum selection of nearest
    candidates.  Degenerate (all-zero) vectors are skipped.

    Returns (MatchPairCandidateSet, per-query summary list).
    """
    candidates = MatchPairCandidateSet()
    summaries = []
    depth = cfg.sample_count + 1
    ef = max(depth, cfg.ef_search or 0)
    max_select = cfg.resolved_max_select()
    for v in vlads:
        if v.degenerate:
            logger.warning("skipping degenerate query image %d", v.image_id)
            continue
        hits = index.knn_search(v.vector, depth, ef_search=ef)
        hits = [(i, d) for i, d in hits if i != v.image_id]
        if not hits:
            continue
        sim = normalize_similarities(hits, query_id=v.image_id)
        entry = {"query_id": int(v.image_id), "m": sim.m}
        try:
            fit = fit_power_curve(sim, cfg.sample_count)
            selected = select_pairs(
                sim, fit, cfg.kappa, cfg.min_select, max_select
            )
            entry.update(
                a=fit.a, b=fit.b, mu=fit.mu, delta=fit.delta,
                threshold=fit.mu + cfg.kappa * fit.delta,
                n_fit_samples=fit.n_samples, fallback=False,
            )
        except (DegenerateScoresError, InsufficientSamplesError) as exc:
            n = min(cfg.min_select, sim.m)
            selected = [
                (int(sim.image_ids[i]), float(sim.similarities[i]))
                for i in range(n)
            ]
            entry.update(fallback=True, reason=str(exc))
            logger.debug("query %d: fit fallback (%s)", v.image_id, exc)
        entry["selected"] = len(selected)
        summaries.append(entry)
        for other_id, s in selected:
            candidates.add(v.image_id, other_id, s)
    return candidates, summaries


def save_pairs(candidates: MatchPairCandidateSet, path) -> None:
    """One line per pair: `<i> <j> <similarity>` sorted by (i, j)."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, j, s in candidates.sorted_pairs():
            fh.write(f"{i} {j} {s:.9f}\n")


def load_pairs(path):
    """Read a pair list written by save_pairs: [(i, j, similarity)]."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{line_no}: expected 'i j similarity'")
            out.append((int(parts[0]), int(parts[1]), float(parts[2])))
    return out


def save_retrieval_summary(summaries, path) -> None:
    """Per-query fit parameters as JSON (for score-decay plots)."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"queries": summaries}, fh, indent=2, sort_keys=True)
        fh.write("\n")
