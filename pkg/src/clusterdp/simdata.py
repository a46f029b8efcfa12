"""Synthetic population generators, quantization, and CSV ingestion.

Two generators: a Gaussian mixture whose cluster dependence is a single knob
(variance is held fixed as the knob moves), and a planted-partition community
graph whose per-cluster structural features drive the outcomes. Both emit
integer-grid or binned outcome spaces suitable for the randomized-response
mechanisms.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .model import (
    OutcomeSpace,
    PopulationDataset,
    UnitRecord,
    ValidationError,
    validate_population,
)
from .rng import RngStreams, standard_normal

__all__ = [
    "GmmConfig",
    "GraphPopConfig",
    "quantize",
    "gen_gmm",
    "gen_graph_population",
    "ingest_csv",
    "ingest_observed_csv",
    "write_population_csv",
    "subsample",
]


@dataclass(frozen=True)
class GmmConfig:
    """Gaussian-mixture population: y' = sqrt(beta) mu_c + sqrt(v - beta) w_i.

    ``beta`` in [0, v] moves response mass from unit noise to the cluster
    center while keeping Var(y') = v fixed. Outcomes are quantized onto the
    integer grid -k_prime..k_prime and the control outcome is shifted by the
    additive integer effect ``tau`` (0 or 1 so the grid is preserved).
    """

    beta: float
    v: float
    k_prime: int
    tau: int = 1
    cluster_sizes: tuple[int, ...] = (500, 1000, 2000)

    def __post_init__(self):
        if not 0.0 <= self.beta <= self.v:
            raise ValidationError("need 0 <= beta <= v")
        if self.k_prime < 1:
            raise ValidationError("k_prime must be >= 1")
        if self.tau not in (0, 1):
            raise ValidationError("tau must be 0 or 1 to stay inside the outcome grid")
        if any(s < 2 for s in self.cluster_sizes):
            raise ValidationError("cluster sizes must be >= 2")

    @property
    def k(self) -> int:
        return 2 * (self.k_prime + 1)

    def space(self) -> OutcomeSpace:
        return OutcomeSpace(tuple(range(-self.k_prime, self.k_prime + 2)))


def quantize(y_prime, v: float, k_prime: int):
    """Map a continuous response onto the integer grid [-k_prime, k_prime].

    Values beyond +/- 2 sqrt(v) saturate at +/- k_prime; inside that range the
    response is divided by the grid step 2 sqrt(v)/k_prime and rounded to the
    nearest integer, half away from zero so the map is symmetric about 0.
    """
    if v <= 0:
        raise ValidationError("v must be > 0")
    y = np.asarray(y_prime, dtype=float)
    delta = 2.0 * math.sqrt(v) / k_prime
    scaled = y / delta
    rounded = np.copysign(np.floor(np.abs(scaled) + 0.5), scaled)
    out = np.where(
        y > 2.0 * math.sqrt(v),
        k_prime,
        np.where(y < -2.0 * math.sqrt(v), -k_prime, rounded),
    ).astype(np.int64)
    return out if out.ndim else int(out)


def gen_gmm(config: GmmConfig, streams: RngStreams) -> PopulationDataset:
    """Draw a mixture population; control outcomes quantized, treated = control + tau."""
    sizes = np.asarray(config.cluster_sizes, dtype=np.int64)
    n = int(sizes.sum())
    cluster = np.repeat(np.arange(len(sizes)), sizes)
    mu = standard_normal(streams.generator("mu"), len(sizes))
    w = standard_normal(streams.generator("noise"), n)
    y_prime = math.sqrt(config.beta) * mu[cluster] + math.sqrt(config.v - config.beta) * w
    y0_level = quantize(y_prime, config.v, config.k_prime)
    space = config.space()
    y0 = y0_level + config.k_prime
    return PopulationDataset(
        space=space,
        unit_ids=tuple(f"u{i:06d}" for i in range(n)),
        cluster=cluster,
        y0=y0,
        y1=y0 + config.tau,
        cluster_labels=tuple(range(len(sizes))),
    )


@dataclass(frozen=True)
class GraphPopConfig:
    """Community-graph population: outcomes are linear in per-cluster graph features.

    A planted-partition graph is drawn (edge prob ``p_in`` within a community,
    ``p_out`` across); each community's feature vector is (node count, edge
    count, cross-edge count, density), standardized to zero mean and unit
    l2 norm across communities. Outcomes x^T beta + Normal(0, v^2) are binned
    into ``k`` equal-width levels between the 0.5th and 99.5th percentile of
    the control responses, with tau added on the continuous scale before the
    shared binning.
    """

    community_sizes: tuple[int, ...]
    p_in: float
    p_out: float
    beta: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    v: float = 0.1
    k: int = 8
    tau: float = 1.0

    def __post_init__(self):
        if len(self.community_sizes) < 2:
            raise ValidationError("need at least 2 communities")
        if any(s < 2 for s in self.community_sizes):
            raise ValidationError("community sizes must be >= 2")
        if len(self.beta) != 4:
            raise ValidationError("beta must have 4 coefficients")
        if not (0.0 <= self.p_in <= 1.0 and 0.0 <= self.p_out <= 1.0):
            raise ValidationError("edge probabilities must lie in [0, 1]")
        if self.k < 2:
            raise ValidationError("k must be >= 2")


def _planted_partition_features(config: GraphPopConfig, rng) -> np.ndarray:
    """Per-community (nodes, edges, cross-edges, density) from a sampled graph."""
    sizes = config.community_sizes
    c = len(sizes)
    edges = np.zeros(c)
    cross = np.zeros(c)
    for a in range(c):
        na = sizes[a]
        block = rng.random((na, na)) < config.p_in
        edges[a] = np.triu(block, k=1).sum()
        for b in range(a + 1, c):
            cut = (rng.random((na, sizes[b])) < config.p_out).sum()
            cross[a] += cut
            cross[b] += cut
    nodes = np.asarray(sizes, dtype=float)
    density = edges / (nodes * (nodes - 1) / 2.0)
    return np.stack([nodes, edges, cross, density], axis=1)


def _standardize_columns(features: np.ndarray) -> np.ndarray:
    centered = features - features.mean(axis=0)
    norms = np.linalg.norm(centered, axis=0)
    if np.any(norms < 1e-12):
        raise ValidationError(
            "feature standardization undefined: a feature is constant across clusters"
        )
    return centered / norms


def gen_graph_population(config: GraphPopConfig, streams: RngStreams) -> PopulationDataset:
    features = _planted_partition_features(config, streams.generator("graph"))
    x = _standardize_columns(features)
    cluster_effect = x @ np.asarray(config.beta, dtype=float)
    sizes = np.asarray(config.community_sizes, dtype=np.int64)
    n = int(sizes.sum())
    cluster = np.repeat(np.arange(len(sizes)), sizes)
    w = standard_normal(streams.generator("noise"), n) * config.v
    y0_cont = cluster_effect[cluster] + w
    y1_cont = y0_cont + config.tau
    lo, hi = np.percentile(y0_cont, [0.5, 99.5])
    if not hi > lo:
        raise ValidationError("degenerate outcome range; cannot bin")
    width = (hi - lo) / config.k
    mids = lo + width * (np.arange(config.k) + 0.5)

    def bin_idx(y):
        return np.clip(np.floor((y - lo) / width), 0, config.k - 1).astype(np.int64)

    return PopulationDataset(
        space=OutcomeSpace(tuple(float(m) for m in mids)),
        unit_ids=tuple(f"u{i:06d}" for i in range(n)),
        cluster=cluster,
        y0=bin_idx(y0_cont),
        y1=bin_idx(y1_cont),
        cluster_labels=tuple(range(len(sizes))),
    )


# ---------------------------------------------------------------------------
# CSV schemas. Population files: unit_id,cluster,y0,y1 (header required).
# Observed-data files for estimation-only workflows: unit_id,cluster,z,y.
# ---------------------------------------------------------------------------

def _read_rows(path, expected_header):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected_header:
            raise ValidationError(
                f"expected header {','.join(expected_header)!r}, got {header!r}"
            )
        yield from enumerate(reader, start=2)


def ingest_csv(path, space: OutcomeSpace) -> PopulationDataset:
    """Load and validate a population file; errors carry 1-based line numbers."""
    records = []
    problems = []
    for lineno, row in _read_rows(path, ["unit_id", "cluster", "y0", "y1"]):
        if len(row) != 4:
            problems.append(f"line {lineno}: expected 4 fields")
            continue
        try:
            records.append(UnitRecord(row[0], row[1], float(row[2]), float(row[3])))
        except ValueError:
            problems.append(f"line {lineno}: malformed outcome value")
    if problems:
        raise ValidationError("; ".join(problems))
    violations = validate_population(records, space)
    if violations:
        raise ValidationError("; ".join(violations))
    return PopulationDataset.from_records(records, space)


def ingest_observed_csv(path, space: OutcomeSpace):
    """Load an observed-data file: returns (unit_ids, cluster, z, y_idx, cluster_labels)."""
    unit_ids, labels, z, y = [], [], [], []
    for lineno, row in _read_rows(path, ["unit_id", "cluster", "z", "y"]):
        if len(row) != 4:
            raise ValidationError(f"line {lineno}: expected 4 fields")
        if row[2] not in ("0", "1"):
            raise ValidationError(f"line {lineno}: z must be 0 or 1")
        try:
            y_val = float(row[3])
        except ValueError:
            raise ValidationError(f"line {lineno}: malformed outcome value") from None
        if y_val not in space:
            raise ValidationError(f"line {lineno}: outcome {row[3]} outside space")
        unit_ids.append(row[0])
        labels.append(row[1])
        z.append(int(row[2]))
        y.append(space.index_of(y_val))
    uniq = sorted(set(labels), key=str)
    dense = {lab: i for i, lab in enumerate(uniq)}
    return (
        tuple(unit_ids),
        np.array([dense[lab] for lab in labels]),
        np.array(z, dtype=np.int8),
        np.array(y),
        tuple(uniq),
    )


def write_population_csv(pop: PopulationDataset, path) -> None:
    from .mechanisms import format_value

    vals = pop.space.array
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["unit_id", "cluster", "y0", "y1"])
        for i in range(pop.n):
            writer.writerow(
                [
                    pop.unit_ids[i],
                    pop.cluster_labels[pop.cluster[i]],
                    format_value(vals[pop.y0[i]]),
                    format_value(vals[pop.y1[i]]),
                ]
            )


def subsample(
    pop: PopulationDataset, counts, rng: np.random.Generator
) -> PopulationDataset:
    """Uniform without-replacement per-cluster subsample, deterministic per seed."""
    counts = np.asarray(counts, dtype=np.int64)
    if counts.shape != (pop.n_clusters,):
        raise ValidationError("need one count per cluster")
    if np.any(counts > pop.cluster_sizes):
        raise ValidationError("subsample count exceeds cluster size")
    if np.any(counts < 2):
        raise ValidationError("subsample counts must be >= 2")
    keep = []
    for c in range(pop.n_clusters):
        members = np.flatnonzero(pop.cluster == c)
        picked = rng.permutation(len(members))[: counts[c]]
        keep.append(members[np.sort(picked)])
    keep = np.concatenate(keep)
    return PopulationDataset(
        space=pop.space,
        unit_ids=tuple(pop.unit_ids[i] for i in keep),
        cluster=pop.cluster[keep],
        y0=pop.y0[keep],
        y1=pop.y1[keep],
        cluster_labels=pop.cluster_labels,
    )
