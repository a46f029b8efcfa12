"""Core domain types: outcome spaces, populations, designs, parameters, and releases.

Outcomes are stored internally as integer indices into an :class:`OutcomeSpace`;
membership checks are exact index lookups, never floating comparisons. Cluster
ids are dense integers ``0..C-1`` after ingestion, with the original labels
preserved for serialization. All types are immutable after construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, NamedTuple

import numpy as np

__all__ = [
    "ValidationError",
    "OutcomeSpace",
    "UnitRecord",
    "PopulationDataset",
    "Design",
    "MechanismKind",
    "MechanismParams",
    "ProjectedPrior",
    "PrivatizedRelease",
    "validate_population",
    "draw_design",
]

MIN_CLUSTER_SIZE = 2


class ValidationError(ValueError):
    """Malformed population, design, or parameters (CLI exit code 2)."""


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class OutcomeSpace:
    """Finite response space: K >= 2 strictly increasing real values.

    The fixed ordering of ``values`` defines every vector and matrix index
    used elsewhere (histograms, randomization matrices, debiasing rows).
    """

    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if len(vals) < 2:
            raise ValidationError("outcome space needs at least 2 distinct values")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValidationError("outcome values must be strictly increasing")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "_array", _frozen_array(vals, float))
        object.__setattr__(self, "_index", {v: i for i, v in enumerate(vals)})

    @property
    def k(self) -> int:
        return len(self.values)

    @property
    def array(self) -> np.ndarray:
        return self._array

    @property
    def max_abs(self) -> float:
        """Sup norm of the value vector (B in the variance bounds)."""
        return float(np.max(np.abs(self._array)))

    @property
    def l2_sq(self) -> float:
        return float(np.dot(self._array, self._array))

    @property
    def l2(self) -> float:
        return math.sqrt(self.l2_sq)

    @property
    def mean(self) -> float:
        return float(self._array.mean())

    @property
    def mean_sq(self) -> float:
        return float((self._array**2).mean())

    def __contains__(self, value) -> bool:
        return float(value) in self._index

    def index_of(self, value) -> int:
        try:
            return self._index[float(value)]
        except KeyError:
            raise ValidationError(f"outcome {value!r} outside space") from None


class UnitRecord(NamedTuple):
    """Raw ingestion record, before outcome values are resolved to indices."""

    unit_id: str
    cluster: object
    y0: float
    y1: float


def validate_population(pop, space: OutcomeSpace) -> list[str]:
    """Report invariant violations for a population; empty list iff valid.

    Accepts either an iterable of :class:`UnitRecord` or a built
    :class:`PopulationDataset` (which is converted back to records).
    """
    records = pop.to_records() if isinstance(pop, PopulationDataset) else pop
    violations: list[str] = []
    seen: set[str] = set()
    sizes: dict[object, int] = {}
    for rec in records:
        if rec.unit_id in seen:
            violations.append(f"duplicate unit id {rec.unit_id!r}")
        seen.add(rec.unit_id)
        sizes[rec.cluster] = sizes.get(rec.cluster, 0) + 1
        for name, y in (("y0", rec.y0), ("y1", rec.y1)):
            if y not in space:
                violations.append(
                    f"unit {rec.unit_id!r}: {name}={y!r} outside space"
                )
    for label in sorted(sizes, key=str):
        if sizes[label] < MIN_CLUSTER_SIZE:
            violations.append(
                f"cluster {label!r} below minimum size {MIN_CLUSTER_SIZE}"
            )
    if not sizes:
        violations.append("population is empty")
    return violations


@dataclass(frozen=True, eq=False)
class PopulationDataset:
    """Units with both potential outcomes and a dense cluster id per unit.

    ``y0``/``y1`` hold indices into ``space``; ``cluster_labels[c]`` is the
    original label of dense cluster ``c``.
    """

    space: OutcomeSpace
    unit_ids: tuple[str, ...]
    cluster: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    cluster_labels: tuple

    def __post_init__(self):
        n = len(self.unit_ids)
        for name in ("cluster", "y0", "y1"):
            arr = getattr(self, name)
            if arr.shape != (n,):
                raise ValidationError(f"{name} must have one entry per unit")
        object.__setattr__(self, "cluster", _frozen_array(self.cluster, np.int64))
        object.__setattr__(self, "y0", _frozen_array(self.y0, np.int64))
        object.__setattr__(self, "y1", _frozen_array(self.y1, np.int64))
        sizes = np.bincount(self.cluster, minlength=len(self.cluster_labels))
        object.__setattr__(self, "cluster_sizes", _frozen_array(sizes, np.int64))

    @classmethod
    def from_records(
        cls, records: Iterable[UnitRecord], space: OutcomeSpace
    ) -> "PopulationDataset":
        records = [UnitRecord(*r) for r in records]
        violations = validate_population(records, space)
        if violations:
            raise ValidationError("; ".join(violations))
        labels = sorted({r.cluster for r in records}, key=str)
        dense = {lab: i for i, lab in enumerate(labels)}
        return cls(
            space=space,
            unit_ids=tuple(r.unit_id for r in records),
            cluster=np.array([dense[r.cluster] for r in records]),
            y0=np.array([space.index_of(r.y0) for r in records]),
            y1=np.array([space.index_of(r.y1) for r in records]),
            cluster_labels=tuple(labels),
        )

    def to_records(self) -> list[UnitRecord]:
        vals = self.space.array
        return [
            UnitRecord(
                self.unit_ids[i],
                self.cluster_labels[self.cluster[i]],
                float(vals[self.y0[i]]),
                float(vals[self.y1[i]]),
            )
            for i in range(self.n)
        ]

    @property
    def n(self) -> int:
        return len(self.unit_ids)

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_labels)

    @property
    def ate(self) -> float:
        """Finite-sample average treatment effect over the full population."""
        vals = self.space.array
        return float(np.mean(vals[self.y1] - vals[self.y0]))

    def observed(self, design: "Design") -> np.ndarray:
        """Observed outcome indices under a realized assignment."""
        return np.where(design.z == 1, self.y1, self.y0)


@dataclass(frozen=True, eq=False)
class Design:
    """Realized treatment assignment plus the fixed per-cluster arm counts."""

    z: np.ndarray
    n1c: np.ndarray
    n0c: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "z", _frozen_array(self.z, np.int8))
        object.__setattr__(self, "n1c", _frozen_array(self.n1c, np.int64))
        object.__setattr__(self, "n0c", _frozen_array(self.n0c, np.int64))
        if np.any(self.n1c < 1) or np.any(self.n0c < 1):
            raise ValidationError("every cluster needs at least one unit per arm")

    @classmethod
    def from_assignment(cls, pop: PopulationDataset, z) -> "Design":
        z = np.asarray(z)
        if z.shape != (pop.n,) or not np.isin(z, (0, 1)).all():
            raise ValidationError("assignment must be one 0/1 entry per unit")
        c = pop.n_clusters
        n1c = np.bincount(pop.cluster[z == 1], minlength=c)
        return cls(z=z, n1c=n1c, n0c=pop.cluster_sizes - n1c)

    @property
    def n1(self) -> int:
        return int(self.n1c.sum())

    @property
    def n0(self) -> int:
        return int(self.n0c.sum())

    def arm_counts(self) -> np.ndarray:
        """(C, 2) array with column 0 = control counts, column 1 = treated counts."""
        return np.stack([self.n0c, self.n1c], axis=1)


def resolve_treated_counts(pop: PopulationDataset, treated) -> np.ndarray:
    """Turn a scalar treated fraction or per-cluster counts into validated counts."""
    sizes = pop.cluster_sizes
    if np.isscalar(treated):
        n1c = np.round(sizes * float(treated)).astype(np.int64)
    else:
        n1c = np.asarray(treated, dtype=np.int64)
        if n1c.shape != sizes.shape:
            raise ValidationError("need one treated count per cluster")
    if np.any(n1c < 1) or np.any(n1c > sizes - 1):
        raise ValidationError(
            "treated counts must leave at least one unit in each arm of every cluster"
        )
    return n1c


def draw_design(pop: PopulationDataset, treated, rng: np.random.Generator) -> Design:
    """Completely randomized assignment within each cluster, exact counts.

    ``treated`` is either a scalar treated fraction or per-cluster treated
    counts; counts of 0 or n_c are rejected (no estimator exists there).
    """
    n1c = resolve_treated_counts(pop, treated)
    z = np.zeros(pop.n, dtype=np.int8)
    for c in range(pop.n_clusters):
        members = np.flatnonzero(pop.cluster == c)
        picked = rng.permutation(len(members))[: n1c[c]]
        z[members[picked]] = 1
    return Design(z=z, n1c=n1c, n0c=pop.cluster_sizes - n1c)


class MechanismKind(str, Enum):
    CLUSTER_DP = "cluster_dp"
    CLUSTER_FREE_DP = "cluster_free_dp"
    UNIFORM_PRIOR_DP = "uniform_prior_dp"
    NOISY_HT = "noisy_ht"
    NOISY_HISTOGRAM = "noisy_histogram"


@dataclass(frozen=True)
class MechanismParams:
    """Knobs consumed by the mechanisms, the accountant, and the variance formulas.

    ``sigma`` is a Laplace scale; ``math.inf`` is the sentinel for "skip the
    noise step entirely". For the aggregate mechanisms (noisy HT / histogram)
    only ``epsilon`` is meaningful and the other knobs are ignored.
    """

    kind: MechanismKind
    gamma: float = 0.0
    sigma: float = math.inf
    lam: float = 0.0
    epsilon: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValidationError("gamma must lie in [0, 1/K] (at most 1)")
        if self.sigma < 0:
            raise ValidationError("sigma must be >= 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ValidationError("lambda must lie in [0, 1]")
        if self.kind in (MechanismKind.NOISY_HT, MechanismKind.NOISY_HISTOGRAM):
            if self.epsilon is None or self.epsilon <= 0:
                raise ValidationError(f"{self.kind.value} requires epsilon > 0")

    def check_gamma(self, k: int) -> None:
        if self.gamma > 1.0 / k + 1e-12:
            raise ValidationError(f"gamma={self.gamma} exceeds 1/K with K={k}")


@dataclass(frozen=True, eq=False)
class ProjectedPrior:
    """Noise/clip/renormalize output: one probability vector per (cluster, arm).

    ``q[c, a]`` is the length-K resampling distribution for arm ``a`` of
    cluster ``c``; every entry is >= gamma and each vector sums to one.
    """

    q: np.ndarray
    gamma: float

    def __post_init__(self):
        object.__setattr__(self, "q", _frozen_array(self.q, float))
        if self.q.ndim != 3 or self.q.shape[1] != 2:
            raise ValidationError("prior table must have shape (C, 2, K)")

    def violations(self, tol: float = 1e-12) -> list[str]:
        out = []
        if np.any(self.q < self.gamma - tol):
            out.append("prior entry below gamma")
        if np.any(np.abs(self.q.sum(axis=-1) - 1.0) > tol):
            out.append("prior does not sum to 1")
        return out


@dataclass(frozen=True, eq=False)
class PrivatizedRelease:
    """Everything the central unit ships: per-unit privatized outcomes plus
    the per-(cluster, arm) debiasing rows y^T Q^{-1} and a parameter echo.

    Third parties can estimate treatment effects from this object alone; no
    true outcomes are present.
    """

    space: OutcomeSpace
    unit_ids: tuple[str, ...]
    cluster: np.ndarray
    cluster_labels: tuple
    z: np.ndarray
    y_tilde: np.ndarray
    debias: np.ndarray
    q_tilde: np.ndarray
    kind: MechanismKind
    gamma: float
    sigma: float
    lam: float

    def __post_init__(self):
        object.__setattr__(self, "cluster", _frozen_array(self.cluster, np.int64))
        object.__setattr__(self, "z", _frozen_array(self.z, np.int8))
        object.__setattr__(self, "y_tilde", _frozen_array(self.y_tilde, np.int64))
        object.__setattr__(self, "debias", _frozen_array(self.debias, float))
        object.__setattr__(self, "q_tilde", _frozen_array(self.q_tilde, float))
        if np.any(self.y_tilde < 0) or np.any(self.y_tilde >= self.space.k):
            raise ValidationError("privatized outcome outside space")

    @property
    def n(self) -> int:
        return len(self.unit_ids)
