"""Response-randomization matrices, closed-form debiasing, and the estimators.

The randomization matrix for a resampling distribution q and resampling
probability lam is ``Q[y', y] = (1-lam) * 1(y'=y) + lam * q[y']``, i.e. a
scaled identity plus a rank-one term, so its inverse has the closed form
``Q^{-1} = I/(1-lam) - lam/(1-lam) * q 1^T`` and the debiasing row
``y^T Q^{-1}`` costs O(K) to evaluate. Dense inversion is kept out of the
production path and used only as a test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Design, OutcomeSpace, PopulationDataset, PrivatizedRelease, ValidationError

__all__ = [
    "RandomizationMatrix",
    "build_q",
    "invert_q",
    "debias_rows",
    "debias_value",
    "tau_q",
    "per_cluster_contributions",
    "tau_no_dp",
    "tau_no_dp_unstratified",
    "tau_uniform",
    "singular_value_bound",
]


def q_matrix(q_tilde: np.ndarray, lam: float) -> np.ndarray:
    """Column-stochastic K x K matrix giving P(released = y' | true = y)."""
    q_tilde = np.asarray(q_tilde, dtype=float)
    k = q_tilde.shape[-1]
    return (1.0 - lam) * np.eye(k) + lam * np.outer(q_tilde, np.ones(k))

def q_inverse(q_tilde: np.ndarray, lam: float) -> np.ndarray:
    """Rank-one-update inverse: I/(1-lam) - lam/(1-lam) q 1^T."""
    q_tilde = np.asarray(q_tilde, dtype=float)
    k = q_tilde.shape[-1]
    return (np.eye(k) - lam * np.outer(q_tilde, np.ones(k))) / (1.0 - lam)


@dataclass(frozen=True, eq=False)
class RandomizationMatrix:
    """One (cluster, arm) randomization matrix with its cached closed-form inverse."""

    q_tilde: np.ndarray
    lam: float

    def __post_init__(self):
        if not 0.0 <= self.lam < 1.0:
            raise ValidationError("randomization matrix singular at lambda = 1")
        q = np.asarray(self.q_tilde, dtype=float)
        object.__setattr__(self, "q_tilde", q)
        object.__setattr__(self, "_matrix", q_matrix(q, self.lam))
        object.__setattr__(self, "_inverse", q_inverse(q, self.lam))

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    @property
    def inverse(self) -> np.ndarray:
        return self._inverse

    @property
    def k(self) -> int:
        return len(self.q_tilde)


def build_q(q_tilde, lam: float) -> RandomizationMatrix:
    return RandomizationMatrix(q_tilde=np.asarray(q_tilde, dtype=float), lam=lam)


def invert_q(entry: RandomizationMatrix) -> np.ndarray:
    return entry.inverse


def singular_value_bound(lam: float, k: int) -> float:
    """Upper bound (lam sqrt(K) + 1) / (1 - lam) on the largest singular value of Q^{-1}."""
    return (lam * np.sqrt(k) + 1.0) / (1.0 - lam)


def debias_rows(values: np.ndarray, q_tilde: np.ndarray, lam: float) -> np.ndarray:
    """Rows y^T Q^{-1} for a table of priors; broadcasts over leading axes of q_tilde.

    Entry j equals (values[j] - lam * <values, q>) / (1 - lam).
    """
    if lam >= 1.0:
        raise ValidationError("randomization matrix singular at lambda = 1")
    q_tilde = np.asarray(q_tilde, dtype=float)
    prior_mean = q_tilde @ values
    return (values - lam * prior_mean[..., None]) / (1.0 - lam)


def debias_value(values: np.ndarray, entry: RandomizationMatrix, y_tilde_index: int) -> float:
    """Unbiased reconstruction of a single privatized outcome (O(K) closed form)."""
    row = debias_rows(np.asarray(values, dtype=float), entry.q_tilde, entry.lam)
    return float(row[y_tilde_index])


def _cluster_sums(values_per_unit, cluster, z, n1c, n0c) -> np.ndarray:
    """Per-cluster `mean(treated) - mean(control)` contrasts, weighted within arms."""
    c = len(n1c)
    treated = np.bincount(cluster, weights=values_per_unit * (z == 1), minlength=c)
    control = np.bincount(cluster, weights=values_per_unit * (z == 0), minlength=c)
    return treated / n1c - control / n0c


def per_cluster_contributions(values_per_unit, cluster, design: Design) -> np.ndarray:
    """Terms (n_c/n) * [sum_i v_i z_i / n1c - sum_i v_i (1-z_i) / n0c], in cluster order."""
    sizes = design.n1c + design.n0c
    n = sizes.sum()
    contrast = _cluster_sums(values_per_unit, cluster, design.z, design.n1c, design.n0c)
    return (sizes / n) * contrast


def tau_q(release: PrivatizedRelease, design: Design, space: OutcomeSpace) -> float:
    """Debiased stratified estimator computed from released data only.

    Uses the privatized outcomes, assignments, cluster ids, and the released
    debiasing rows; it never sees true outcomes (post-processing purity).
    """
    rows = release.debias
    if not np.all(np.isfinite(rows)):
        raise ValidationError("missing debias row (lambda = 1 release cannot be debiased)")
    per_unit = rows[release.cluster, release.z, release.y_tilde]
    return float(per_cluster_contributions(per_unit, release.cluster, design).sum())


def tau_no_dp(pop: PopulationDataset, design: Design) -> float:
    """Stratified difference-in-means on true observed outcomes (oracle baseline)."""
    vals = pop.space.array
    observed = vals[pop.observed(design)]
    return float(per_cluster_contributions(observed, pop.cluster, design).sum())


def tau_no_dp_unstratified(pop: PopulationDataset, design: Design) -> float:
    """Pooled difference-in-means on true observed outcomes."""
    vals = pop.space.array
    observed = vals[pop.observed(design)]
    z = design.z
    return float(
        observed[z == 1].sum() / design.n1 - observed[z == 0].sum() / design.n0
    )


def tau_uniform(
    release: PrivatizedRelease,
    design: Design,
    space: OutcomeSpace,
    lam: float | None = None,
    stratified: bool = True,
) -> float:
    """(1-lam)^{-1}-scaled difference of privatized outcomes (uniform-prior estimator)."""
    lam = release.lam if lam is None else lam
    if lam >= 1.0:
        raise ValidationError("estimator undefined at lambda = 1")
    vals = space.array[release.y_tilde]
    if stratified:
        raw = float(per_cluster_contributions(vals, release.cluster, design).sum())
    else:
        z = release.z
        raw = float(vals[z == 1].sum() / design.n1 - vals[z == 0].sum() / design.n0)
    return raw / (1.0 - lam)
