"""Privatization mechanisms: per-cluster randomized response and the aggregate baselines.

The core mechanism fits one resampling distribution per (cluster, arm) by
perturbing the empirical outcome histogram with Laplace noise, clipping to
``[gamma, 1]``, and renormalizing; each unit's outcome is then reported
truthfully with probability ``1 - lam`` and otherwise redrawn from that
distribution. The cluster-free variant pools all clusters into one before
fitting, and the uniform-prior variant skips fitting entirely. Two
aggregate baselines (noisy Horvitz-Thompson, noisy histogram) release a
single noised scalar instead of unit-level data.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .estimation import debias_rows, tau_no_dp
from .model import (
    Design,
    MechanismKind,
    MechanismParams,
    OutcomeSpace,
    PopulationDataset,
    PrivatizedRelease,
    ProjectedPrior,
    ValidationError,
)
from .rng import RngStreams, laplace_noise, open_uniform

__all__ = [
    "ArmHistogram",
    "empirical_histogram",
    "arm_histograms",
    "perturb_clip",
    "renormalize",
    "resample_outcomes",
    "cluster_dp",
    "uniform_prior_dp",
    "NoisyEstimate",
    "noisy_ht",
    "noisy_histogram",
    "write_release",
    "read_release",
]


@dataclass(frozen=True, eq=False)
class ArmHistogram:
    """Per-(cluster, arm) outcome counts and the empirical frequency table."""

    counts: np.ndarray  # (C, 2, K) integer counts
    n_ac: np.ndarray  # (C, 2) arm sizes, column 0 = control

    @property
    def p_hat(self) -> np.ndarray:
        return self.counts / self.n_ac[..., None]


class HistogramEntry(NamedTuple):
    counts: np.ndarray
    p_hat: np.ndarray
    n_ac: int


def arm_histograms(pop: PopulationDataset, design: Design) -> ArmHistogram:
    """Exact observed-outcome counts for every (cluster, arm)."""
    k = pop.space.k
    c = pop.n_clusters
    observed = pop.observed(design)
    cell = (pop.cluster * 2 + design.z) * k + observed
    counts = np.bincount(cell, minlength=c * 2 * k).reshape(c, 2, k)
    n_ac = design.arm_counts()
    if np.any(n_ac < 1):
        raise ValidationError("empty treatment arm in cluster")
    return ArmHistogram(counts=counts, n_ac=n_ac)


def empirical_histogram(
    pop: PopulationDataset, design: Design, cluster: int, arm: int
) -> HistogramEntry:
    """Frequency vector of observed outcomes for one (cluster, arm)."""
    hist = arm_histograms(pop, design)
    return HistogramEntry(
        counts=hist.counts[cluster, arm],
        p_hat=hist.p_hat[cluster, arm],
        n_ac=int(hist.n_ac[cluster, arm]),
    )


def perturb_clip(
    p_hat: np.ndarray,
    gamma: float,
    sigma: float,
    n_ac,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """Entrywise Laplace(sigma / n_ac) perturbation followed by clipping to [gamma, 1].

    ``sigma = inf`` is the sentinel for "skip the noise step" (the empirical
    frequencies are clipped directly); ``noise`` injects a fixed noise array
    for tests and for shared-noise stability checks.
    """
    p_hat = np.asarray(p_hat, dtype=float)
    if noise is None:
        if math.isinf(sigma):
            noise = 0.0
        else:
            scale = sigma / np.asarray(n_ac, dtype=float)
            if p_hat.ndim > 1:
                scale = scale[..., None]
            noise = laplace_noise(rng, 1.0, p_hat.shape) * scale
    return np.clip(p_hat + noise, gamma, 1.0)


def renormalize(q: np.ndarray, gamma: float) -> np.ndarray:
    """Project a clipped vector back onto the simplex while keeping entries >= gamma.

    Mass is shifted proportionally to headroom: when the entries exceed one in
    total, each is pulled toward the floor gamma; otherwise each is pushed
    toward 1. A vector already summing to one is returned unchanged. The
    denominators cannot vanish: sum(q) > 1 forces some q_y > gamma, and
    sum(q) < 1 forces some q_y < 1 (else the sum would be K >= 2).
    Broadcasts over any leading axes.
    """
    q = np.asarray(q, dtype=float)
    k = q.shape[-1]
    s = q.sum(axis=-1, keepdims=True)
    over_den = np.where(s > 1.0, s - k * gamma, 1.0)
    under_den = np.where(s < 1.0, k - s, 1.0)
    # Anchored forms (algebraically the per-entry shift from the headroom
    # weights) guarantee q_tilde >= gamma in floating point as well.
    over = gamma + (q - gamma) * ((1.0 - k * gamma) / over_den)
    under = q + (1.0 - q) * ((1.0 - s) / under_den)
    return np.where(s > 1.0, over, np.where(s < 1.0, under, q))


def fit_priors(
    pop: PopulationDataset,
    design: Design,
    params: MechanismParams,
    rng: np.random.Generator,
) -> ProjectedPrior:
    """Noise/clip/renormalize per (cluster, arm); pooled first for the cluster-free kind."""
    params.check_gamma(pop.space.k)
    hist = arm_histograms(pop, design)
    if params.kind is MechanismKind.CLUSTER_FREE_DP:
        counts = hist.counts.sum(axis=0, keepdims=True)
        n_ac = hist.n_ac.sum(axis=0, keepdims=True)
    else:
        counts, n_ac = hist.counts, hist.n_ac
    p_hat = counts / n_ac[..., None]
    q = perturb_clip(p_hat, params.gamma, params.sigma, n_ac, rng)
    q_tilde = renormalize(q, params.gamma)
    if params.kind is MechanismKind.CLUSTER_FREE_DP:
        q_tilde = np.broadcast_to(q_tilde, (pop.n_clusters, 2, pop.space.k)).copy()
    return ProjectedPrior(q=q_tilde, gamma=params.gamma)


def resample_outcomes(
    y_observed: np.ndarray,
    cluster: np.ndarray,
    z: np.ndarray,
    q_tilde: np.ndarray,
    lam: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Report each outcome truthfully w.p. 1-lam, else draw from the unit's arm prior."""
    n = len(y_observed)
    k = q_tilde.shape[-1]
    u_keep = rng.random(n)
    u_cat = open_uniform(rng, n)
    cum = np.cumsum(q_tilde[cluster, z], axis=-1)
    drawn = np.minimum((u_cat[:, None] > cum).sum(axis=1), k - 1)
    return np.where(u_keep < lam, drawn, y_observed)


def _release(pop, design, q_tilde, params, y_tilde) -> PrivatizedRelease:
    if params.lam < 1.0:
        rows = debias_rows(pop.space.array, q_tilde, params.lam)
    else:
        rows = np.full_like(q_tilde, np.nan)  # lam=1 release is not debiasable
    return PrivatizedRelease(
        space=pop.space,
        unit_ids=pop.unit_ids,
        cluster=pop.cluster,
        cluster_labels=pop.cluster_labels,
        z=design.z,
        y_tilde=y_tilde,
        debias=rows,
        q_tilde=q_tilde,
        kind=params.kind,
        gamma=params.gamma,
        sigma=params.sigma,
        lam=params.lam,
    )


def cluster_dp(
    pop: PopulationDataset,
    design: Design,
    params: MechanismParams,
    streams: RngStreams,
) -> tuple[ProjectedPrior, PrivatizedRelease]:
    """Full cluster-aware (or pooled) randomized-response release.

    Consumes two named sub-streams of ``streams``: ``laplace`` for the prior
    perturbation and ``resample`` for the per-unit randomization.
    """
    if params.kind not in (MechanismKind.CLUSTER_DP, MechanismKind.CLUSTER_FREE_DP):
        raise ValidationError(f"unsupported kind {params.kind} for cluster_dp")
    prior = fit_priors(pop, design, params, streams.generator("laplace"))
    y_tilde = resample_outcomes(
        pop.observed(design),
        pop.cluster,
        design.z,
        prior.q,
        params.lam,
        streams.generator("resample"),
    )
    return prior, _release(pop, design, prior.q, params, y_tilde)


def uniform_prior_dp(
    pop: PopulationDataset,
    design: Design,
    lam: float,
    streams: RngStreams,
) -> PrivatizedRelease:
    """Report truthfully w.p. 1-lam, else draw uniformly from the outcome space."""
    k = pop.space.k
    q_tilde = np.full((pop.n_clusters, 2, k), 1.0 / k)
    params = MechanismParams(
        kind=MechanismKind.UNIFORM_PRIOR_DP, gamma=1.0 / k, sigma=math.inf, lam=lam
    )
    y_tilde = resample_outcomes(
        pop.observed(design),
        pop.cluster,
        design.z,
        q_tilde,
        lam,
        streams.generator("resample"),
    )
    return _release(pop, design, q_tilde, params, y_tilde)


class NoisyEstimate(NamedTuple):
    value: float
    noise_scales: np.ndarray


def _check_epsilon(epsilon: float) -> None:
    if not epsilon > 0:
        raise ValidationError("epsilon must be > 0")


def noisy_ht(
    pop: PopulationDataset,
    design: Design,
    epsilon: float,
    streams: RngStreams,
) -> NoisyEstimate:
    """Stratified difference-in-means plus per-cluster Laplace noise.

    The per-cluster sensitivity is max|y| / min(n0c, n1c); epsilon = inf is
    implemented as noise scale zero.
    """
    _check_epsilon(epsilon)
    scales = pop.space.max_abs / np.minimum(design.n0c, design.n1c)
    scales = np.zeros_like(scales) if math.isinf(epsilon) else scales / epsilon
    w = laplace_noise(streams.generator("laplace"), 1.0, pop.n_clusters) * scales
    weights = pop.cluster_sizes / pop.n
    return NoisyEstimate(
        value=tau_no_dp(pop, design) + float(np.dot(weights, w)),
        noise_scales=scales,
    )


def noisy_histogram(
    pop: PopulationDataset,
    design: Design,
    epsilon: float,
    streams: RngStreams,
) -> float:
    """Weighted outcome contrast computed from per-(cluster, arm) noised histograms."""
    _check_epsilon(epsilon)
    c, k = pop.n_clusters, pop.space.k
    n_ac = design.arm_counts().astype(float)
    scales = np.zeros((c, 2)) if math.isinf(epsilon) else 1.0 / (n_ac * epsilon)
    w = laplace_noise(streams.generator("laplace"), 1.0, (c, 2, k)) * scales[..., None]
    weights = pop.cluster_sizes / pop.n
    noise_part = float(np.einsum("c,k,ck->", weights, pop.space.array, w[:, 1] - w[:, 0]))
    return tau_no_dp(pop, design) + noise_part


# ---------------------------------------------------------------------------
# Release serialization: CSV of unit rows plus a JSON sidecar with the
# debiasing information. Byte-stable for a given seed.
# ---------------------------------------------------------------------------

def format_value(v: float) -> str:
    f = float(v)
    return str(int(f)) if f.is_integer() and abs(f) < 1e15 else repr(f)


def write_release(release: PrivatizedRelease, csv_path, sidecar_path) -> None:
    vals = release.space.array
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["unit_id", "cluster", "z", "y_tilde"])
        for i in range(release.n):
            writer.writerow(
                [
                    release.unit_ids[i],
                    release.cluster_labels[release.cluster[i]],
                    int(release.z[i]),
                    format_value(vals[release.y_tilde[i]]),
                ]
            )
    sidecar = {
        "kind": release.kind.value,
        "params": {
            "gamma": release.gamma,
            "sigma": "inf" if math.isinf(release.sigma) else release.sigma,
            "lambda": release.lam,
        },
        "space": [float(v) for v in release.space.values],
        "cluster_labels": [str(c) for c in release.cluster_labels],
        "debias_rows": release.debias.tolist(),
        "q_tilde": release.q_tilde.tolist(),
    }
    with open(sidecar_path, "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_release(csv_path, sidecar_path) -> PrivatizedRelease:
    with open(sidecar_path) as fh:
        sidecar = json.load(fh)
    space = OutcomeSpace(tuple(sidecar["space"]))
    labels = tuple(sidecar["cluster_labels"])
    dense = {lab: i for i, lab in enumerate(labels)}
    unit_ids, cluster, z, y_tilde = [], [], [], []
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["unit_id", "cluster", "z", "y_tilde"]:
            raise ValidationError(f"unexpected release header {reader.fieldnames}")
        for row in reader:
            unit_ids.append(row["unit_id"])
            cluster.append(dense[row["cluster"]])
            z.append(int(row["z"]))
            y_tilde.append(space.index_of(float(row["y_tilde"])))
    sigma = sidecar["params"]["sigma"]
    return PrivatizedRelease(
        space=space,
        unit_ids=tuple(unit_ids),
        cluster=np.array(cluster),
        cluster_labels=labels,
        z=np.array(z, dtype=np.int8),
        y_tilde=np.array(y_tilde),
        debias=np.array(sidecar["debias_rows"], dtype=float),
        q_tilde=np.array(sidecar["q_tilde"], dtype=float),
        kind=MechanismKind(sidecar["kind"]),
        gamma=float(sidecar["params"]["gamma"]),
        sigma=math.inf if sigma == "inf" else float(sigma),
        lam=float(sidecar["params"]["lambda"]),
    )
