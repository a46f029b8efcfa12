"""Seeded Monte Carlo harness reproducing the benchmark experiments at desk scale.

Five runners, each a pure function of (config, seed) that emits tidy tables:

* ``variance_sweep``   - mechanism variances on a truncation grid at a fixed
                         privacy target (plus a no-noise reference row).
* ``homogeneity``      - variance ratio of the clustered vs pooled mechanism
                         as cluster informativeness grows.
* ``bound_validation`` - Monte Carlo variance gap against the closed-form band.
* ``baseline_bias``    - conditional bias of unit-level vs aggregate releases
                         under one-shot noise and repeated subpopulation draws.
* ``distribution``     - normality and bias diagnostics of the debiased estimator.

Replications derive their random streams from (seed, replication index), so
tables are byte-identical regardless of worker count.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats as scipy_stats

from . import accounting
from .estimation import debias_rows, per_cluster_contributions, tau_no_dp
from .mechanisms import arm_histograms, fit_priors, renormalize, resample_outcomes
from .model import (
    Design,
    MechanismKind,
    MechanismParams,
    OutcomeSpace,
    PopulationDataset,
    ValidationError,
    draw_design,
    resolve_treated_counts,
)
from .rng import RngStreams, laplace_noise, open_uniform
from .simdata import GmmConfig, GraphPopConfig, gen_gmm, gen_graph_population, ingest_csv, subsample
from .variance import (
    cluster_dp_variance_bound,
    homogeneity,
    ht_variance,
    uniform_prior_variance,
)

__all__ = [
    "ExperimentConfig",
    "EXPERIMENTS",
    "run_experiment",
    "run_variance_sweep",
    "run_homogeneity_sweep",
    "run_bound_validation",
    "run_baseline_bias",
    "run_distribution_check",
    "build_population",
    "counts_design",
    "cluster_mechanism_taus",
    "cluster_taus_fixed_design",
    "uniform_prior_taus",
    "nodp_taus",
    "jackknife_variance_se",
]


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_DEFAULTS: dict = {
    "population": {
        "kind": "gmm",
        "beta": 4.5,
        "v": 5.0,
        "k_prime": 5,
        "tau": 1,
        "cluster_sizes": [125, 250, 500],
    },
    "mechanism": {"gamma": 0.02, "sigma": 10.0, "lambda": 0.8},
    "targets": None,
    "gamma_grid": [],
    "beta_grid": [0.0, 1.0, 2.0, 3.0, 4.0, 4.5],
    "lambda_grid": [0.5, 0.8],
    "epsilon_grid": [0.5, 1.0, 2.0, 4.0],
    "replications": 500,
    "subpop_draws": 500,
    "noise_draws": 20,
    "subpop_sizes": None,
    "treated_fraction": 0.5,
    "workers": 1,
}


def _parse_float(x) -> float:
    return math.inf if x == "inf" else float(x)


@dataclass(frozen=True)
class ExperimentConfig:
    population: dict
    mechanism: dict
    targets: dict | None
    gamma_grid: tuple[float, ...]
    beta_grid: tuple[float, ...]
    lambda_grid: tuple[float, ...]
    epsilon_grid: tuple[float, ...]
    replications: int
    subpop_draws: int
    noise_draws: int
    subpop_sizes: tuple[int, ...] | None
    treated_fraction: float
    workers: int

    @classmethod
    def from_dict(cls, raw: dict | None) -> "ExperimentConfig":
        raw = dict(raw or {})
        unknown = set(raw) - set(_DEFAULTS)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        merged = {**_DEFAULTS, **raw}
        mech = {**_DEFAULTS["mechanism"], **(merged["mechanism"] or {})}
        mech["sigma"] = _parse_float(mech["sigma"])
        targets = merged["targets"]
        if targets is not None:
            targets = {"epsilon": float(targets["epsilon"]), "delta": float(targets.get("delta", 0.0))}
        if merged["replications"] < 1:
            raise ValidationError("replications must be >= 1")
        return cls(
            population=dict(merged["population"]),
            mechanism=mech,
            targets=targets,
            gamma_grid=tuple(float(g) for g in merged["gamma_grid"]),
            beta_grid=tuple(float(b) for b in merged["beta_grid"]),
            lambda_grid=tuple(float(v) for v in merged["lambda_grid"]),
            epsilon_grid=tuple(_parse_float(e) for e in merged["epsilon_grid"]),
            replications=int(merged["replications"]),
            subpop_draws=int(merged["subpop_draws"]),
            noise_draws=int(merged["noise_draws"]),
            subpop_sizes=None
            if merged["subpop_sizes"] is None
            else tuple(int(s) for s in merged["subpop_sizes"]),
            treated_fraction=float(merged["treated_fraction"]),
            workers=int(merged["workers"]),
        )

    def canonical_json(self) -> str:
        def enc(obj):
            if isinstance(obj, float) and math.isinf(obj):
                return "inf"
            if isinstance(obj, tuple):
                return [enc(v) for v in obj]
            if isinstance(obj, dict):
                return {k: enc(v) for k, v in obj.items()}
            if isinstance(obj, list):
                return [enc(v) for v in obj]
            return obj

        # workers is an execution knob, not part of the scientific
        # configuration; results are identical for any worker count
        payload = {k: enc(getattr(self, k)) for k in _DEFAULTS if k != "workers"}
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:12]


def build_population(cfg: ExperimentConfig, streams: RngStreams) -> PopulationDataset:
    spec = dict(cfg.population)
    kind = spec.pop("kind", "gmm")
    if kind == "gmm":
        spec["cluster_sizes"] = tuple(spec.get("cluster_sizes", ()))
        return gen_gmm(GmmConfig(**spec), streams.child("population"))
    if kind == "graph":
        spec["community_sizes"] = tuple(spec["community_sizes"])
        spec["beta"] = tuple(spec.get("beta", (1.0, 1.0, 1.0, 1.0)))
        return gen_graph_population(GraphPopConfig(**spec), streams.child("population"))
    if kind == "csv":
        values = spec.get("values")
        if values is None:
            raise ValidationError("csv population needs an explicit 'values' list")
        return ingest_csv(spec["path"], OutcomeSpace(tuple(values)))
    raise ValidationError(f"unknown population kind {kind!r}")


def counts_design(pop: PopulationDataset, treated) -> Design:
    """A deterministic design carrying the requested counts (for count-only formulas)."""
    n1c = resolve_treated_counts(pop, treated)
    z = np.zeros(pop.n, dtype=np.int8)
    for c in range(pop.n_clusters):
        members = np.flatnonzero(pop.cluster == c)
        z[members[: n1c[c]]] = 1
    return Design(z=z, n1c=n1c, n0c=pop.cluster_sizes - n1c)


# ---------------------------------------------------------------------------
# Monte Carlo kernels
# ---------------------------------------------------------------------------

def _run_replications(fn, reps: int, workers: int) -> list:
    """Index-ordered replication results; identical for any worker count."""
    if workers <= 1:
        return [fn(r) for r in range(reps)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(reps)))


def _stratified_weights(design: Design, cluster: np.ndarray, n: int) -> np.ndarray:
    sizes = design.n1c + design.n0c
    w_t = (sizes / n) / design.n1c
    w_c = (sizes / n) / design.n0c
    return np.where(design.z == 1, w_t[cluster], -w_c[cluster])


def cluster_mechanism_taus(
    pop: PopulationDataset,
    params: MechanismParams,
    treated,
    streams: RngStreams,
    reps: int,
    workers: int = 1,
) -> np.ndarray:
    """Debiased estimates over replications of (assignment, prior fit, resampling).

    Each replication consumes the named streams ("assignment", "laplace",
    "resample") of ``streams.child("rep", r)``, exactly as the one-shot
    mechanism entry point does, so a replication here is bit-identical to
    running the public mechanism on the same stream node.
    """
    n1c = resolve_treated_counts(pop, treated)
    vals = pop.space.array
    n = pop.n

    def one(r: int) -> float:
        node = streams.child("rep", r)
        design = draw_design(pop, n1c, node.generator("assignment"))
        prior = fit_priors(pop, design, params, node.generator("laplace"))
        y_tilde = resample_outcomes(
            pop.observed(design), pop.cluster, design.z, prior.q, params.lam,
            node.generator("resample"),
        )
        rows = debias_rows(vals, prior.q, params.lam)
        per_unit = rows[pop.cluster, design.z, y_tilde]
        # same accumulation path as tau_q, so replications match the public
        # mechanism + estimator bit for bit
        return float(per_cluster_contributions(per_unit, pop.cluster, design).sum())

    return np.array(_run_replications(one, reps, workers))


def cluster_taus_fixed_design(
    pop: PopulationDataset,
    design: Design,
    params: MechanismParams,
    streams: RngStreams,
    reps: int,
    chunk: int = 5000,
) -> np.ndarray:
    """Batched replications of the cluster mechanism at a fixed assignment."""
    params.check_gamma(pop.space.k)
    hist = arm_histograms(pop, design)
    pooled = params.kind is MechanismKind.CLUSTER_FREE_DP
    counts = hist.counts.sum(axis=0, keepdims=True) if pooled else hist.counts
    n_ac = hist.n_ac.sum(axis=0, keepdims=True) if pooled else hist.n_ac
    p_hat = counts / n_ac[..., None]
    cl = np.zeros(pop.n, dtype=np.int64) if pooled else pop.cluster
    vals = pop.space.array
    k = pop.space.k
    y_obs = pop.observed(design)
    w_unit = _stratified_weights(design, pop.cluster, pop.n)
    lam, gamma, sigma = params.lam, params.gamma, params.sigma

    out = np.empty(reps)
    for ci, start in enumerate(range(0, reps, chunk)):
        m = min(chunk, reps - start)
        g = streams.generator("batch", ci)
        if math.isinf(sigma):
            q = np.clip(np.broadcast_to(p_hat, (m, *p_hat.shape)), gamma, 1.0)
        else:
            noise = laplace_noise(g, 1.0, (m, *p_hat.shape)) * (sigma / n_ac)[..., None]
            q = np.clip(p_hat + noise, gamma, 1.0)
        qt = renormalize(q, gamma)
        prior_mean = qt @ vals
        u_keep = g.random((m, pop.n))
        u_cat = open_uniform(g, (m, pop.n))
        cum = np.cumsum(qt[:, cl, design.z, :], axis=-1)
        drawn = np.minimum((u_cat[..., None] > cum).sum(axis=-1), k - 1)
        y_t = np.where(u_keep < lam, drawn, y_obs)
        per_unit = (vals[y_t] - lam * prior_mean[:, cl, design.z]) / (1.0 - lam)
        out[start : start + m] = per_unit @ w_unit
    return out


def _batched_assignments(pop, n1c, g, m) -> np.ndarray:
    """m stratified assignments as an (m, n) 0/1 matrix."""
    z = np.zeros((m, pop.n), dtype=np.int8)
    rows = np.arange(m)[:, None]
    for c in range(pop.n_clusters):
        members = np.flatnonzero(pop.cluster == c)
        order = np.argsort(g.random((m, len(members))), axis=1)
        z[rows, members[order[:, : n1c[c]]]] = 1
    return z


def _batched_weights(z, pop, n1c, n0c, stratified: bool) -> np.ndarray:
    if stratified:
        sizes = n1c + n0c
        w_t = (sizes / pop.n) / n1c
        w_c = (sizes / pop.n) / n0c
        return np.where(z == 1, w_t[pop.cluster], -w_c[pop.cluster])
    return np.where(z == 1, 1.0 / n1c.sum(), -1.0 / n0c.sum())


def uniform_prior_taus(
    pop: PopulationDataset,
    lam: float,
    treated,
    streams: RngStreams,
    reps: int,
    stratified: bool = True,
    chunk: int = 20000,
) -> np.ndarray:
    """Uniform-prior estimator over joint (assignment, resampling) replications."""
    if lam >= 1.0:
        raise ValidationError("estimator undefined at lambda = 1")
    n1c = resolve_treated_counts(pop, treated)
    n0c = pop.cluster_sizes - n1c
    vals = pop.space.array
    y0v, y1v = vals[pop.y0], vals[pop.y1]
    k = pop.space.k
    out = np.empty(reps)
    for ci, start in enumerate(range(0, reps, chunk)):
        m = min(chunk, reps - start)
        g = streams.generator("batch", ci)
        z = _batched_assignments(pop, n1c, g, m)
        y_obs = np.where(z == 1, y1v, y0v)
        u_keep = g.random((m, pop.n))
        drawn = np.minimum((open_uniform(g, (m, pop.n)) * k).astype(np.int64), k - 1)
        y_t = np.where(u_keep < lam, vals[drawn], y_obs)
        w = _batched_weights(z, pop, n1c, n0c, stratified)
        out[start : start + m] = (y_t * w).sum(axis=1) / (1.0 - lam)
    return out


def nodp_taus(
    pop: PopulationDataset,
    treated,
    streams: RngStreams,
    reps: int,
    stratified: bool = True,
    chunk: int = 20000,
) -> np.ndarray:
    """True-outcome difference-in-means over assignment replications."""
    n1c = resolve_treated_counts(pop, treated)
    n0c = pop.cluster_sizes - n1c
    vals = pop.space.array
    y0v, y1v = vals[pop.y0], vals[pop.y1]
    out = np.empty(reps)
    for ci, start in enumerate(range(0, reps, chunk)):
        m = min(chunk, reps - start)
        g = streams.generator("batch", ci)
        z = _batched_assignments(pop, n1c, g, m)
        y_obs = np.where(z == 1, y1v, y0v)
        w = _batched_weights(z, pop, n1c, n0c, stratified)
        out[start : start + m] = (y_obs * w).sum(axis=1)
    return out


def jackknife_variance_se(x) -> float:
    """Delete-one jackknife standard error of the sample variance."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 3:
        return float("nan")
    s1, s2 = x.sum(), float(x @ x)
    loo_mean = (s1 - x) / (n - 1)
    loo_var = ((s2 - x**2) - (n - 1) * loo_mean**2) / (n - 2)
    return float(np.sqrt((n - 1) / n * ((loo_var - loo_var.mean()) ** 2).sum()))


# ---------------------------------------------------------------------------
# Experiment runners
# ---------------------------------------------------------------------------

def _mc_row(taus: np.ndarray, truth: float) -> dict:
    return {
        "replications": len(taus),
        "mc_variance": float(np.var(taus, ddof=1)),
        "mc_variance_se": jackknife_variance_se(taus),
        "mc_bias": float(np.mean(taus) - truth),
    }


def _calibrated_cluster(cfg, gamma) -> tuple[float, float, float, float]:
    """(lam, eps, delta, eps_tilde) for the cluster mechanisms at one grid point."""
    sigma = cfg.mechanism["sigma"]
    if cfg.targets is None:
        lam = cfg.mechanism["lambda"]
        params = MechanismParams(kind=MechanismKind.CLUSTER_DP, gamma=gamma, sigma=sigma, lam=lam)
        if lam == 0.0 or gamma == 0.0:
            return lam, math.inf, 0.0, math.inf
        eps_tilde = math.log1p((1.0 - lam) / (lam * gamma))
        report = accounting.cluster_dp_eps_delta(params, eps_tilde)
        return lam, report.epsilon, report.delta, eps_tilde
    eps_t, delta_t = cfg.targets["epsilon"], cfg.targets["delta"]
    lam = accounting.calibrate_lambda(eps_t, delta_t, gamma, sigma)
    eps_tilde = eps_t - accounting.prior_budget(gamma, sigma)
    params = MechanismParams(kind=MechanismKind.CLUSTER_DP, gamma=gamma, sigma=sigma, lam=lam)
    report = accounting.cluster_dp_eps_delta(params, eps_tilde)
    return lam, report.epsilon, report.delta, eps_tilde


def _calibrated_uniform(cfg, k) -> tuple[float, float, float]:
    if cfg.targets is None:
        lam = cfg.mechanism["lambda"]
        return lam, accounting.uniform_prior_eps(k, lam), 0.0
    eps_t, delta_t = cfg.targets["epsilon"], cfg.targets["delta"]
    lam = accounting.calibrate_lambda_uniform(eps_t, delta_t, k)
    report = accounting.uniform_prior_eps_delta(k, lam, eps_t)
    return lam, report.epsilon, report.delta


def run_variance_sweep(cfg: ExperimentConfig, seed: int):
    """Mechanism variance table on a truncation grid at a fixed privacy target."""
    streams = RngStreams(seed)
    pop = build_population(cfg, streams)
    design = counts_design(pop, cfg.treated_fraction)
    truth = pop.ate
    reps = cfg.replications
    base = {"seed": seed, "config_hash": cfg.config_hash}
    phi = {"phi0": homogeneity(pop, design, 0), "phi1": homogeneity(pop, design, 1)}
    rows = []

    taus = nodp_taus(pop, cfg.treated_fraction, streams.child("nodp"), reps)
    rows.append(
        {
            "mechanism": "no_dp",
            "gamma": "",
            "sigma": "",
            "lambda": "",
            "epsilon": math.inf,
            "delta": 0.0,
            "status": "ok",
            "theory_variance_or_bound": ht_variance(pop, design),
            **_mc_row(taus, truth),
            **phi,
            **base,
        }
    )

    grid = cfg.gamma_grid or (cfg.mechanism["gamma"],)
    sigma = cfg.mechanism["sigma"]
    for kind in (MechanismKind.CLUSTER_DP, MechanismKind.CLUSTER_FREE_DP):
        for gi, gamma in enumerate(grid):
            row = {
                "mechanism": kind.value,
                "gamma": gamma,
                "sigma": sigma,
                **phi,
                **base,
            }
            try:
                lam, eps, delta, _ = _calibrated_cluster(cfg, gamma)
            except accounting.CalibrationError as exc:
                rows.append(
                    {**row, "lambda": "", "epsilon": "", "delta": "",
                     "status": f"infeasible: {exc}"}
                )
                continue
            params = MechanismParams(kind=kind, gamma=gamma, sigma=sigma, lam=lam)
            taus = cluster_mechanism_taus(
                pop, params, cfg.treated_fraction,
                streams.child("sweep", kind.value, gi), reps, cfg.workers,
            )
            bound = cluster_dp_variance_bound(pop, design, params).value if lam < 1 else ""
            rows.append(
                {**row, "lambda": lam, "epsilon": eps, "delta": delta, "status": "ok",
                 "theory_variance_or_bound": bound, **_mc_row(taus, truth)}
            )

    k = pop.space.k
    for stratified in (True, False):
        name = "uniform_prior" + ("_stratified" if stratified else "_unstratified")
        lam, eps, delta = _calibrated_uniform(cfg, k)
        taus = uniform_prior_taus(
            pop, lam, cfg.treated_fraction, streams.child("sweep", name), reps,
            stratified=stratified,
        )
        rows.append(
            {
                "mechanism": name,
                "gamma": 1.0 / k,
                "sigma": "",
                "lambda": lam,
                "epsilon": eps,
                "delta": delta,
                "status": "ok",
                "theory_variance_or_bound": uniform_prior_variance(pop, design, lam, stratified),
                **_mc_row(taus, truth),
                **phi,
                **base,
            }
        )
    return {"results": rows}, {"population_n": pop.n, "outcomes_k": pop.space.k}


def run_homogeneity_sweep(cfg: ExperimentConfig, seed: int):
    """Var(clustered)/Var(pooled) across the cluster-dependence grid."""
    if cfg.population.get("kind", "gmm") != "gmm":
        raise ValidationError("homogeneity sweep requires a gmm population source")
    streams = RngStreams(seed)
    sigma, gamma = cfg.mechanism["sigma"], cfg.mechanism["gamma"]
    base = {"seed": seed, "config_hash": cfg.config_hash}
    rows = []
    for li, lam in enumerate(cfg.lambda_grid):
        for bi, beta in enumerate(cfg.beta_grid):
            pop_cfg = ExperimentConfig.from_dict(
                {"population": {**cfg.population, "beta": beta}}
            )
            # One underlying draw for the whole grid: beta only rescales the
            # shared cluster-center and unit-noise variables.
            pop = build_population(pop_cfg, streams)
            variances = {}
            for kind in (MechanismKind.CLUSTER_DP, MechanismKind.CLUSTER_FREE_DP):
                params = MechanismParams(kind=kind, gamma=gamma, sigma=sigma, lam=lam)
                # Both mechanisms share each replication's assignment and
                # resampling streams (common random numbers), which sharpens
                # the variance ratio considerably.
                taus = cluster_mechanism_taus(
                    pop, params, cfg.treated_fraction,
                    streams.child("mc", li, bi), cfg.replications,
                    cfg.workers,
                )
                variances[kind] = (float(np.var(taus, ddof=1)), jackknife_variance_se(taus))
            vc, se_c = variances[MechanismKind.CLUSTER_DP]
            vf, se_f = variances[MechanismKind.CLUSTER_FREE_DP]
            ratio = vc / vf
            rows.append(
                {
                    "beta": beta,
                    "lambda": lam,
                    "gamma": gamma,
                    "sigma": sigma,
                    "var_cluster_dp": vc,
                    "var_cluster_free_dp": vf,
                    "ratio": ratio,
                    "ratio_se": ratio * math.sqrt((se_c / vc) ** 2 + (se_f / vf) ** 2),
                    **base,
                }
            )
    for lam in cfg.lambda_grid:
        group = [r for r in rows if r["lambda"] == lam]
        rho = scipy_stats.spearmanr([r["beta"] for r in group], [r["ratio"] for r in group]).statistic
        for r in group:
            r["spearman_beta_ratio"] = float(rho)
    return {"results": rows}, {}


def run_bound_validation(cfg: ExperimentConfig, seed: int):
    """Monte Carlo variance gap against the closed-form band, across cluster quality."""
    if cfg.population.get("kind", "gmm") != "gmm":
        raise ValidationError("bound validation requires a gmm population source")
    streams = RngStreams(seed)
    mech = cfg.mechanism
    base = {"seed": seed, "config_hash": cfg.config_hash}
    rows = []
    for bi, beta in enumerate(cfg.beta_grid):
        pop_cfg = ExperimentConfig.from_dict({"population": {**cfg.population, "beta": beta}})
        pop = build_population(pop_cfg, streams)  # shared draw, beta rescales it
        design = counts_design(pop, cfg.treated_fraction)
        params = MechanismParams(
            kind=MechanismKind.CLUSTER_DP, gamma=mech["gamma"], sigma=mech["sigma"],
            lam=mech["lambda"],
        )
        taus = cluster_mechanism_taus(
            pop, params, cfg.treated_fraction, streams.child("mc", bi),
            cfg.replications, cfg.workers,
        )
        exact_no_dp = ht_variance(pop, design)
        mc_var = float(np.var(taus, ddof=1))
        se = jackknife_variance_se(taus)
        if params.lam < 1.0:
            report = cluster_dp_variance_bound(pop, design, params)
            gap_lower = report.components["gap_lower"]
            gap_upper = report.components["gap_upper"]
        else:
            gap_lower = gap_upper = math.inf
        gap = mc_var - exact_no_dp
        rows.append(
            {
                "beta": beta,
                "gamma": mech["gamma"],
                "sigma": mech["sigma"],
                "lambda": mech["lambda"],
                "no_dp_variance": exact_no_dp,
                "mc_variance": mc_var,
                "mc_variance_se": se,
                "mc_gap": gap,
                "gap_lower_band": gap_lower,
                "gap_upper_band": gap_upper,
                "contained": bool(gap >= -2.0 * se) and bool(gap <= gap_upper),
                "replications": cfg.replications,
                **base,
            }
        )
    return {"results": rows}, {}


def _fixed_noise_cluster_tau(pop, sub_idx, design, params, std_prior, u_keep, u_cat):
    """Cluster mechanism estimate with frozen noise and frozen per-unit draws."""
    hist = arm_histograms(pop, design)
    p_hat = hist.p_hat
    if math.isinf(params.sigma):
        q = np.clip(p_hat, params.gamma, 1.0)
    else:
        q = np.clip(p_hat + std_prior * (params.sigma / hist.n_ac)[..., None], params.gamma, 1.0)
    qt = renormalize(q, params.gamma)
    vals = pop.space.array
    k = pop.space.k
    y_obs = pop.observed(design)
    cum = np.cumsum(qt[pop.cluster, design.z], axis=-1)
    drawn = np.minimum((u_cat[sub_idx, None] > cum).sum(axis=1), k - 1)
    y_t = np.where(u_keep[sub_idx] < params.lam, drawn, y_obs)
    rows = debias_rows(vals, qt, params.lam)
    per_unit = rows[pop.cluster, design.z, y_t]
    return float(per_unit @ _stratified_weights(design, pop.cluster, pop.n))


def run_baseline_bias(cfg: ExperimentConfig, seed: int):
    """Conditional bias of unit-level vs aggregate mechanisms under one-shot noise.

    Mechanism noise (and the per-unit resampling draws) is frozen per outer
    realization; subpopulations and assignments are redrawn, and the bias of
    each estimator is taken over those redraws.
    """
    streams = RngStreams(seed)
    superpop = build_population(cfg, streams)
    if cfg.subpop_sizes is not None:
        counts = np.asarray(cfg.subpop_sizes, dtype=np.int64)
    else:
        counts = np.maximum(superpop.cluster_sizes // 5, 2)
    sub_n = int(counts.sum())
    k, c = superpop.space.k, superpop.n_clusters
    if sub_n < 10 * max(k, c):
        warnings.warn(
            f"subpopulation size n={sub_n} is below 10*max(K={k}, C={c}); the "
            "unit-level bias advantage needs n >> K and n >> C",
            stacklevel=2,
        )
    unit_index = {uid: i for i, uid in enumerate(superpop.unit_ids)}
    mech = cfg.mechanism
    prior_spend = accounting.prior_budget(mech["gamma"], mech["sigma"])
    base = {"seed": seed, "config_hash": cfg.config_hash}
    rows = []
    for ei, eps in enumerate(cfg.epsilon_grid):
        if math.isinf(eps):
            lam = 0.0
        elif eps <= prior_spend:
            rows.append({"mechanism": "cluster_dp", "epsilon": eps,
                         "status": "infeasible: budget exhausted by prior estimation", **base})
            continue
        else:
            lam = 1.0 / (1.0 + mech["gamma"] * math.expm1(eps - prior_spend))
        params = MechanismParams(
            kind=MechanismKind.CLUSTER_DP, gamma=mech["gamma"], sigma=mech["sigma"], lam=lam
        )
        biases = {name: [] for name in ("cluster_dp", "noisy_ht", "noisy_histogram")}
        se_within = {name: [] for name in biases}
        for j in range(cfg.noise_draws):
            noise = streams.child("noise", ei, j)
            std_prior = laplace_noise(noise.generator("prior"), 1.0, (c, 2, k))
            u_keep = noise.generator("resample").random(superpop.n)
            u_cat = open_uniform(noise.generator("resample_cat"), superpop.n)
            std_nht = laplace_noise(noise.generator("nht"), 1.0, c)
            std_nh = laplace_noise(noise.generator("nh"), 1.0, (c, 2, k))
            devs = {name: np.empty(cfg.subpop_draws) for name in biases}
            for s in range(cfg.subpop_draws):
                node = streams.child("subpop", ei, j, s)
                sub = subsample(superpop, counts, node.generator("sample"))
                design = draw_design(sub, cfg.treated_fraction, node.generator("assignment"))
                sub_idx = np.array([unit_index[uid] for uid in sub.unit_ids])
                truth = sub.ate
                base_tau = tau_no_dp(sub, design)
                weights = sub.cluster_sizes / sub.n
                if math.isinf(eps):
                    nht_scale = np.zeros(c)
                    nh_scale = np.zeros((c, 2))
                else:
                    nht_scale = sub.space.max_abs / np.minimum(design.n0c, design.n1c) / eps
                    nh_scale = 1.0 / (design.arm_counts() * eps)
                devs["cluster_dp"][s] = (
                    _fixed_noise_cluster_tau(sub, sub_idx, design, params, std_prior, u_keep, u_cat)
                    - truth
                )
                devs["noisy_ht"][s] = base_tau + float(np.dot(weights, std_nht * nht_scale)) - truth
                nh_noise = std_nh * nh_scale[..., None]
                devs["noisy_histogram"][s] = (
                    base_tau
                    + float(np.einsum("c,k,ck->", weights, sub.space.array,
                                      nh_noise[:, 1] - nh_noise[:, 0]))
                    - truth
                )
            for name in biases:
                biases[name].append(float(np.mean(devs[name])))
                se_within[name].append(float(np.std(devs[name], ddof=1) / math.sqrt(cfg.subpop_draws)))
        for name in biases:
            b = np.array(biases[name])
            rows.append(
                {
                    "mechanism": name,
                    "epsilon": eps,
                    "lambda": lam if name == "cluster_dp" else "",
                    "status": "ok",
                    "bias_mean": float(b.mean()),
                    "bias_abs_mean": float(np.abs(b).mean()),
                    "bias_spread": float(b.std(ddof=1)) if len(b) > 1 else 0.0,
                    "mc_se_within": float(np.mean(se_within[name])),
                    "noise_draws": cfg.noise_draws,
                    "subpop_draws": cfg.subpop_draws,
                    **base,
                }
            )
    return {"results": rows}, {"subpop_n": sub_n}


def run_distribution_check(cfg: ExperimentConfig, seed: int):
    """Bias and normality diagnostics of the debiased estimator."""
    streams = RngStreams(seed)
    pop = build_population(cfg, streams)
    mech = cfg.mechanism
    params = MechanismParams(
        kind=MechanismKind.CLUSTER_DP, gamma=mech["gamma"], sigma=mech["sigma"],
        lam=mech["lambda"],
    )
    taus = cluster_mechanism_taus(
        pop, params, cfg.treated_fraction, streams.child("mc"), cfg.replications,
        cfg.workers,
    )
    dev = taus - pop.ate
    ad = scipy_stats.anderson(dev, dist="norm")
    crit_1pct = float(ad.critical_values[list(ad.significance_level).index(1.0)])
    ttest = scipy_stats.ttest_1samp(dev, 0.0)
    se = float(dev.std(ddof=1) / math.sqrt(len(dev)))
    summary = {
        "mechanism": MechanismKind.CLUSTER_DP.value,
        "gamma": mech["gamma"],
        "sigma": mech["sigma"],
        "lambda": mech["lambda"],
        "replications": cfg.replications,
        "mean_deviation": float(dev.mean()),
        "mean_se": se,
        "t_statistic": float(ttest.statistic),
        "t_pvalue": float(ttest.pvalue),
        "ad_statistic": float(ad.statistic),
        "ad_critical_1pct": crit_1pct,
        "normal_at_1pct": bool(ad.statistic < crit_1pct),
        "seed": seed,
        "config_hash": cfg.config_hash,
    }
    samples = [{"replication": i, "tau_hat": float(t), "deviation": float(d)}
               for i, (t, d) in enumerate(zip(taus, dev))]
    return {"results": [summary], "samples": samples}, {}


EXPERIMENTS = {
    "variance_sweep": run_variance_sweep,
    "homogeneity": run_homogeneity_sweep,
    "bound_validation": run_bound_validation,
    "baseline_bias": run_baseline_bias,
    "distribution": run_distribution_check,
}


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def _format_cell(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)

def write_table(rows: list[dict], path) -> None:
    columns = sorted({key for row in rows for key in row})
    with open(path, "w", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_format_cell(row.get(col, "")) for col in columns) + "\n")


def run_experiment(
    name: str,
    config: dict | ExperimentConfig | None,
    seed: int,
    outdir=None,
):
    """Run one named experiment; optionally write its tables and manifest."""
    if name not in EXPERIMENTS:
        raise ValidationError(f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}")
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    started = time.perf_counter()
    tables, meta = EXPERIMENTS[name](cfg, seed)
    runtime_ms = 1000.0 * (time.perf_counter() - started)
    manifest = {
        "experiment": name,
        "seed": seed,
        "config": json.loads(cfg.canonical_json()),
        "config_hash": cfg.config_hash,
        "runtime_ms": runtime_ms,  # volatile; kept out of the CSV tables
        **meta,
    }
    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        for table_name, rows in tables.items():
            write_table(rows, outdir / f"{name}_{table_name}.csv")
        with open(outdir / f"{name}_manifest.json", "w") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=2)
            fh.write("\n")
    return tables, manifest
