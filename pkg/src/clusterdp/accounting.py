"""Closed-form (epsilon, delta) accounting and the inverse calibration.

The cluster mechanism's privacy loss decomposes into a prior-estimation
budget ``min(1/sigma, 2/gamma)`` and a resampling budget ``eps_tilde`` with
failure probability ``delta = max(0, 1 - lam + lam * gamma * (1 - e^eps_tilde))``.
Choosing ``eps_tilde = log(1 + (1-lam)/(lam*gamma))`` makes delta vanish,
which gives the pure-epsilon form. The uniform-prior mechanism is the
special case gamma = 1/K with no prior-estimation spend. Calibration
algebraically inverts these identities; round trips are exact to ~1e-15.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

from .model import MechanismParams, ValidationError

__all__ = [
    "CalibrationError",
    "PrivacyReport",
    "prior_budget",
    "cluster_dp_eps_delta",
    "cluster_dp_pure_eps",
    "uniform_prior_eps",
    "uniform_prior_eps_delta",
    "calibrate_lambda",
    "calibrate_lambda_uniform",
]


class CalibrationError(ValueError):
    """Requested privacy target cannot be met (CLI exit code 3)."""


@dataclass(frozen=True)
class PrivacyReport:
    """Total label-DP guarantee plus its two-stage decomposition."""

    epsilon: float
    delta: float
    prior_budget: float
    resample_budget: float

    def as_dict(self) -> dict:
        def enc(x):
            return "inf" if math.isinf(x) else x

        return {
            "epsilon": enc(self.epsilon),
            "delta": self.delta,
            "prior_budget": enc(self.prior_budget),
            "resample_budget": enc(self.resample_budget),
        }


def prior_budget(gamma: float, sigma: float, k: int | None = None) -> float:
    """Budget spent estimating the per-cluster priors: min(1/sigma, 2/gamma).

    ``sigma = inf`` contributes zero (no data-dependent noise step exists);
    when that is combined with gamma < 1/K the guarantee rests on the 2/gamma
    proof route alone, which we surface as a warning when K is supplied.
    """
    if math.isinf(sigma):
        laplace_term = 0.0
        if k is not None and gamma < 1.0 / k - 1e-12:
            warnings.warn(
                "sigma=inf with gamma < 1/K: the prior term relies on the "
                "2/gamma route; the noiseless clipped histogram still leaks",
                stacklevel=3,
            )
    elif sigma == 0.0:
        laplace_term = math.inf
    else:
        laplace_term = 1.0 / sigma
    clip_term = math.inf if gamma == 0.0 else 2.0 / gamma
    return min(laplace_term, clip_term)


def cluster_dp_eps_delta(
    params: MechanismParams, eps_tilde: float, k: int | None = None
) -> PrivacyReport:
    """(epsilon, delta) guarantee of the cluster mechanism at a chosen resampling budget."""
    if not eps_tilde > 0:
        raise ValidationError("eps_tilde must be > 0")
    prior = prior_budget(params.gamma, params.sigma, k)
    delta = max(0.0, 1.0 - params.lam - params.lam * params.gamma * math.expm1(eps_tilde))
    return PrivacyReport(
        epsilon=prior + eps_tilde,
        delta=delta,
        prior_budget=prior,
        resample_budget=eps_tilde,
    )


def cluster_dp_pure_eps(params: MechanismParams, k: int | None = None) -> float:
    """Pure epsilon: prior budget + log(1 + (1-lam)/(lam*gamma)); inf when lam or gamma is 0."""
    prior = prior_budget(params.gamma, params.sigma, k)
    if params.lam == 0.0 or params.gamma == 0.0:
        return math.inf
    return prior + math.log1p((1.0 - params.lam) / (params.lam * params.gamma))


def uniform_prior_eps(k: int, lam: float) -> float:
    """Pure epsilon of uniform resampling: log(1 + (1-lam) K / lam)."""
    if lam == 0.0:
        return math.inf
    return math.log1p((1.0 - lam) * k / lam)


def uniform_prior_eps_delta(k: int, lam: float, eps_tilde: float) -> PrivacyReport:
    """(eps_tilde, delta) guarantee of uniform resampling; no prior-estimation spend."""
    if not eps_tilde > 0:
        raise ValidationError("eps_tilde must be > 0")
    delta = max(0.0, 1.0 - lam - (lam / k) * math.expm1(eps_tilde))
    return PrivacyReport(
        epsilon=eps_tilde, delta=delta, prior_budget=0.0, resample_budget=eps_tilde
    )


def calibrate_lambda(
    target_eps: float,
    target_delta: float,
    gamma: float,
    sigma: float,
    k: int | None = None,
) -> float:
    """Largest-variance-free lam meeting (target_eps, target_delta) for the cluster mechanism.

    Splits the budget exactly as the sweep experiments do: eps_tilde is
    whatever remains after the prior spend, then lam solves the delta identity,
    lam = (1 - delta) / (1 + gamma (e^eps_tilde - 1)).
    """
    if not 0.0 <= target_delta < 1.0:
        raise ValidationError("target_delta must lie in [0, 1)")
    prior = prior_budget(gamma, sigma, k)
    eps_tilde = target_eps - prior
    if not eps_tilde > 0:
        raise CalibrationError(
            f"budget exhausted by prior estimation: target_eps={target_eps} "
            f"<= prior budget {prior}"
        )
    return (1.0 - target_delta) / (1.0 + gamma * math.expm1(eps_tilde))


def calibrate_lambda_uniform(target_eps: float, target_delta: float, k: int) -> float:
    """Inverse of the uniform-prior guarantee: lam = (1 - delta) / (1 + (e^eps - 1)/K)."""
    if not target_eps > 0:
        raise CalibrationError("target_eps must be > 0")
    if not 0.0 <= target_delta < 1.0:
        raise ValidationError("target_delta must lie in [0, 1)")
    return (1.0 - target_delta) / (1.0 + math.expm1(target_eps) / k)
