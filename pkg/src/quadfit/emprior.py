"""Mixture-of-Gaussians shape prior refined by expectation maximization.

The mixture is immutable; ``e_step`` and ``m_step`` return new instances, so
a batch driver can hand the current mixture to concurrent per-image work and
swap in the updated one at a barrier.  All densities are computed in log
space and normalized with log-sum-exp; no raw Gaussian density is ever
exponentiated before normalization.

The covariance update recenters on the new component mean (the standard EM
M step) and adds ``reg_lambda * I`` each round so near-singular
responsibilities cannot produce a non-SPD component.  A component whose
effective weight collapses below 1e-8 * N is reseeded from the stored
unimodal prior and logged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidParameterError, NumericalDegeneracyError
from .losses import GaussianPrior

log = logging.getLogger(__name__)

_COLLAPSE_FRACTION = 1e-8


@dataclass(frozen=True)
class MixturePrior:
    """M Gaussian components plus per-image responsibilities."""

    means: np.ndarray             # (M, B)
    covs: np.ndarray              # (M, B, B)
    weights: np.ndarray           # (M,), sums to 1
    responsibilities: np.ndarray  # (N, M), rows sum to 1
    unimodal_mean: np.ndarray     # reseed source
    unimodal_cov: np.ndarray
    reg_lambda: float
    seed: int = 0
    reseed_count: int = 0
    tied_covariance: bool = False
    em_events: tuple = ()
    _components: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        covs = np.asarray(self.covs, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        resp = np.asarray(self.responsibilities, dtype=np.float64)
        if means.ndim != 2 or covs.shape != (means.shape[0], means.shape[1], means.shape[1]):
            raise InvalidParameterError("mixture: means/covs shapes disagree")
        if weights.shape != (means.shape[0],):
            raise InvalidParameterError("mixture: weight vector length mismatch")
        if abs(float(weights.sum()) - 1.0) > 1e-9:
            raise InvalidParameterError(
                f"mixture: weights sum to {weights.sum()!r}, expected 1 within 1e-9")
        if resp.size and (resp.ndim != 2 or resp.shape[1] != means.shape[0]):
            raise InvalidParameterError("mixture: responsibilities shape mismatch")
        if resp.size:
            rows = resp.sum(axis=1)
            if np.max(np.abs(rows - 1.0)) > 1e-9:
                raise InvalidParameterError(
                    "mixture: a responsibility row does not sum to 1 within 1e-9")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "responsibilities", resp)
        comps = tuple(GaussianPrior(means[m], covs[m]) for m in range(means.shape[0]))
        object.__setattr__(self, "_components", comps)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component(self, m: int) -> GaussianPrior:
        return self._components[m]


def default_reg_lambda(unimodal: GaussianPrior) -> float:
    return 1e-6 * float(np.trace(unimodal.cov)) / unimodal.dim


def init_mixture(unimodal: GaussianPrior, m_components: int, rng_seed: int,
                 n_images: int = 0, tied_covariance: bool = False) -> MixturePrior:
    """Components sampled from the unimodal prior, weights 1/M, uniform
    responsibilities."""
    if m_components < 1:
        raise InvalidParameterError("mixture needs at least one component")
    rng = np.random.default_rng(rng_seed)
    means = np.stack([unimodal.sample(rng) for _ in range(m_components)])
    covs = np.broadcast_to(unimodal.cov, (m_components,) + unimodal.cov.shape).copy()
    weights = np.full(m_components, 1.0 / m_components)
    resp = np.full((n_images, m_components), 1.0 / m_components)
    return MixturePrior(
        means=means, covs=covs, weights=weights, responsibilities=resp,
        unimodal_mean=unimodal.mean.copy(), unimodal_cov=unimodal.cov.copy(),
        reg_lambda=default_reg_lambda(unimodal), seed=rng_seed,
        tied_covariance=tied_covariance)


def _log_joint(mix: MixturePrior, betas: np.ndarray) -> np.ndarray:
    """(N, M) array of log(weight_m) + log N(beta_i | component m)."""
    n = betas.shape[0]
    out = np.empty((n, mix.n_components))
    for m in range(mix.n_components):
        comp = mix.component(m)
        y = (betas - comp.mean) @ comp.chol_inv.T
        maha = np.einsum("ij,ij->i", y, y)
        out[:, m] = -0.5 * (mix.dim * np.log(2.0 * np.pi) + comp.log_det + maha)
    with np.errstate(divide="ignore"):
        out += np.log(mix.weights)[None, :]
    return out


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    # degenerate rows surface as inf/-inf and raise downstream
    with np.errstate(over="ignore", divide="ignore"):
        out = amax + np.log(np.sum(np.exp(a - amax), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def e_step(mix: MixturePrior, betas: np.ndarray) -> MixturePrior:
    """Posterior responsibilities for each beta row; returns a new mixture."""
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 2 or betas.shape[0] < 1 or betas.shape[1] != mix.dim:
        raise InvalidParameterError("e_step expects a nonempty (N, B) array")
    lj = _log_joint(mix, betas)
    norm = _logsumexp(lj, axis=1)
    bad = np.nonzero(~np.isfinite(norm))[0]
    if bad.size:
        raise NumericalDegeneracyError(
            f"all mixture densities underflowed for data row {bad[0]}")
    resp = np.exp(lj - norm[:, None])
    resp /= resp.sum(axis=1, keepdims=True)  # exact row-stochastic rows
    return replace(mix, responsibilities=resp)


def m_step(mix: MixturePrior, betas: np.ndarray) -> MixturePrior:
    """Weighted mean/covariance/weight updates from the held responsibilities."""
    betas = np.asarray(betas, dtype=np.float64)
    n = betas.shape[0]
    resp = mix.responsibilities
    if resp.shape != (n, mix.n_components):
        raise InvalidParameterError(
            "m_step: responsibilities do not match the data; run e_step first")
    eff = resp.sum(axis=0)                                 # (M,)
    weights = eff / n
    means = np.empty_like(mix.means)
    covs = np.empty_like(mix.covs)
    reseed_count = mix.reseed_count
    events = list(mix.em_events)
    collapsed = eff < _COLLAPSE_FRACTION * n
    for m in range(mix.n_components):
        if collapsed[m]:
            reseed_count += 1
            rng = np.random.default_rng((mix.seed, 0x5EED, reseed_count))
            unimodal = GaussianPrior(mix.unimodal_mean, mix.unimodal_cov)
            means[m] = unimodal.sample(rng)
            covs[m] = mix.unimodal_cov + mix.reg_lambda * np.eye(mix.dim)
            weights[m] = 1.0 / n
            log.warning("mixture component %d collapsed (effective weight %.3g); reseeded",
                        m, eff[m])
            events.append({"event": "component_reseed", "component": m,
                           "effective_weight": float(eff[m])})
            continue
        mu = resp[:, m] @ betas / eff[m]
        centered = betas - mu
        cov = (resp[:, m] * centered.T) @ centered / eff[m]
        means[m] = mu
        covs[m] = cov + mix.reg_lambda * np.eye(mix.dim)
    if mix.tied_covariance:
        pooled = np.einsum("m,mij->ij", eff / eff.sum(), covs)
        covs = np.broadcast_to(pooled, covs.shape).copy()
    weights = weights / weights.sum()
    return replace(mix, means=means, covs=covs, weights=weights,
                   reseed_count=reseed_count, em_events=tuple(events))


def log_likelihood(mix: MixturePrior, betas: np.ndarray) -> float:
    """Total data log-likelihood under the mixture (log-sum-exp stabilized)."""
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 2 or betas.shape[0] < 1:
        raise InvalidParameterError("log_likelihood expects a nonempty (N, B) array")
    lj = _log_joint(mix, betas)
    return float(np.sum(_logsumexp(lj, axis=1)))
