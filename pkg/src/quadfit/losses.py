"""Energy terms: keypoint reprojection, silhouette overlap, and priors.

The keypoint and silhouette terms are plain l2 norms of stacked residuals
(not squared norms); the epsilon inside ``autodiff.l2norm`` keeps their
gradients bounded at zero residual.  Both Gaussian priors are squared
Mahalanobis distances evaluated through a cached Cholesky factor, and the
mixture term is the component-weighted sum of those distances.

``total_energy`` applies the two-stage gate: stage 1 is keypoints plus the
unimodal pose/shape priors, stage 2 swaps the unimodal shape prior for the
mixture term and turns the silhouette on.  Terms with zero weight (or the
wrong stage) are never evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .camera import Camera, render_soft
from .errors import (
    DegenerateAnnotationError,
    DimensionMismatchError,
    InvalidParameterError,
    NonSPDError,
)
from .model import ParamState, TemplateModel, skin

DEFAULT_SHARPNESS = 1e-2


@dataclass(frozen=True)
class Annotation:
    """2D supervision for one image."""

    image_id: str
    width: int
    height: int
    keypoints: np.ndarray      # (K, 2) pixels
    visibility: np.ndarray     # (K,) bool
    silhouette: np.ndarray     # (H, W) bool

    def __post_init__(self):
        if self.keypoints.shape[0] != self.visibility.shape[0]:
            raise DimensionMismatchError(
                f"annotation {self.image_id}: keypoints and visibility disagree")
        if self.silhouette.shape != (self.height, self.width):
            raise DimensionMismatchError(
                f"annotation {self.image_id}: mask is {self.silhouette.shape}, "
                f"declared {(self.height, self.width)}")

    @property
    def n_visible(self) -> int:
        return int(self.visibility.sum())


@dataclass(frozen=True)
class GaussianPrior:
    """Multivariate Gaussian with cached Cholesky pieces.

    The hot path never inverts the covariance; the Mahalanobis form is
    ||L^-1 (x - mean)||^2 with L computed once here.
    """

    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray = field(init=False, repr=False)
    chol_inv: np.ndarray = field(init=False, repr=False)
    log_det: float = field(init=False, repr=False)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.shape != (mean.size, mean.size):
            raise DimensionMismatchError("prior: covariance shape does not match mean")
        if np.max(np.abs(cov - cov.T)) > 1e-10:
            raise NonSPDError("prior covariance: not symmetric within 1e-10")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise NonSPDError(f"prior covariance: not positive-definite ({exc})") from exc
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "chol", chol)
        object.__setattr__(self, "chol_inv", np.linalg.inv(chol))
        object.__setattr__(self, "log_det", float(2.0 * np.sum(np.log(np.diag(chol)))))

    @property
    def dim(self) -> int:
        return self.mean.size

    def mahalanobis_sq(self, x):
        y = ad.matmul(self.chol_inv, x - self.mean)
        return ad.vsum(y * y)

    def log_density(self, x: np.ndarray) -> float:
        d = float(self.mahalanobis_sq(np.asarray(x, dtype=np.float64)))
        return -0.5 * (self.dim * np.log(2.0 * np.pi) + self.log_det + d)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.chol @ rng.standard_normal(self.dim)


@dataclass(frozen=True)
class LossWeights:
    """Relative weights of the energy terms."""

    joints: float = 10.0
    silhouette: float = 1.0
    pose: float = 0.1
    shape: float = 0.5
    mixture: float = 0.5


@dataclass(frozen=True)
class Priors:
    """Unimodal priors plus an optional mixture for stage 2."""

    pose: GaussianPrior
    shape: GaussianPrior
    mixture: object = None  # MixturePrior, late-bound to avoid a cycle


def camera_for(params: ParamState, ann: Annotation) -> Camera:
    return Camera(focal_length=params.focal_length, width=ann.width,
                  height=ann.height, translation=params.translation)


def joint_loss(params: ParamState, model: TemplateModel, ann: Annotation,
               mesh=None):
    """l2 norm of visible keypoint reprojection residuals."""
    vis = np.asarray(ann.visibility, dtype=bool)
    if not vis.any():
        raise DegenerateAnnotationError(
            f"annotation {ann.image_id}: no visible keypoints")
    if mesh is None:
        mesh = skin(model, params, with_transforms=False)
    from .camera import project

    projected = project(mesh.joints, camera_for(params, ann))
    mapped = ad.getitem(projected, np.asarray(model.keypoint_map))
    residual = ad.getitem(mapped - ann.keypoints, vis)
    return ad.l2norm(residual)


def silhouette_loss(params: ParamState, model: TemplateModel, ann: Annotation,
                    sharpness: float = DEFAULT_SHARPNESS, mesh=None):
    """l2 difference between the soft-rendered and annotated masks."""
    if mesh is None:
        mesh = skin(model, params, with_transforms=False)
    soft = render_soft(mesh, model.faces, camera_for(params, ann), sharpness)
    target = np.asarray(ann.silhouette, dtype=np.float64)
    if ad.value_of(soft.values).shape != target.shape:
        raise DimensionMismatchError(
            f"annotation {ann.image_id}: mask shape {target.shape} does not "
            f"match render {ad.value_of(soft.values).shape}")
    return ad.l2norm(soft.values - target)


def gaussian_prior_loss(x, prior: GaussianPrior):
    """Squared Mahalanobis distance of x under the prior."""
    if ad.value_of(x).shape != (prior.dim,):
        raise DimensionMismatchError(
            f"prior loss: expected length {prior.dim}, got {ad.value_of(x).shape}")
    return prior.mahalanobis_sq(x)


def mixture_loss(beta, mix, weights: np.ndarray | None = None):
    """Weighted sum of per-component shape-prior losses.

    ``weights`` overrides the mixture weights (used for the per-image
    responsibility mode); either way they must sum to 1.
    """
    w = np.asarray(mix.weights if weights is None else weights, dtype=np.float64)
    if w.shape != (mix.n_components,):
        raise DimensionMismatchError("mixture loss: weight vector length mismatch")
    if abs(float(w.sum()) - 1.0) > 1e-6:
        raise InvalidParameterError(
            f"mixture loss: weights sum to {w.sum()!r}, expected 1")
    total = None
    for m in range(mix.n_components):
        term = float(w[m]) * mix.component(m).mahalanobis_sq(beta)
        total = term if total is None else total + term
    return total


def total_energy(params: ParamState, model: TemplateModel, ann: Annotation,
                 weights: LossWeights, priors: Priors, stage: int, *,
                 sharpness: float = DEFAULT_SHARPNESS,
                 mixture_mode: str = "pi",
                 responsibilities: np.ndarray | None = None,
                 terms: dict | None = None):
    """Stage-gated weighted sum of the energy terms.

    Stage 1: joints + pose prior + unimodal shape prior.
    Stage 2: joints + pose prior + silhouette + mixture prior.
    Unused terms are not evaluated.  When ``terms`` is a dict it receives the
    unweighted value of every evaluated term.
    """
    if stage not in (1, 2):
        raise InvalidParameterError(f"stage must be 1 or 2, got {stage}")
    if mixture_mode not in ("pi", "responsibility"):
        raise InvalidParameterError(f"unknown mixture weight mode {mixture_mode!r}")
    total = 0.0
    mesh = None
    need_mesh = weights.joints != 0 or (stage == 2 and weights.silhouette != 0)
    if need_mesh:
        mesh = skin(model, params, with_transforms=False)

    def accumulate(total, name, weight, value):
        if terms is not None:
            terms[name] = float(ad.value_of(value))
        return total + weight * value

    if weights.joints != 0:
        total = accumulate(total, "joints", weights.joints,
                           joint_loss(params, model, ann, mesh=mesh))
    if weights.pose != 0:
        total = accumulate(total, "pose", weights.pose,
                           gaussian_prior_loss(params.pose, priors.pose))
    if stage == 1:
        if weights.shape != 0:
            total = accumulate(total, "shape", weights.shape,
                               gaussian_prior_loss(params.shape, priors.shape))
    else:
        if weights.silhouette != 0:
            total = accumulate(total, "silhouette", weights.silhouette,
                               silhouette_loss(params, model, ann,
                                               sharpness=sharpness, mesh=mesh))
        if weights.mixture != 0:
            if priors.mixture is None:
                raise InvalidParameterError("stage 2 requires a mixture prior")
            override = responsibilities if mixture_mode == "responsibility" else None
            total = accumulate(total, "mixture", weights.mixture,
                               mixture_loss(params.shape, priors.mixture,
                                            weights=override))
    return total
