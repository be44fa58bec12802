"""Fit a skinned parametric quadruped to 2D keypoints and silhouettes.

Submodules:
    model      template definition, skinning, forward kinematics
    camera     projection, soft and hard silhouette rasterizers
    autodiff   reverse-mode tape and finite-difference checking
    losses     energy terms and the staged total energy
    emprior    Gaussian-mixture shape prior and EM steps
    fitter     per-image optimization and the EM-in-the-loop batch driver
    metrics    IoU and area-normalized PCK
    dataio     file formats, synthetic data, persistence
    cli        command-line interface
    zoo        bundled toy model and full-scale generator
"""

__version__ = "0.1.0"

from .model import ParamState, PosedMesh, ScaleGroup, TemplateModel  # noqa: F401
from .losses import Annotation, GaussianPrior, LossWeights, Priors  # noqa: F401
from .emprior import MixturePrior  # noqa: F401
from .fitter import FitConfig, FitReport  # noqa: F401
