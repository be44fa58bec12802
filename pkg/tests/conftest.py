import numpy as np
import pytest

from quadfit.camera import Camera, project, render_hard
from quadfit.losses import Annotation, Priors
from quadfit.model import ParamState, skin
from quadfit.zoo import build_toy_model


@pytest.fixture(scope="session")
def toy():
    model, pose_prior, shape_prior = build_toy_model()
    return model, Priors(pose=pose_prior, shape=shape_prior)


@pytest.fixture(scope="session")
def toy_model(toy):
    return toy[0]


@pytest.fixture(scope="session")
def toy_priors(toy):
    return toy[1]


def make_annotation(model, priors, params: ParamState, size=(64, 64),
                    image_id="synth") -> Annotation:
    """Render an exact annotation from known parameters."""
    w, h = size
    cam = Camera(focal_length=params.focal_length, width=w, height=h,
                 translation=params.translation)
    mesh = skin(model, params)
    mask = render_hard(mesh, model.faces, cam)
    kps = np.asarray(project(np.asarray(mesh.joints), cam))
    kps = kps[np.asarray(model.keypoint_map)]
    return Annotation(image_id=image_id, width=w, height=h, keypoints=kps,
                      visibility=np.ones(kps.shape[0], dtype=bool),
                      silhouette=mask)


def sample_params(model, priors, rng, t=np.array([0.0, 0.0, 5.0]),
                  focal=64.0) -> ParamState:
    return ParamState(
        pose=priors.pose.sample(rng),
        shape=priors.shape.sample(rng),
        log_scale=rng.normal(0.0, 0.04, model.n_scale_groups),
        translation=np.asarray(t, dtype=np.float64),
        focal_length=focal,
    )
