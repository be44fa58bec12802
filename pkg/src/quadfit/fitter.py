"""Per-image energy minimization and the EM-in-the-loop batch driver.

Fitting runs in two stages: stage 1 minimizes keypoints plus unimodal priors
(no silhouette), stage 2 adds the silhouette term and swaps the unimodal
shape prior for the mixture prior.  The optimizer is Adam with a fresh moment
state per stage; each image returns its best-energy iterate rather than its
last, which guards against late oscillation around the soft/hard mask
mismatch.

``fit_batch_with_em`` advances all images in lockstep; every ``em_interval``
stage-2 iterations it gathers the current shape estimates, runs one E and one
M step on the mixture, and uses the refined mixture for all subsequent
evaluations.  Between those barriers images are independent, so the driver
can optionally spread them over a process pool (QUADFIT_WORKERS); results do
not depend on the worker count.
"""

from __future__ import annotations

import dataclasses
import os
import sys
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import emprior
from .errors import (
    BehindCameraError,
    DegenerateAnnotationError,
    InvalidParameterError,
    NumericalError,
    PoisonedValueError,
)
from .losses import Annotation, LossWeights, Priors, total_energy
from .model import (
    ParamState,
    TemplateModel,
    axis_angle_from_matrix,
    rodrigues,
    skin,
)

_YAW_HYPOTHESES = (0.0, 0.5 * np.pi, np.pi, 1.5 * np.pi)


@dataclass(frozen=True)
class FitConfig:
    """Schedule, optimizer, and mode settings for one run."""

    stage1_iters: int = 250
    stage2_iters: int = 150
    step_size: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    sigma: float = 1e-2            # soft-mask sharpness, normalized image units
    sigma_anneal: float = 0.5      # multiplier applied at each stage boundary
    stage_lr_decay: float = 1.0    # single multiplicative decay entering stage 2
    em_interval: int = 50          # stage-2 iterations between EM rounds
    clusters: int = 10
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    mixture_weight_mode: str = "pi"   # "pi" or "responsibility"
    tied_covariance: bool = False
    tau: float = 0.15
    init_warmup_iters: int = 10
    progress: bool = True
    # Per-part scale is observable only through the silhouette; keypoints
    # leave it nearly gauge-free against depth, so it stays frozen until the
    # silhouette term is active.
    stage1_frozen_blocks: tuple = ("log_scale",)
    # Extra covariance regularization for the in-loop mixture, as a fraction
    # of trace(shape prior cov)/B.  A corpus of a few dozen strongly
    # converged shapes can be nearly deterministic in some directions; with
    # only the SPD-level lambda the refined components turn into
    # near-deltas whose Mahalanobis pull explodes and captures the fits.
    # Standalone EM (em-refine, the emprior module) keeps the plain lambda.
    em_cov_floor: float = 0.02

    def validate(self) -> None:
        for name in ("stage1_iters", "stage2_iters", "em_interval", "clusters"):
            if getattr(self, name) < 1:
                raise InvalidParameterError(f"config: {name} must be at least 1")
        if self.step_size <= 0:
            raise InvalidParameterError("config: step_size must be positive")
        if self.sigma <= 0:
            raise InvalidParameterError("config: sigma must be positive")
        if self.mixture_weight_mode not in ("pi", "responsibility"):
            raise InvalidParameterError(
                f"config: unknown mixture_weight_mode {self.mixture_weight_mode!r}")


@dataclass(frozen=True)
class FitReport:
    """Outcome of fitting one image."""

    image_id: str
    params: ParamState
    loss_trajectory: dict[str, list]
    best_energy: list
    iterations: int
    wall_time: float
    converged: bool
    quarantined: bool = False
    responsibilities: np.ndarray | None = None


class Adam:
    """Per-block Adam with bias correction."""

    def __init__(self, lr: float, beta1: float, beta2: float, eps: float):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, blocks: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Return the update to subtract from each block."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        deltas = {}
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(blocks[k])
                self.v[k] = np.zeros_like(blocks[k])
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[k] / bc1
            vhat = self.v[k] / bc2
            deltas[k] = self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return deltas


def _blocks_of(params: ParamState) -> dict[str, np.ndarray]:
    return {
        "pose": np.asarray(params.pose, dtype=np.float64),
        "shape": np.asarray(params.shape, dtype=np.float64),
        "log_scale": np.asarray(params.log_scale, dtype=np.float64),
        "translation": np.asarray(params.translation, dtype=np.float64),
        "focal": np.atleast_1d(np.float64(params.focal_length)),
    }


def _params_from_blocks(blocks: dict[str, np.ndarray]) -> ParamState:
    return ParamState(
        pose=blocks["pose"].copy(),
        shape=blocks["shape"].copy(),
        log_scale=blocks["log_scale"].copy(),
        translation=blocks["translation"].copy(),
        focal_length=float(blocks["focal"][0]),
    )


def _state_ok(params: ParamState, model: TemplateModel) -> bool:
    """Candidate acceptance: in front of the camera with sane scalars."""
    if params.focal_length <= 0 or params.translation[2] <= 0:
        return False
    try:
        mesh = skin(model, params, with_transforms=False)
    except (InvalidParameterError, NumericalError):
        return False
    z = np.asarray(ad.value_of(mesh.vertices))[:, 2] + params.translation[2]
    return bool(np.all(z > 0) and np.all(np.isfinite(z)))


def init_params(ann: Annotation, model: TemplateModel, priors: Priors,
                config: FitConfig | None = None) -> ParamState:
    """Prior-mean start with camera placed from the silhouette.

    Depth comes from matching the projected mesh bounding box to the
    silhouette bounding box (similar triangles), the in-plane offset from
    centroid alignment, and the global yaw from the best of four canonical
    hypotheses after a short stage-1 warmup.
    """
    config = config or FitConfig()
    sil = np.asarray(ann.silhouette, dtype=bool)
    if not sil.any():
        raise DegenerateAnnotationError(f"annotation {ann.image_id}: empty silhouette")
    if not np.asarray(ann.visibility, dtype=bool).any():
        raise DegenerateAnnotationError(f"annotation {ann.image_id}: no visible keypoints")
    rows, cols = np.nonzero(sil)
    sil_diag = float(np.hypot(rows.max() - rows.min() + 1, cols.max() - cols.min() + 1))
    sil_centroid = np.array([cols.mean() + 0.5, rows.mean() + 0.5])
    focal = float(max(ann.width, ann.height))

    base_pose = priors.pose.mean.copy()
    root = base_pose[:3]
    candidates = []
    for yaw in _YAW_HYPOTHESES:
        pose = base_pose.copy()
        yaw_rot = rodrigues(np.array([0.0, yaw, 0.0]))
        pose[:3] = axis_angle_from_matrix(np.asarray(yaw_rot) @ np.asarray(rodrigues(root)))
        params = ParamState(
            pose=pose,
            shape=priors.shape.mean.copy(),
            log_scale=np.zeros(model.n_scale_groups),
            translation=np.array([0.0, 0.0, 1.0]),
            focal_length=focal,
        )
        params = _place_camera(params, model, ann, sil_diag, sil_centroid)
        candidates.append(params)

    if len(candidates) == 1 or config.init_warmup_iters == 0:
        best = candidates[0]
        if config.init_warmup_iters == 0:
            return best
    best_params, best_energy = None, np.inf
    for params in candidates:
        warmed, energy = _warmup(params, model, ann, priors, config)
        if energy < best_energy:
            best_params, best_energy = warmed, energy
    return best_params


def _place_camera(params: ParamState, model: TemplateModel, ann: Annotation,
                  sil_diag: float, sil_centroid: np.ndarray) -> ParamState:
    """Similar-triangles depth plus centroid alignment for one pose."""
    mesh = skin(model, params, with_transforms=False)
    verts = np.asarray(ad.value_of(mesh.vertices))
    extent = verts.max(axis=0) - verts.min(axis=0)
    world_diag = float(np.hypot(extent[0], extent[1]))
    f = params.focal_length
    tz = f * world_diag / max(sil_diag, 1.0)
    tz = max(tz, 2.0 * (abs(float(verts[:, 2].min())) + 1e-6))
    centroid = verts.mean(axis=0)
    cx, cy = ann.width / 2.0, ann.height / 2.0
    zbar = centroid[2] + tz
    tx = (sil_centroid[0] - cx) * zbar / f - centroid[0]
    ty = (sil_centroid[1] - cy) * zbar / f - centroid[1]
    return replace(params, translation=np.array([tx, ty, tz]))


def _warmup(params: ParamState, model: TemplateModel, ann: Annotation,
            priors: Priors, config: FitConfig) -> tuple[ParamState, float]:
    """A few stage-1 steps; returns the updated params and their energy."""
    adam = Adam(config.step_size, config.beta1, config.beta2, config.adam_eps)

    def energy(p):
        return total_energy(p, model, ann, config.weights, priors, stage=1)

    current = params
    with np.errstate(all="ignore"):
        for _ in range(config.init_warmup_iters):
            _, grads = ad.record_and_backward(energy, current)
            for name in config.stage1_frozen_blocks:
                grads[name] = np.zeros_like(grads[name])
            deltas = adam.step(_blocks_of(current), grads)
            current = _apply_step(current, deltas, model)
        return current, float(ad.value_of(energy(current)))


def _apply_step(params: ParamState, deltas: dict[str, np.ndarray],
                model: TemplateModel, max_halvings: int = 10) -> ParamState:
    """Apply an update, halving it while the result is behind the camera."""
    scale = 1.0
    blocks = _blocks_of(params)
    for _ in range(max_halvings + 1):
        candidate = _params_from_blocks(
            {k: blocks[k] - scale * deltas[k] for k in blocks})
        if _state_ok(candidate, model):
            return candidate
        scale *= 0.5
    return params  # reject the step entirely


@dataclass
class _ImageState:
    """Mutable per-image optimizer bookkeeping inside a run."""

    index: int
    ann: Annotation
    params: ParamState
    adam: Adam
    trajectory: dict[str, list] = field(default_factory=dict)
    best_energy: list = field(default_factory=list)
    best_params: ParamState | None = None
    best_value: float = np.inf
    iterations: int = 0
    quarantined: bool = False
    abort_reason: Exception | None = None

    def record(self, terms: dict, total: float) -> None:
        self.trajectory.setdefault("total", []).append(total)
        for name, value in terms.items():
            self.trajectory.setdefault(name, []).append(value)
        if total < self.best_value:
            self.best_value = total
            self.best_params = self.params
        self.best_energy.append(self.best_value)
        self.iterations += 1


def _advance(state: _ImageState, model: TemplateModel, priors: Priors,
             config: FitConfig, stage: int, sharpness: float, mix,
             progress_iter: int | None = None) -> None:
    """One gradient step on one image (no-op when quarantined)."""
    if state.quarantined:
        return
    resp = None
    if (mix is not None and config.mixture_weight_mode == "responsibility"
            and mix.responsibilities.shape[0] > state.index):
        resp = mix.responsibilities[state.index]
    terms: dict = {}
    run_priors = dataclasses.replace(priors, mixture=mix)

    def energy(p):
        return total_energy(p, model, state.ann, config.weights, run_priors,
                            stage=stage, sharpness=sharpness,
                            mixture_mode=config.mixture_weight_mode,
                            responsibilities=resp, terms=terms)

    try:
        # NaN/Inf surfaces as PoisonedValueError; silence numpy's warnings on
        # the way there.
        with np.errstate(all="ignore"):
            value, grads = ad.record_and_backward(energy, state.params)
    except (PoisonedValueError, BehindCameraError) as exc:
        state.quarantined = True
        state.abort_reason = exc
        print(f"[fit] image={state.ann.image_id} quarantined: {exc}",
              file=sys.stderr)
        return
    state.record(terms, value)
    if stage == 1:
        for name in config.stage1_frozen_blocks:
            grads[name] = np.zeros_like(grads[name])
    deltas = state.adam.step(_blocks_of(state.params), grads)
    state.params = _apply_step(state.params, deltas, model)
    if progress_iter is not None and config.progress:
        print(f"[fit] image={state.ann.image_id} stage={stage} "
              f"iter={progress_iter} energy={value:.6f}", file=sys.stderr)


def _finish(state: _ImageState, mix, wall_time: float) -> FitReport:
    params = state.best_params if state.best_params is not None else state.params
    resp = None
    if mix is not None and not state.quarantined:
        beta = np.asarray(params.shape, dtype=np.float64).reshape(1, -1)
        try:
            resp = emprior.e_step(mix, beta).responsibilities[0]
        except NumericalError:
            resp = None
    return FitReport(
        image_id=state.ann.image_id,
        params=params,
        loss_trajectory=state.trajectory,
        best_energy=state.best_energy,
        iterations=state.iterations,
        wall_time=wall_time,
        converged=not state.quarantined,
        quarantined=state.quarantined,
        responsibilities=resp,
    )


def fit_single(ann: Annotation, model: TemplateModel, priors: Priors,
               mix=None, config: FitConfig | None = None,
               init: ParamState | None = None,
               stages: tuple[int, ...] = (1, 2)) -> FitReport:
    """Two-stage fit of one image; returns the best-energy iterate.

    A NaN/Inf during the energy evaluation aborts the fit with the poisoning
    diagnostics (the batch driver quarantines instead).  ``stages`` restricts
    the run to a subset of the schedule, e.g. ``(1,)`` for stage 1 only.
    """
    config = config or FitConfig()
    config.validate()
    if mix is None:
        mix = emprior.init_mixture(priors.shape, config.clusters, config.seed,
                                   n_images=1,
                                   tied_covariance=config.tied_covariance)
    start = time.perf_counter()
    params = init if init is not None else init_params(ann, model, priors, config)
    state = _ImageState(index=0, ann=ann, params=params,
                        adam=Adam(config.step_size, config.beta1, config.beta2,
                                  config.adam_eps))
    _run_schedule([state], model, priors, config, mix, use_em=False,
                  stages=stages)
    if state.quarantined and state.abort_reason is not None:
        raise state.abort_reason
    return _finish(state, mix, time.perf_counter() - start)


def _run_segment(args) -> _ImageState:
    """Advance one image through a contiguous block of iterations."""
    state, model, priors, config, stage, sharpness, mix, iters, start_iter = args
    for k in range(1, iters + 1):
        it = start_iter + k
        _advance(state, model, priors, config, stage=stage, sharpness=sharpness,
                 mix=mix, progress_iter=it if it % 10 == 0 else None)
    return state


def _run_schedule(states: list[_ImageState], model: TemplateModel,
                  priors: Priors, config: FitConfig, mix, use_em: bool,
                  stages: tuple[int, ...] = (1, 2), on_em=None):
    """Shared two-stage schedule over a set of images; returns the mixture.

    Images are advanced in independent segments between EM barriers, so the
    segments may run on a worker pool without changing the results.  ``on_em``
    is called with (mixture, round_index) after every EM firing.
    """
    n_workers = _worker_count()
    if 1 in stages:
        args = [(s, model, priors, config, 1, config.sigma, mix,
                 config.stage1_iters, 0) for s in states]
        states[:] = _map_images(args, _run_segment, n_workers)

    if 2 not in stages:
        return mix
    sharpness = config.sigma * config.sigma_anneal
    stage2_cfg = dataclasses.replace(
        config, step_size=config.step_size * config.stage_lr_decay)
    for state in states:
        state.adam = Adam(stage2_cfg.step_size, config.beta1, config.beta2,
                          config.adam_eps)
        # Stage energies are not comparable (stage 2 adds the silhouette
        # term), so stage 2 resumes from stage 1's best iterate and tracks
        # its own best from scratch.
        if state.best_params is not None:
            state.params = state.best_params
        state.best_params = None
        state.best_value = np.inf
    done = 0
    em_rounds = 0
    while done < config.stage2_iters:
        seg = config.stage2_iters - done
        if use_em:
            to_barrier = config.em_interval - done % config.em_interval
            seg = min(seg, to_barrier)
        args = [(s, model, priors, stage2_cfg, 2, sharpness, mix, seg, done)
                for s in states]
        states[:] = _map_images(args, _run_segment, n_workers)
        done += seg
        if use_em and done % config.em_interval == 0:
            mix = _em_round(states, mix)
            em_rounds += 1
            if on_em is not None:
                on_em(mix, em_rounds)
    return mix


def _em_round(states: list[_ImageState], mix):
    """Gather current shapes, run one E and one M step, log likelihoods."""
    live = [s for s in states if not s.quarantined]
    if not live:
        return mix
    betas = np.stack([np.asarray(s.params.shape, dtype=np.float64) for s in live])
    ll_before = emprior.log_likelihood(mix, betas)
    # Responsibilities are persisted across rounds but re-estimated from the
    # freshly gathered shapes before every M step.
    stepped = emprior.e_step(mix, betas)
    stepped = emprior.m_step(stepped, betas)
    ll_after = emprior.log_likelihood(stepped, betas)
    events = stepped.em_events + (
        {"event": "em_round", "n_images": len(live),
         "log_likelihood_before": ll_before,
         "log_likelihood_after": ll_after},)
    return dataclasses.replace(stepped, em_events=events)


def fit_batch_with_em(anns: list[Annotation], model: TemplateModel,
                      priors: Priors, config: FitConfig | None = None,
                      use_em: bool = True, stages: tuple[int, ...] = (1, 2),
                      on_em=None):
    """Fit a corpus on the shared schedule, refining the mixture prior.

    Returns (reports, mixture).  Images that hit a numerical abort are
    quarantined: they keep their last good parameters, are excluded from EM
    gathering, and do not affect other images.
    """
    config = config or FitConfig()
    config.validate()
    if len(anns) < config.clusters:
        print(f"[fit] warning: {len(anns)} images for {config.clusters} "
              "mixture components", file=sys.stderr)
    ids = [ann.image_id for ann in anns]
    if len(set(ids)) != len(ids):
        raise InvalidParameterError("fit_batch: duplicate image ids")
    mix = emprior.init_mixture(priors.shape, config.clusters, config.seed,
                               n_images=len(anns),
                               tied_covariance=config.tied_covariance)
    if config.em_cov_floor > 0:
        floor = config.em_cov_floor * float(np.trace(priors.shape.cov)) \
            / priors.shape.dim
        mix = dataclasses.replace(mix, reg_lambda=max(mix.reg_lambda, floor))
    start = time.perf_counter()
    states = []
    n_workers = _worker_count()
    inits = _map_images(
        [(ann, model, priors, config) for ann in anns],
        _init_one, n_workers)
    for i, (ann, (params, abort)) in enumerate(zip(anns, inits)):
        state = _ImageState(
            index=i, ann=ann, params=params,
            adam=Adam(config.step_size, config.beta1, config.beta2,
                      config.adam_eps))
        if abort is not None:
            state.quarantined = True
            state.abort_reason = abort
            print(f"[fit] image={ann.image_id} quarantined at init: {abort}",
                  file=sys.stderr)
        states.append(state)
    mix = _run_schedule(states, model, priors, config, mix, use_em=use_em,
                        stages=stages, on_em=on_em)
    elapsed = time.perf_counter() - start
    reports = [_finish(state, mix, elapsed) for state in states]
    return reports, mix


def _init_one(args):
    """Initialize one image; numerical aborts come back for quarantining."""
    ann, model, priors, config = args
    try:
        with np.errstate(all="ignore"):
            return init_params(ann, model, priors, config), None
    except (PoisonedValueError, BehindCameraError) as exc:
        fallback = ParamState(
            pose=priors.pose.mean.copy(),
            shape=priors.shape.mean.copy(),
            log_scale=np.zeros(model.n_scale_groups),
            translation=np.array([0.0, 0.0, 1.0]),
            focal_length=float(max(ann.width, ann.height)))
        return fallback, exc


def _worker_count() -> int:
    raw = os.environ.get("QUADFIT_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _map_images(items, fn, n_workers: int):
    """Order-preserving map, optionally over a process pool."""
    if n_workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    import multiprocessing as mp

    with mp.get_context("fork").Pool(min(n_workers, len(items))) as pool:
        return pool.map(fn, items)
