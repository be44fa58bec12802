"""File formats, dataset loading, synthetic corpora, and persistence.

Everything is human-diffable structured text (JSON with sorted keys and a
frozen ``format_version``) except silhouettes, which are 8-bit grayscale
PNGs (0 background, nonzero foreground).  Dense matrices are stored as
nested arrays; the two big sparse matrices (joint regressor, skin weights)
as (row, col, value) triplets.  Writers emit canonical bytes, so every
save/load pair round-trips byte-identically and repeated runs with the same
seed produce identical files.  Wall-clock times are deliberately left out of
all persisted records for that reason.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera, load_mask_png, project, render_hard, save_mask_png
from .emprior import MixturePrior
from .errors import SchemaError
from .fitter import FitConfig, FitReport
from .losses import Annotation, GaussianPrior, LossWeights, Priors
from .model import AXES, ParamState, ScaleGroup, TemplateModel, rodrigues, skin
from .model import axis_angle_from_matrix

log = logging.getLogger(__name__)

FORMAT_VERSION = "1"


# ---------------------------------------------------------------------------
# canonical JSON
# ---------------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def dump_json(path, payload: dict) -> None:
    text = json.dumps(_jsonable(payload), sort_keys=True, indent=2)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def load_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise SchemaError(f"{path}: cannot read ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc


def _require(doc: dict, keys: set[str], where: str, optional: set[str] = frozenset()):
    missing = keys - doc.keys()
    if missing:
        raise SchemaError(f"{where}: missing field {sorted(missing)[0]!r}")
    unknown = doc.keys() - keys - optional
    if unknown:
        raise SchemaError(f"{where}: unknown field {sorted(unknown)[0]!r}")


def _check_version(doc: dict, where: str) -> None:
    if doc.get("format_version") != FORMAT_VERSION:
        raise SchemaError(
            f"{where}: format_version {doc.get('format_version')!r} not recognized")


# ---------------------------------------------------------------------------
# sparse matrix triplets
# ---------------------------------------------------------------------------

def _to_triplets(mat: np.ndarray) -> dict:
    rows, cols = np.nonzero(mat)
    return {"shape": [int(mat.shape[0]), int(mat.shape[1])],
            "triplets": [[int(r), int(c), float(mat[r, c])]
                         for r, c in zip(rows, cols)]}


def _from_triplets(doc: dict, where: str) -> np.ndarray:
    _require(doc, {"shape", "triplets"}, where)
    shape = tuple(doc["shape"])
    out = np.zeros(shape, dtype=np.float64)
    for entry in doc["triplets"]:
        r, c, v = entry
        if not (0 <= r < shape[0] and 0 <= c < shape[1]):
            raise SchemaError(f"{where}: triplet index ({r}, {c}) out of range")
        out[r, c] = v
    return out


# ---------------------------------------------------------------------------
# model file
# ---------------------------------------------------------------------------

_MODEL_KEYS = {"format_version", "name", "vertices", "faces", "kintree_parents",
               "joint_regressor", "skin_weights", "blend_basis", "scale_groups",
               "pose_prior", "shape_prior", "keypoint_map", "joint_groups"}


def save_model(path, model: TemplateModel, pose_prior: GaussianPrior,
               shape_prior: GaussianPrior) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "name": model.name,
        "vertices": model.rest_vertices,
        "faces": model.faces,
        "kintree_parents": model.kintree_parents,
        "joint_regressor": _to_triplets(model.joint_regressor),
        "skin_weights": _to_triplets(model.skin_weights),
        "blend_basis": model.blend_basis,
        "scale_groups": [{"name": g.name,
                          "entries": [[int(j), a] for j, a in g.entries]}
                         for g in model.scale_groups],
        "pose_prior": {"mean": pose_prior.mean, "cov": pose_prior.cov},
        "shape_prior": {"mean": shape_prior.mean, "cov": shape_prior.cov},
        "keypoint_map": model.keypoint_map,
        "joint_groups": {k: list(v) for k, v in model.joint_groups.items()},
    }
    if model.symmetry_pairs is not None:
        payload["symmetry_pairs"] = [[int(a), int(b)] for a, b in model.symmetry_pairs]
    dump_json(path, payload)


def load_model(path) -> tuple[TemplateModel, Priors]:
    doc = load_json(path)
    where = os.path.basename(str(path))
    _require(doc, _MODEL_KEYS, where, optional={"symmetry_pairs"})
    _check_version(doc, where)

    def arr(key, dtype=np.float64):
        try:
            return np.asarray(doc[key], dtype=dtype)
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"{where}: field {key!r} is not a numeric array") from exc

    groups = []
    for g in doc["scale_groups"]:
        _require(g, {"name", "entries"}, f"{where}: scale_groups")
        entries = []
        for j, axis in g["entries"]:
            if axis not in AXES:
                raise SchemaError(f"{where}: scale_groups axis {axis!r}")
            entries.append((int(j), str(axis)))
        groups.append(ScaleGroup(str(g["name"]), tuple(entries)))
    joint_groups = {str(k): tuple(int(i) for i in v)
                    for k, v in doc["joint_groups"].items()}
    symmetry = None
    if "symmetry_pairs" in doc:
        symmetry = tuple((int(a), int(b)) for a, b in doc["symmetry_pairs"])
    model = TemplateModel(
        rest_vertices=arr("vertices"),
        faces=arr("faces", np.int64),
        kintree_parents=arr("kintree_parents", np.int64),
        joint_regressor=_from_triplets(doc["joint_regressor"],
                                       f"{where}: joint_regressor"),
        skin_weights=_from_triplets(doc["skin_weights"], f"{where}: skin_weights"),
        blend_basis=arr("blend_basis"),
        scale_groups=tuple(groups),
        keypoint_map=arr("keypoint_map", np.int64),
        joint_groups=joint_groups,
        symmetry_pairs=symmetry,
        name=str(doc["name"]),
    )
    model.validate()
    for key in ("pose_prior", "shape_prior"):
        _require(doc[key], {"mean", "cov"}, f"{where}: {key}")
    try:
        pose_prior = GaussianPrior(np.asarray(doc["pose_prior"]["mean"], np.float64),
                                   np.asarray(doc["pose_prior"]["cov"], np.float64))
    except SchemaError as exc:
        raise type(exc)(f"{where}: pose_prior: {exc}") from exc
    try:
        shape_prior = GaussianPrior(np.asarray(doc["shape_prior"]["mean"], np.float64),
                                    np.asarray(doc["shape_prior"]["cov"], np.float64))
    except SchemaError as exc:
        raise type(exc)(f"{where}: shape_prior: {exc}") from exc
    if pose_prior.dim != model.n_joints * 3:
        raise SchemaError(f"{where}: pose_prior: dimension does not match joints")
    if shape_prior.dim != model.n_shapes:
        raise SchemaError(f"{where}: shape_prior: dimension does not match basis")
    return model, Priors(pose=pose_prior, shape=shape_prior)


# ---------------------------------------------------------------------------
# annotations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LoadSummary:
    loaded: int
    skipped: int
    rejected: int
    reasons: tuple[str, ...] = ()

    @property
    def total(self) -> int:
        return self.loaded + self.skipped + self.rejected


def save_annotations(path, anns: list[Annotation], mask_dir) -> None:
    """Write the annotation index plus one PNG mask per image."""
    os.makedirs(mask_dir, exist_ok=True)
    images = []
    base = os.path.dirname(os.path.abspath(str(path)))
    for ann in anns:
        mask_path = os.path.join(mask_dir, f"{ann.image_id}.png")
        save_mask_png(mask_path, ann.silhouette)
        kps = np.concatenate([ann.keypoints,
                              ann.visibility.astype(np.float64)[:, None]], axis=1)
        images.append({
            "id": ann.image_id,
            "width": ann.width,
            "height": ann.height,
            "keypoints": kps,
            "mask": os.path.relpath(mask_path, base),
        })
    dump_json(path, {"format_version": FORMAT_VERSION, "images": images})


def load_annotations(path, mask_dir=None, strict: bool = True
                     ) -> tuple[list[Annotation], LoadSummary]:
    """Read annotations; images with no visible keypoint are skipped.

    ``strict`` raises on the first malformed record; otherwise bad records
    are counted as rejected in the summary.
    """
    doc = load_json(path)
    where = os.path.basename(str(path))
    _require(doc, {"format_version", "images"}, where)
    _check_version(doc, where)
    base = mask_dir if mask_dir is not None else os.path.dirname(os.path.abspath(str(path)))
    anns: list[Annotation] = []
    skipped = rejected = 0
    reasons: list[str] = []

    def reject(msg: str):
        nonlocal rejected
        if strict:
            raise SchemaError(msg)
        rejected += 1
        reasons.append(msg)

    for rec in doc["images"]:
        try:
            _require(rec, {"id", "width", "height", "keypoints", "mask"},
                     f"{where}: image record")
            image_id = str(rec["id"])
            kps = np.asarray(rec["keypoints"], dtype=np.float64)
            if kps.ndim != 2 or kps.shape[1] != 3:
                raise SchemaError(f"{where}: image {image_id}: keypoints must be K x 3")
            mask_path = os.path.join(base, rec["mask"])
            if not os.path.exists(mask_path):
                raise SchemaError(f"{where}: image {image_id}: missing mask {rec['mask']!r}")
            mask = load_mask_png(mask_path)
            if mask.shape != (int(rec["height"]), int(rec["width"])):
                raise SchemaError(
                    f"{where}: image {image_id}: mask is {mask.shape}, "
                    f"declared {(int(rec['height']), int(rec['width']))}")
            visibility = kps[:, 2] > 0.5
            ann = Annotation(image_id=image_id, width=int(rec["width"]),
                             height=int(rec["height"]), keypoints=kps[:, :2],
                             visibility=visibility, silhouette=mask)
        except SchemaError as exc:
            reject(str(exc))
            continue
        if not ann.visibility.any():
            log.warning("annotation %s has no visible keypoints; skipped", ann.image_id)
            skipped += 1
            continue
        anns.append(ann)
    return anns, LoadSummary(len(anns), skipped, rejected, tuple(reasons))


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

_CONFIG_KEYS = {"format_version", "model", "annotations", "out"}
_FIT_KEYS = {"stage1_iters", "stage2_iters", "step_size", "beta1", "beta2",
             "adam_eps", "sigma", "sigma_anneal", "stage_lr_decay",
             "em_interval", "clusters", "weights", "seed",
             "mixture_weight_mode", "tied_covariance", "tau",
             "init_warmup_iters", "progress", "stage1_frozen_blocks",
             "em_cov_floor"}
_WEIGHT_KEYS = {"joints", "silhouette", "pose", "shape", "mixture"}


@dataclass(frozen=True)
class RunConfig:
    """A FitConfig plus the file paths a CLI run needs."""

    fit: FitConfig
    model_path: str | None = None
    annotations_path: str | None = None
    out_dir: str | None = None


def save_run_config(path, run: RunConfig) -> None:
    fit = dataclasses.asdict(run.fit)
    fit["weights"] = dataclasses.asdict(run.fit.weights)
    payload = {"format_version": FORMAT_VERSION,
               "model": run.model_path, "annotations": run.annotations_path,
               "out": run.out_dir, **fit}
    dump_json(path, payload)


def load_run_config(path) -> RunConfig:
    doc = load_json(path)
    where = os.path.basename(str(path))
    _require(doc, {"format_version"}, where, optional=_CONFIG_KEYS | _FIT_KEYS)
    _check_version(doc, where)
    fit_kwargs = {}
    for key in _FIT_KEYS - {"weights"}:
        if key in doc:
            fit_kwargs[key] = doc[key]
    if "stage1_frozen_blocks" in fit_kwargs:
        fit_kwargs["stage1_frozen_blocks"] = tuple(fit_kwargs["stage1_frozen_blocks"])
    if "weights" in doc:
        _require(doc["weights"], set(), f"{where}: weights", optional=_WEIGHT_KEYS)
        fit_kwargs["weights"] = LossWeights(**doc["weights"])
    try:
        fit = FitConfig(**fit_kwargs)
    except TypeError as exc:
        raise SchemaError(f"{where}: bad fit configuration ({exc})") from exc
    fit.validate()
    return RunConfig(fit=fit, model_path=doc.get("model"),
                     annotations_path=doc.get("annotations"),
                     out_dir=doc.get("out"))


# ---------------------------------------------------------------------------
# mixture prior files
# ---------------------------------------------------------------------------

_MIXTURE_KEYS = {"format_version", "means", "covs", "weights",
                 "responsibilities", "unimodal_mean", "unimodal_cov",
                 "reg_lambda", "seed", "reseed_count", "tied_covariance",
                 "em_events"}


def save_mixture(path, mix: MixturePrior) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "means": mix.means, "covs": mix.covs, "weights": mix.weights,
        "responsibilities": mix.responsibilities,
        "unimodal_mean": mix.unimodal_mean, "unimodal_cov": mix.unimodal_cov,
        "reg_lambda": mix.reg_lambda, "seed": mix.seed,
        "reseed_count": mix.reseed_count,
        "tied_covariance": mix.tied_covariance,
        "em_events": list(mix.em_events),
    }
    dump_json(path, payload)


def load_mixture(path) -> MixturePrior:
    doc = load_json(path)
    where = os.path.basename(str(path))
    _require(doc, _MIXTURE_KEYS, where)
    _check_version(doc, where)
    resp = np.asarray(doc["responsibilities"], dtype=np.float64)
    if resp.size == 0:
        resp = resp.reshape(0, len(doc["weights"]))
    return MixturePrior(
        means=np.asarray(doc["means"], np.float64),
        covs=np.asarray(doc["covs"], np.float64),
        weights=np.asarray(doc["weights"], np.float64),
        responsibilities=resp,
        unimodal_mean=np.asarray(doc["unimodal_mean"], np.float64),
        unimodal_cov=np.asarray(doc["unimodal_cov"], np.float64),
        reg_lambda=float(doc["reg_lambda"]),
        seed=int(doc["seed"]),
        reseed_count=int(doc["reseed_count"]),
        tied_covariance=bool(doc["tied_covariance"]),
        em_events=tuple(doc["em_events"]),
    )


# ---------------------------------------------------------------------------
# fit reports and evaluation results
# ---------------------------------------------------------------------------

def _params_payload(params: ParamState) -> dict:
    return {"pose": params.pose, "shape": params.shape,
            "log_scale": params.log_scale, "translation": params.translation,
            "focal_length": float(params.focal_length)}


def _params_from(doc: dict, where: str) -> ParamState:
    _require(doc, {"pose", "shape", "log_scale", "translation", "focal_length"},
             where)
    return ParamState(
        pose=np.asarray(doc["pose"], np.float64),
        shape=np.asarray(doc["shape"], np.float64),
        log_scale=np.asarray(doc["log_scale"], np.float64),
        translation=np.asarray(doc["translation"], np.float64),
        focal_length=float(doc["focal_length"]))


def save_reports(path, reports: list[FitReport]) -> None:
    """Persist fit outcomes (wall time intentionally omitted: outputs must be
    byte-identical across reruns)."""
    payload = {"format_version": FORMAT_VERSION, "reports": [
        {
            "id": r.image_id,
            "params": _params_payload(r.params),
            "loss_trajectory": r.loss_trajectory,
            "best_energy": r.best_energy,
            "iterations": r.iterations,
            "converged": r.converged,
            "quarantined": r.quarantined,
            "responsibilities": r.responsibilities,
        } for r in reports]}
    dump_json(path, payload)


def load_reports(path) -> list[FitReport]:
    doc = load_json(path)
    where = os.path.basename(str(path))
    _require(doc, {"format_version", "reports"}, where)
    _check_version(doc, where)
    out = []
    for rec in doc["reports"]:
        _require(rec, {"id", "params", "loss_trajectory", "best_energy",
                       "iterations", "converged", "quarantined",
                       "responsibilities"}, f"{where}: report record")
        resp = rec["responsibilities"]
        out.append(FitReport(
            image_id=str(rec["id"]),
            params=_params_from(rec["params"], f"{where}: report {rec['id']}"),
            loss_trajectory={k: list(v) for k, v in rec["loss_trajectory"].items()},
            best_energy=list(rec["best_energy"]),
            iterations=int(rec["iterations"]),
            wall_time=0.0,
            converged=bool(rec["converged"]),
            quarantined=bool(rec["quarantined"]),
            responsibilities=None if resp is None else np.asarray(resp, np.float64),
        ))
    return out


def save_results(path, metrics) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "tau": metrics.tau,
        "images": [{
            "id": im.image_id,
            "iou": im.iou,
            "pck": im.pck.overall,
            "pck_groups": im.pck.per_group,
        } for im in metrics.images],
        "summary": {"mean_iou": metrics.mean_iou, "mean_pck": metrics.mean_pck,
                    "mean_pck_groups": metrics.mean_pck_per_group},
    }
    dump_json(path, payload)


def save_manifest(out_dir, command: str, artifacts: list[str]) -> str:
    rel = sorted(os.path.relpath(a, out_dir) for a in artifacts)
    path = os.path.join(out_dir, "manifest.json")
    dump_json(path, {"format_version": FORMAT_VERSION, "command": command,
                     "artifacts": rel})
    return path


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShapeCluster:
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic corpus."""

    count: int
    clusters: tuple[ShapeCluster, ...]
    image_size: tuple[int, int] = (64, 64)     # (W, H)
    pixel_sigma: float = 0.0                   # keypoint noise, pixels
    visibility_dropout: float = 0.0
    kappa_sigma: float = 0.03                  # log-scale jitter
    fill: tuple[float, float] = (0.5, 0.65)    # subject diagonal / min(W, H)
    yaw: tuple[float, float] = (-0.3, 0.3)     # radians about +y
    center_jitter: float = 0.05                # of image size


@dataclass(frozen=True)
class GroundTruthItem:
    image_id: str
    cluster: int
    params: ParamState


def default_synth_spec(model: TemplateModel, shape_prior: GaussianPrior,
                       count: int, n_clusters: int, seed: int,
                       separation: float = 6.0, **kwargs) -> SynthSpec:
    """Clusters placed along the leading shape direction, ``separation``
    cluster sigmas apart."""
    rng = np.random.default_rng((seed, 0xC1))
    base_sd = float(np.sqrt(np.trace(shape_prior.cov) / shape_prior.dim))
    cluster_sd = 2.0 * base_sd / separation
    direction = np.zeros(model.n_shapes)
    direction[0] = 1.0
    clusters = []
    for k in range(n_clusters):
        # adjacent cluster means sit exactly `separation` sigmas apart
        offset = (k - (n_clusters - 1) / 2.0) * separation * cluster_sd
        mean = shape_prior.mean + offset * direction
        mean = mean + rng.normal(0.0, 0.05 * cluster_sd, model.n_shapes)
        clusters.append(ShapeCluster(mean=mean,
                                     cov=np.eye(model.n_shapes) * cluster_sd ** 2))
    return SynthSpec(count=count, clusters=tuple(clusters), **kwargs)


def load_synth_spec(path) -> SynthSpec:
    doc = load_json(path)
    where = os.path.basename(str(path))
    _require(doc, {"format_version", "count", "clusters"}, where,
             optional={"image_size", "pixel_sigma", "visibility_dropout",
                       "kappa_sigma", "fill", "yaw", "center_jitter"})
    _check_version(doc, where)
    clusters = []
    for c in doc["clusters"]:
        _require(c, {"mean", "cov"}, f"{where}: cluster")
        clusters.append(ShapeCluster(np.asarray(c["mean"], np.float64),
                                     np.asarray(c["cov"], np.float64)))
    kwargs = {}
    for key in ("pixel_sigma", "visibility_dropout", "kappa_sigma",
                "center_jitter"):
        if key in doc:
            kwargs[key] = float(doc[key])
    for key in ("image_size", "fill", "yaw"):
        if key in doc:
            kwargs[key] = tuple(doc[key])
    return SynthSpec(count=int(doc["count"]), clusters=tuple(clusters), **kwargs)


def save_synth_spec(path, spec: SynthSpec) -> None:
    dump_json(path, {
        "format_version": FORMAT_VERSION,
        "count": spec.count,
        "clusters": [{"mean": c.mean, "cov": c.cov} for c in spec.clusters],
        "image_size": list(spec.image_size),
        "pixel_sigma": spec.pixel_sigma,
        "visibility_dropout": spec.visibility_dropout,
        "kappa_sigma": spec.kappa_sigma,
        "fill": list(spec.fill),
        "yaw": list(spec.yaw),
        "center_jitter": spec.center_jitter,
    })


def synth_generate(model: TemplateModel, priors: Priors, spec: SynthSpec,
                   seed: int) -> tuple[list[Annotation], list[GroundTruthItem]]:
    """Sample parameters, render hard masks, and project true keypoints."""
    if not spec.clusters:
        raise SchemaError("synth spec: needs at least one shape cluster")
    chols = []
    for k, cluster in enumerate(spec.clusters):
        try:
            chols.append(np.linalg.cholesky(cluster.cov))
        except np.linalg.LinAlgError as exc:
            raise SchemaError(f"synth spec: cluster {k} covariance is degenerate") from exc
    rng = np.random.default_rng(seed)
    w, h = spec.image_size
    focal = float(max(w, h))
    anns: list[Annotation] = []
    truths: list[GroundTruthItem] = []
    for i in range(spec.count):
        cluster_id = i % len(spec.clusters)
        cluster = spec.clusters[cluster_id]
        beta = cluster.mean + chols[cluster_id] @ rng.standard_normal(model.n_shapes)
        theta = priors.pose.sample(rng)
        yaw = rng.uniform(*spec.yaw)
        yaw_rot = np.asarray(rodrigues(np.array([0.0, yaw, 0.0])))
        theta[:3] = axis_angle_from_matrix(
            yaw_rot @ np.asarray(rodrigues(theta[:3])))
        log_scale = rng.normal(0.0, spec.kappa_sigma, model.n_scale_groups)
        fill = rng.uniform(*spec.fill)
        jitter = rng.uniform(-spec.center_jitter, spec.center_jitter, 2)

        params = ParamState(pose=theta, shape=beta, log_scale=log_scale,
                            translation=np.array([0.0, 0.0, 1.0]),
                            focal_length=focal)
        mesh = skin(model, params, with_transforms=False)
        verts = np.asarray(mesh.vertices)
        extent = verts.max(axis=0) - verts.min(axis=0)
        world_diag = float(np.hypot(extent[0], extent[1]))
        tz = focal * world_diag / (fill * min(w, h))
        tz = max(tz, 1.5 * (abs(float(verts[:, 2].min())) + 0.1))
        center = 0.5 * (verts.max(axis=0) + verts.min(axis=0))
        target = np.array([w / 2.0 + jitter[0] * w, h / 2.0 + jitter[1] * h])
        for attempt in range(6):
            zbar = center[2] + tz
            tx = (target[0] - w / 2.0) * zbar / focal - center[0]
            ty = (target[1] - h / 2.0) * zbar / focal - center[1]
            params = dataclasses.replace(
                params, translation=np.array([tx, ty, tz]))
            cam = Camera(focal_length=focal, width=w, height=h,
                         translation=params.translation)
            uv = np.asarray(project(verts, cam))
            margin = 2.0
            if (uv[:, 0].min() >= margin and uv[:, 0].max() < w - margin
                    and uv[:, 1].min() >= margin and uv[:, 1].max() < h - margin):
                break
            target = np.array([w / 2.0, h / 2.0])
            tz *= 1.2
        mask = render_hard(mesh, model.faces, cam)
        joints_uv = np.asarray(project(np.asarray(mesh.joints), cam))
        kps = joints_uv[np.asarray(model.keypoint_map)]
        in_frame = ((kps[:, 0] >= 0) & (kps[:, 0] < w)
                    & (kps[:, 1] >= 0) & (kps[:, 1] < h))
        dropped = rng.uniform(size=kps.shape[0]) < spec.visibility_dropout
        visibility = in_frame & ~dropped
        if not visibility.any():
            keep = int(np.nonzero(in_frame)[0][0]) if in_frame.any() else 0
            visibility[keep] = True
        noisy = kps + rng.normal(0.0, spec.pixel_sigma, kps.shape) \
            if spec.pixel_sigma > 0 else kps
        image_id = f"img_{i:04d}"
        anns.append(Annotation(image_id=image_id, width=w, height=h,
                               keypoints=noisy, visibility=visibility,
                               silhouette=mask))
        truths.append(GroundTruthItem(image_id=image_id, cluster=cluster_id,
                                      params=params))
    return anns, truths


def save_ground_truth(path, truths: list[GroundTruthItem]) -> None:
    dump_json(path, {"format_version": FORMAT_VERSION, "items": [
        {"id": t.image_id, "cluster": t.cluster,
         "params": _params_payload(t.params)} for t in truths]})


def load_ground_truth(path) -> list[GroundTruthItem]:
    doc = load_json(path)
    where = os.path.basename(str(path))
    _require(doc, {"format_version", "items"}, where)
    _check_version(doc, where)
    return [GroundTruthItem(
        image_id=str(rec["id"]), cluster=int(rec["cluster"]),
        params=_params_from(rec["params"], f"{where}: item {rec['id']}"))
        for rec in doc["items"]]
