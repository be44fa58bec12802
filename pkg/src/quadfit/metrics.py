"""Silhouette IoU and area-normalized keypoint accuracy (PCK).

A keypoint counts as correct when it is visible and its prediction lies
within ``tau * sqrt(silhouette area)`` pixels of the annotation.  Invisible
keypoints are excluded from both numerator and denominator, overall and per
group, so group percentages weighted by visible counts reproduce the overall
figure exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import render_hard
from .errors import (
    DegenerateAnnotationError,
    DimensionMismatchError,
    InvalidParameterError,
)
from .losses import Annotation, camera_for
from .model import TemplateModel, skin

DEFAULT_TAU = 0.15


def validate_groups(groups: dict, n_keypoints: int) -> None:
    """Groups must be disjoint and cover all keypoints."""
    covered = sorted(k for idx in groups.values() for k in idx)
    if covered != list(range(n_keypoints)):
        raise InvalidParameterError("joint groups must partition the keypoints")


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two binary masks; 1.0 when both are empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionMismatchError(
            f"iou: mask shapes differ, {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


@dataclass(frozen=True)
class PckResult:
    overall: float                   # percent over visible keypoints
    per_group: dict[str, float]      # percent, NaN for groups with none visible
    visible_per_group: dict[str, int]
    correct_per_group: dict[str, int]
    threshold_px: float


def pck(pred_kps: np.ndarray, ann: Annotation, groups: dict,
        tau: float = DEFAULT_TAU) -> PckResult:
    """Percentage of visible keypoints within tau * sqrt(mask area) pixels."""
    pred_kps = np.asarray(pred_kps, dtype=np.float64)
    if pred_kps.shape != ann.keypoints.shape:
        raise DimensionMismatchError("pck: prediction shape does not match annotation")
    validate_groups(groups, ann.keypoints.shape[0])
    area = int(np.asarray(ann.silhouette, dtype=bool).sum())
    if area == 0:
        raise DegenerateAnnotationError(f"annotation {ann.image_id}: empty silhouette")
    vis = np.asarray(ann.visibility, dtype=bool)
    if not vis.any():
        raise DegenerateAnnotationError(f"annotation {ann.image_id}: no visible keypoints")
    threshold = tau * np.sqrt(area)
    dist = np.linalg.norm(pred_kps - ann.keypoints, axis=1)
    correct = (dist <= threshold) & vis
    visible_per_group = {}
    correct_per_group = {}
    per_group = {}
    for name, idx in groups.items():
        idx = np.asarray(list(idx), dtype=np.int64)
        nv = int(vis[idx].sum()) if idx.size else 0
        nc = int(correct[idx].sum()) if idx.size else 0
        visible_per_group[name] = nv
        correct_per_group[name] = nc
        per_group[name] = 100.0 * nc / nv if nv else float("nan")
    overall = 100.0 * correct.sum() / vis.sum()
    return PckResult(float(overall), per_group, visible_per_group,
                     correct_per_group, float(threshold))


@dataclass(frozen=True)
class ImageMetrics:
    image_id: str
    iou: float
    pck: PckResult


@dataclass(frozen=True)
class CorpusMetrics:
    images: tuple[ImageMetrics, ...]
    mean_iou: float
    mean_pck: float
    mean_pck_per_group: dict[str, float]
    tau: float

    def table(self) -> str:
        """Plain structured-text table, one row per image plus the summary."""
        names = sorted(self.mean_pck_per_group)
        header = ["id", "iou", "pck"] + [f"pck_{n}" for n in names]
        rows = [header]
        for im in self.images:
            rows.append([im.image_id, f"{im.iou:.4f}", f"{im.pck.overall:.2f}"]
                        + [f"{im.pck.per_group[n]:.2f}" for n in names])
        rows.append(["mean", f"{self.mean_iou:.4f}", f"{self.mean_pck:.2f}"]
                    + [f"{self.mean_pck_per_group[n]:.2f}" for n in names])
        widths = [max(len(r[c]) for r in rows) for c in range(len(header))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
                 for row in rows]
        return "\n".join(lines)


def project_keypoints(params, model: TemplateModel, ann: Annotation) -> np.ndarray:
    """Reprojected model keypoints for one fitted parameter state."""
    from .camera import project

    mesh = skin(model, params, with_transforms=False)
    projected = project(mesh.joints, camera_for(params, ann))
    return np.asarray(projected)[np.asarray(model.keypoint_map)]


def evaluate_corpus(reports, anns, model: TemplateModel,
                    tau: float = DEFAULT_TAU) -> CorpusMetrics:
    """Hard-rendered IoU plus PCK per image, and corpus means."""
    if len(reports) != len(anns):
        raise InvalidParameterError(
            f"evaluate_corpus: {len(reports)} reports vs {len(anns)} annotations")
    by_id = {ann.image_id: ann for ann in anns}
    images = []
    for report in reports:
        ann = by_id.get(report.image_id)
        if ann is None:
            raise InvalidParameterError(
                f"evaluate_corpus: no annotation with id {report.image_id!r}")
        mesh = skin(model, report.params, with_transforms=False)
        rendered = render_hard(mesh, model.faces, camera_for(report.params, ann))
        kps = project_keypoints(report.params, model, ann)
        images.append(ImageMetrics(
            image_id=report.image_id,
            iou=iou(rendered, ann.silhouette),
            pck=pck(kps, ann, model.joint_groups, tau=tau)))
    mean_iou = float(np.mean([im.iou for im in images]))
    mean_pck = float(np.mean([im.pck.overall for im in images]))
    group_names = model.joint_groups.keys()
    mean_per_group = {}
    for name in group_names:
        vals = [im.pck.per_group[name] for im in images
                if np.isfinite(im.pck.per_group[name])]
        mean_per_group[name] = float(np.mean(vals)) if vals else float("nan")
    return CorpusMetrics(tuple(images), mean_iou, mean_pck, mean_per_group,
                         float(tau))
