"""Built-in models: a hand-sized toy quadruped and a full-scale generator.

Run ``python -m quadfit.zoo`` to regenerate the bundled toy model file.

The toy model (47 vertices, 15 joints, 3 blendshapes) is small enough for
finite-difference sweeps and ships with the package as
``data/toy_model.json``; its skinning and regressor weights are binary
fractions so rows sum to exactly 1.  The full-scale generator produces a
procedural quadruped at production dimensions (3889 vertices, 35 joints, 20
blendshapes, 6 scale groups) for load/validation tests at scale.

Coordinate frame for both: +x nose-ward along the body, +y down (legs grow
toward +y, matching image rows), +z lateral; the camera looks along +z.
"""

from __future__ import annotations

import numpy as np

from .losses import GaussianPrior
from .model import ScaleGroup, TemplateModel


def _toy_mesh():
    verts = []
    faces = []

    def box(x0, x1, y0, y1, z0, z1):
        base = len(verts)
        for x in (x0, x1):
            for y in (y0, y1):
                for z in (z0, z1):
                    verts.append((x, y, z))
        quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1),
                 (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
        for a, b, c, d in quads:
            faces.append((base + a, base + b, base + c))
            faces.append((base + a, base + c, base + d))
        return list(range(base, base + 8))

    def prism_x(x0, x1, section):
        """Triangular prism extruded along x; section is 3 (y, z) pairs."""
        base = len(verts)
        for x in (x0, x1):
            for y, z in section:
                verts.append((x, y, z))
        faces.append((base + 0, base + 1, base + 2))
        faces.append((base + 3, base + 5, base + 4))
        for k in range(3):
            a, b = base + k, base + (k + 1) % 3
            c, d = a + 3, b + 3
            faces.append((a, b, d))
            faces.append((a, d, c))
        return list(range(base, base + 6))

    def prism_y(y0, y1, section):
        """Triangular prism extruded along y; section is 3 (x, z) pairs."""
        base = len(verts)
        for y in (y0, y1):
            for x, z in section:
                verts.append((x, y, z))
        faces.append((base + 0, base + 2, base + 1))
        faces.append((base + 3, base + 4, base + 5))
        for k in range(3):
            a, b = base + k, base + (k + 1) % 3
            c, d = a + 3, b + 3
            faces.append((a, d, b))
            faces.append((a, c, d))
        return list(range(base, base + 6))

    def fin(p0, p1, p2):
        base = len(verts)
        verts.extend([p0, p1, p2])
        faces.append((base, base + 1, base + 2))
        return [base, base + 1, base + 2]

    body = box(-0.95, 0.95, -0.45, 0.25, -0.2, 0.2)
    head = prism_x(0.95, 1.45, [(-0.5, -0.12), (-0.5, 0.12), (-0.05, 0.0)])
    leg_section = [(-0.07, -0.05), (0.07, -0.05), (0.0, 0.07)]
    legs = {}
    for name, (xc, zc) in (("FL", (0.7, -0.18)), ("FR", (0.7, 0.18)),
                           ("BL", (-0.7, -0.18)), ("BR", (-0.7, 0.18))):
        section = [(xc + dx, zc + dz) for dx, dz in leg_section]
        legs[name] = prism_y(0.15, 0.95, section)
    tail = fin((-0.95, -0.2, 0.0), (-0.95, 0.0, 0.0), (-1.5, -0.45, 0.0))
    ear_l = fin((1.2, -0.5, -0.12), (1.05, -0.5, -0.12), (1.1, -0.8, -0.12))
    ear_r = fin((1.2, -0.5, 0.12), (1.05, -0.5, 0.12), (1.1, -0.8, 0.12))

    groups = {"body": body, "head": head, "tail": tail,
              "earL": ear_l, "earR": ear_r, **legs}
    return (np.array(verts, dtype=np.float64),
            np.array(faces, dtype=np.int64), groups)


# Toy joints: name -> (parent name, regressor spec).  Regressor weights are
# binary fractions over a vertex list so each row sums to exactly 1.
_TOY_JOINTS = [
    ("root", None),
    ("neck", "root"),
    ("head", "neck"),
    ("earL", "head"),
    ("earR", "head"),
    ("tail_base", "root"),
    ("tail_tip", "tail_base"),
    ("FL_hip", "root"),
    ("FL_toe", "FL_hip"),
    ("FR_hip", "root"),
    ("FR_toe", "FR_hip"),
    ("BL_hip", "root"),
    ("BL_toe", "BL_hip"),
    ("BR_hip", "root"),
    ("BR_toe", "BR_hip"),
]


def build_toy_model() -> tuple[TemplateModel, GaussianPrior, GaussianPrior]:
    """The bundled 47-vertex quadruped plus its unimodal priors."""
    verts, faces, g = _toy_mesh()
    nv = verts.shape[0]
    names = [n for n, _ in _TOY_JOINTS]
    idx = {n: i for i, n in enumerate(names)}
    nj = len(names)
    parents = np.array([-1 if p is None else idx[p] for _, p in _TOY_JOINTS],
                       dtype=np.int64)

    regressor = np.zeros((nj, nv))
    regressor[idx["root"], g["body"]] = 0.125
    for joint, vlist in (
        ("neck", g["head"][:3]), ("head", g["head"][3:]),
        ("earL", g["earL"]), ("earR", g["earR"]),
    ):
        regressor[idx[joint], vlist] = [0.25, 0.25, 0.5]
    regressor[idx["tail_base"], g["tail"][:2]] = 0.5
    regressor[idx["tail_tip"], g["tail"][2]] = 1.0
    for leg in ("FL", "FR", "BL", "BR"):
        regressor[idx[f"{leg}_hip"], g[leg][:3]] = [0.25, 0.25, 0.5]
        regressor[idx[f"{leg}_toe"], g[leg][3:]] = [0.25, 0.25, 0.5]

    weights = np.zeros((nv, nj))
    for v in g["body"]:
        if verts[v, 0] > 0:
            weights[v, idx["root"]], weights[v, idx["neck"]] = 0.75, 0.25
        else:
            weights[v, idx["root"]], weights[v, idx["tail_base"]] = 0.75, 0.25
    for v in g["head"][:3]:
        weights[v, idx["neck"]], weights[v, idx["head"]] = 0.5, 0.5
    for v in g["head"][3:]:
        weights[v, idx["head"]] = 1.0
    for ear in ("earL", "earR"):
        for v in g[ear][:2]:
            weights[v, idx["head"]], weights[v, idx[ear]] = 0.5, 0.5
        weights[g[ear][2], idx[ear]] = 1.0
    for v in g["tail"][:2]:
        weights[v, idx["tail_base"]] = 1.0
    weights[g["tail"][2], idx["tail_tip"]] = 1.0
    for leg in ("FL", "FR", "BL", "BR"):
        for v in g[leg][:3]:
            weights[v, idx[f"{leg}_hip"]] = 1.0
        for v in g[leg][3:]:
            weights[v, idx[f"{leg}_toe"]] = 1.0

    basis = np.zeros((3 * nv, 3))
    flat = basis.reshape(nv, 3, 3)
    flat[:, 0, 0] = 0.18 * verts[:, 0]                       # elongate
    for v in g["body"]:
        flat[v, 1, 1] = 0.16 * (verts[v, 1] + 0.1)           # torso bulk
    head_neck = np.array([0.95, -0.35, 0.0])
    for v in g["head"] + g["earL"] + g["earR"]:
        flat[v, :, 2] = 0.25 * (verts[v] - head_neck)        # head size

    scale_groups = (
        ScaleGroup("legs", ((idx["FL_toe"], "y"), (idx["FR_toe"], "y"),
                            (idx["BL_toe"], "y"), (idx["BR_toe"], "y"))),
        ScaleGroup("tail", ((idx["tail_tip"], "x"),)),
        ScaleGroup("ears", ((idx["earL"], "y"), (idx["earR"], "y"))),
        ScaleGroup("head", ((idx["head"], "x"),)),
        ScaleGroup("body_length", ((idx["neck"], "x"), (idx["tail_base"], "x"))),
        ScaleGroup("stance", ((idx["FL_hip"], "y"), (idx["FR_hip"], "y"),
                              (idx["BL_hip"], "y"), (idx["BR_hip"], "y"))),
    )

    keypoint_map = np.array([idx["FL_toe"], idx["FR_toe"], idx["BL_toe"],
                             idx["BR_toe"], idx["FL_hip"], idx["FR_hip"],
                             idx["BL_hip"], idx["BR_hip"],
                             idx["tail_base"], idx["tail_tip"],
                             idx["earL"], idx["earR"], idx["head"],
                             idx["neck"]],
                            dtype=np.int64)
    joint_groups = {"legs": (0, 1, 2, 3, 4, 5, 6, 7), "tail": (8, 9),
                    "ears": (10, 11), "face": (12, 13)}
    symmetry = ((idx["earL"], idx["earR"]), (idx["FL_hip"], idx["FR_hip"]),
                (idx["FL_toe"], idx["FR_toe"]), (idx["BL_hip"], idx["BR_hip"]),
                (idx["BL_toe"], idx["BR_toe"]))

    model = TemplateModel(
        rest_vertices=verts, faces=faces, kintree_parents=parents,
        joint_regressor=regressor, skin_weights=weights, blend_basis=basis,
        scale_groups=scale_groups, keypoint_map=keypoint_map,
        joint_groups=joint_groups, symmetry_pairs=symmetry, name="toy-quadruped")
    model.validate()

    pose_sd = np.full(nj * 3, 0.12)
    pose_sd[:3] = 0.08
    pose_prior = GaussianPrior(np.zeros(nj * 3), np.diag(pose_sd ** 2))
    shape_prior = GaussianPrior(np.zeros(3), np.diag([0.4, 0.35, 0.35]) ** 2)
    return model, pose_prior, shape_prior


# ---------------------------------------------------------------------------
# full-scale procedural quadruped
# ---------------------------------------------------------------------------

_DOG_JOINTS = [
    ("root", None, (0.0, 0.0, 0.0)),
    ("spine1", "root", (0.25, 0.0, 0.0)),
    ("spine2", "spine1", (0.5, 0.0, 0.0)),
    ("spine3", "spine2", (0.75, 0.0, 0.0)),
    ("neck1", "spine3", (0.95, -0.1, 0.0)),
    ("neck2", "neck1", (1.05, -0.2, 0.0)),
    ("head", "neck2", (1.15, -0.3, 0.0)),
    ("jaw", "head", (1.3, -0.2, 0.0)),
    ("nose", "head", (1.4, -0.3, 0.0)),
    ("earL_base", "head", (1.1, -0.42, -0.1)),
    ("earL_tip", "earL_base", (1.08, -0.6, -0.12)),
    ("earR_base", "head", (1.1, -0.42, 0.1)),
    ("earR_tip", "earR_base", (1.08, -0.6, 0.12)),
    ("tail1", "root", (-0.2, -0.05, 0.0)),
    ("tail2", "tail1", (-0.4, -0.1, 0.0)),
    ("tail3", "tail2", (-0.6, -0.15, 0.0)),
    ("tail4", "tail3", (-0.8, -0.2, 0.0)),
    ("tail5", "tail4", (-1.0, -0.25, 0.0)),
    ("tail6", "tail5", (-1.2, -0.3, 0.0)),
    ("FL_hip", "spine3", (0.7, 0.2, -0.15)),
    ("FL_knee", "FL_hip", (0.7, 0.5, -0.15)),
    ("FL_ankle", "FL_knee", (0.7, 0.75, -0.15)),
    ("FL_toe", "FL_ankle", (0.75, 0.95, -0.15)),
    ("FR_hip", "spine3", (0.7, 0.2, 0.15)),
    ("FR_knee", "FR_hip", (0.7, 0.5, 0.15)),
    ("FR_ankle", "FR_knee", (0.7, 0.75, 0.15)),
    ("FR_toe", "FR_ankle", (0.75, 0.95, 0.15)),
    ("BL_hip", "root", (-0.1, 0.2, -0.15)),
    ("BL_knee", "BL_hip", (-0.1, 0.5, -0.15)),
    ("BL_ankle", "BL_knee", (-0.1, 0.75, -0.15)),
    ("BL_toe", "BL_ankle", (-0.05, 0.95, -0.15)),
    ("BR_hip", "root", (-0.1, 0.2, 0.15)),
    ("BR_knee", "BR_hip", (-0.1, 0.5, 0.15)),
    ("BR_ankle", "BR_knee", (-0.1, 0.75, 0.15)),
    ("BR_toe", "BR_ankle", (-0.05, 0.95, 0.15)),
]


def _grid_patch(verts, faces, rows, cols, fn, wrap=False):
    base = len(verts)
    for r in range(rows):
        for c in range(cols):
            verts.append(fn(r / max(rows - 1, 1), c / (cols if wrap else max(cols - 1, 1))))
    ncols = cols
    for r in range(rows - 1):
        for c in range(cols if wrap else cols - 1):
            c2 = (c + 1) % cols
            a = base + r * ncols + c
            b = base + r * ncols + c2
            d = base + (r + 1) * ncols + c
            e = base + (r + 1) * ncols + c2
            faces.append((a, b, e))
            faces.append((a, e, d))
    return list(range(base, len(verts)))


def build_dog_scale_model(seed: int = 7) -> tuple[TemplateModel, GaussianPrior, GaussianPrior]:
    """Procedural quadruped at production scale: 3889/35/20/6."""
    rng = np.random.default_rng(seed)
    names = [n for n, _, _ in _DOG_JOINTS]
    idx = {n: i for i, n in enumerate(names)}
    nj = len(names)
    parents = np.array([-1 if p is None else idx[p] for _, p, _ in _DOG_JOINTS],
                       dtype=np.int64)
    joint_pos = np.array([p for _, _, p in _DOG_JOINTS], dtype=np.float64)

    verts: list = []
    faces: list = []

    def ellipsoid(center, radii, rows, cols):
        cx, cy, cz = center

        def fn(u, v):
            th = np.pi * u
            ph = 2.0 * np.pi * v
            return (cx + radii[0] * np.cos(th),
                    cy + radii[1] * np.sin(th) * np.cos(ph),
                    cz + radii[2] * np.sin(th) * np.sin(ph))
        return _grid_patch(verts, faces, rows, cols, fn, wrap=True)

    def tube(p0, p1, r0, r1, rows, cols):
        p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
        axis = p1 - p0
        ref = np.array([1.0, 0.0, 0.0])
        if abs(axis @ ref) > 0.9 * np.linalg.norm(axis):
            ref = np.array([0.0, 1.0, 0.0])
        side = np.cross(axis, ref)
        side /= np.linalg.norm(side)
        up = np.cross(axis, side)
        up /= np.linalg.norm(up)

        def fn(u, v):
            ph = 2.0 * np.pi * v
            r = r0 + (r1 - r0) * u
            p = p0 + u * axis + r * (np.cos(ph) * side + np.sin(ph) * up)
            return tuple(p)
        return _grid_patch(verts, faces, rows, cols, fn, wrap=True)

    def fin(p0, p1, tip, rows, cols):
        p0, p1, tip = (np.asarray(p, float) for p in (p0, p1, tip))

        def fn(u, v):
            edge = p0 + v * (p1 - p0)
            return tuple(edge + u * (tip - edge))
        return _grid_patch(verts, faces, rows, cols, fn, wrap=False)

    part_verts = {}
    part_verts["body"] = ellipsoid((0.35, -0.05, 0.0), (0.85, 0.38, 0.3), 49, 49)
    part_verts["head"] = ellipsoid((1.2, -0.28, 0.0), (0.3, 0.2, 0.17), 22, 20)
    for leg in ("FL", "FR", "BL", "BR"):
        hip = joint_pos[idx[f"{leg}_hip"]]
        toe = joint_pos[idx[f"{leg}_toe"]]
        part_verts[leg] = tube(hip, toe + np.array([0.0, 0.02, 0.0]),
                               0.1, 0.045, 11, 16)
    part_verts["tail"] = tube(joint_pos[idx["tail1"]],
                              joint_pos[idx["tail6"]] + np.array([-0.05, -0.02, 0.0]),
                              0.07, 0.02, 14, 16)
    part_verts["earL"] = fin((1.14, -0.44, -0.1), (1.02, -0.44, -0.1),
                             (1.08, -0.66, -0.13), 10, 6)
    part_verts["earR"] = fin((1.14, -0.44, 0.1), (1.02, -0.44, 0.1),
                             (1.08, -0.66, 0.13), 10, 6)

    vertices = np.array(verts, dtype=np.float64)
    faces_arr = np.array(faces, dtype=np.int64)
    nv = vertices.shape[0]
    if nv != 3889:
        raise AssertionError(f"generator produced {nv} vertices, expected 3889")

    # Joint regressor: uniform weights over the 12 nearest vertices.
    regressor = np.zeros((nj, nv))
    for j in range(nj):
        d = np.linalg.norm(vertices - joint_pos[j], axis=1)
        near = np.argsort(d)[:12]
        regressor[j, near] = 1.0 / 12.0
    regressor /= regressor.sum(axis=1, keepdims=True)

    # Skin weights: softmax over distance to the two nearest bone segments.
    seg_starts, seg_ends, seg_joint = [], [], []
    for j in range(nj):
        p = parents[j]
        if p < 0:
            continue
        seg_starts.append(joint_pos[p])
        seg_ends.append(joint_pos[j])
        seg_joint.append(j)
    seg_starts = np.array(seg_starts)
    seg_ends = np.array(seg_ends)
    seg_joint = np.array(seg_joint)

    def seg_dist(p):
        d = seg_ends - seg_starts
        t = np.clip(np.einsum("ij,ij->i", p - seg_starts, d)
                    / np.maximum(np.einsum("ij,ij->i", d, d), 1e-12), 0.0, 1.0)
        closest = seg_starts + t[:, None] * d
        return np.linalg.norm(p - closest, axis=1)

    weights = np.zeros((nv, nj))
    for v in range(nv):
        dist = seg_dist(vertices[v])
        order = np.argsort(dist)[:2]
        w = np.exp(-dist[order] / 0.08)
        w /= w.sum()
        weights[v, seg_joint[order]] += w
    weights /= weights.sum(axis=1, keepdims=True)

    # Blendshapes: 20 smooth low-frequency displacement fields.
    nb = 20
    basis = np.zeros((3 * nv, nb))
    flat = basis.reshape(nv, 3, nb)
    x, y, z = vertices[:, 0], vertices[:, 1], vertices[:, 2]
    for k in range(nb):
        fx, fy, fz = rng.uniform(0.5, 2.0, size=3)
        px, py, pz = rng.uniform(0.0, 2.0 * np.pi, size=3)
        amp = 0.05
        flat[:, 0, k] = amp * np.sin(fx * x + px)
        flat[:, 1, k] = amp * np.sin(fy * y + py)
        flat[:, 2, k] = amp * np.sin(fz * z + pz) * np.sign(z + 1e-12)

    scale_groups = (
        ScaleGroup("legs", tuple((idx[f"{leg}_{part}"], "y")
                                 for leg in ("FL", "FR", "BL", "BR")
                                 for part in ("knee", "ankle", "toe"))),
        ScaleGroup("tail", tuple((idx[f"tail{k}"], "x") for k in range(2, 7))),
        ScaleGroup("ears", ((idx["earL_tip"], "y"), (idx["earR_tip"], "y"))),
        ScaleGroup("head", ((idx["head"], "x"), (idx["nose"], "x"))),
        ScaleGroup("body_length", ((idx["spine1"], "x"), (idx["spine2"], "x"),
                                   (idx["spine3"], "x"))),
        ScaleGroup("stance", tuple((idx[f"{leg}_hip"], "y")
                                   for leg in ("FL", "FR", "BL", "BR"))),
    )

    keypoint_map = np.array(
        [idx[f"{leg}_{part}"] for leg in ("FL", "FR", "BL", "BR")
         for part in ("knee", "ankle", "toe")]
        + [idx["earL_base"], idx["earL_tip"], idx["earR_base"], idx["earR_tip"]]
        + [idx["tail1"], idx["tail6"]]
        + [idx["nose"], idx["jaw"]], dtype=np.int64)
    joint_groups = {
        "legs": tuple(range(12)),
        "ears": (12, 13, 14, 15),
        "tail": (16, 17),
        "face": (18, 19),
    }
    symmetry = tuple(
        (idx[f"FL_{p}"], idx[f"FR_{p}"]) for p in ("hip", "knee", "ankle", "toe")
    ) + tuple(
        (idx[f"BL_{p}"], idx[f"BR_{p}"]) for p in ("hip", "knee", "ankle", "toe")
    ) + ((idx["earL_base"], idx["earR_base"]), (idx["earL_tip"], idx["earR_tip"]))

    model = TemplateModel(
        rest_vertices=vertices, faces=faces_arr, kintree_parents=parents,
        joint_regressor=regressor, skin_weights=weights, blend_basis=basis,
        scale_groups=scale_groups, keypoint_map=keypoint_map,
        joint_groups=joint_groups, symmetry_pairs=symmetry,
        name="procedural-quadruped")
    model.validate()

    pose_prior = GaussianPrior(np.zeros(nj * 3), np.diag(np.full(nj * 3, 0.1) ** 2))
    shape_sd = 0.3 * 0.9 ** np.arange(nb)
    shape_prior = GaussianPrior(np.zeros(nb), np.diag(shape_sd ** 2))
    return model, pose_prior, shape_prior


def toy_model_path() -> str:
    """Path of the bundled toy model JSON."""
    import importlib.resources as resources

    return str(resources.files("quadfit").joinpath("data/toy_model.json"))


def _write_bundled() -> None:
    from . import dataio

    model, pose_prior, shape_prior = build_toy_model()
    path = toy_model_path()
    dataio.save_model(path, model, pose_prior, shape_prior)
    print(f"wrote {path}")


if __name__ == "__main__":
    _write_bundled()
