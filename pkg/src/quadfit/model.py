"""Skinned parametric quadruped template and its deformation pipeline.

The template couples a rest mesh, a rooted joint tree, skinning weights, a
linear blendshape basis, and named per-part scale groups.  Posing runs

    blendshapes -> regress rest joints -> per-part scale -> forward
    kinematics -> linear blend skinning

All functions in this module accept either plain numpy arrays or autodiff
``Var`` nodes for the parameter-dependent inputs, so the same code serves
rendering and gradient-based fitting.

Scale mechanics: a scale-group entry (joint j, axis) stretches the bone from
j's parent to j along that rest-frame axis.  Each joint's affine transform is
anchored at its parent and built recursively down the tree, so every scaled
bone changes by exactly its own factor (ancestor scales relocate the bone but
do not compound into its length).  Vertices follow by blending the per-joint
affine maps with the skinning weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DimensionMismatchError, InvalidParameterError, SchemaError

AXES = ("x", "y", "z")

# Below this squared angle the Rodrigues coefficients switch to their
# second-order Taylor forms to keep values and gradients finite at zero.
_SMALL_ANGLE_SQ = 1e-16


@dataclass(frozen=True)
class _TreeLevels:
    """Breadth-first traversal data for vectorized tree recursions.

    ``levels[d]`` lists the joints at depth d; ``parent_rows[d]`` gives, for
    each of those joints, the row of its parent inside the concatenation of
    all earlier levels; ``order``/``unorder`` convert between level order and
    joint order.
    """

    levels: tuple[np.ndarray, ...]
    parent_rows: tuple[np.ndarray, ...]
    order: np.ndarray
    unorder: np.ndarray

    @staticmethod
    def build(parents: np.ndarray) -> "_TreeLevels":
        nj = parents.shape[0]
        depth = np.zeros(nj, dtype=np.int64)
        for j in range(nj):
            p = int(parents[j])
            depth[j] = 0 if p < 0 else depth[p] + 1
        levels = tuple(np.nonzero(depth == d)[0]
                       for d in range(int(depth.max()) + 1))
        order = np.concatenate(levels)
        unorder = np.argsort(order)
        row_of = np.empty(nj, dtype=np.int64)
        row_of[order] = np.arange(nj)
        parent_rows = tuple(
            row_of[parents[idx]] if d > 0 else np.array([], dtype=np.int64)
            for d, idx in enumerate(levels))
        return _TreeLevels(levels, parent_rows, order, unorder)


@dataclass(frozen=True)
class ScaleGroup:
    """Named set of (joint index, axis) entries sharing one scale factor."""

    name: str
    entries: tuple[tuple[int, str], ...]


@dataclass(frozen=True)
class TemplateModel:
    """Immutable model definition; safe to share across concurrent fits."""

    rest_vertices: np.ndarray      # (V, 3)
    faces: np.ndarray              # (F, 3) int
    kintree_parents: np.ndarray    # (J,) int, root entry -1
    joint_regressor: np.ndarray    # (J, V), rows sum to 1
    skin_weights: np.ndarray       # (V, J), rows sum to 1, entries >= 0
    blend_basis: np.ndarray        # (3V, B)
    scale_groups: tuple[ScaleGroup, ...]
    keypoint_map: np.ndarray       # (K,) joint index per annotated keypoint
    joint_groups: dict[str, tuple[int, ...]]  # keypoint partition for metrics
    symmetry_pairs: tuple[tuple[int, int], ...] | None = None
    name: str = "model"

    def __post_init__(self):
        for attr in ("rest_vertices", "faces", "kintree_parents",
                     "joint_regressor", "skin_weights", "blend_basis",
                     "keypoint_map"):
            getattr(self, attr).setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return self.rest_vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.kintree_parents.shape[0]

    @property
    def n_shapes(self) -> int:
        return self.blend_basis.shape[1]

    @property
    def n_scale_groups(self) -> int:
        return len(self.scale_groups)

    @property
    def n_keypoints(self) -> int:
        return self.keypoint_map.shape[0]

    def scale_axis_group(self) -> np.ndarray:
        """(J, 3) int map from (joint, axis) to scale-group index, -1 if free."""
        out = np.full((self.n_joints, 3), -1, dtype=np.int64)
        for gi, group in enumerate(self.scale_groups):
            for joint, axis in group.entries:
                out[joint, AXES.index(axis)] = gi
        return out

    def tree_levels(self) -> "_TreeLevels":
        """Breadth-first layering of the joint tree (cached)."""
        cached = getattr(self, "_tree_levels", None)
        if cached is None:
            cached = _TreeLevels.build(self.kintree_parents)
            object.__setattr__(self, "_tree_levels", cached)
        return cached

    def validate(self) -> None:
        """Check every structural invariant; raises SchemaError naming the field."""
        v, j = self.n_vertices, self.n_joints
        if self.rest_vertices.ndim != 2 or self.rest_vertices.shape[1] != 3:
            raise SchemaError("vertices: expected an N x 3 array")
        if not np.all(np.isfinite(self.rest_vertices)):
            raise SchemaError("vertices: non-finite entry")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise SchemaError("faces: expected an N x 3 index array")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= v):
            raise SchemaError("faces: vertex index out of range")
        if self.joint_regressor.shape != (j, v):
            raise SchemaError("joint_regressor: shape must be (n_joints, n_vertices)")
        rows = self.joint_regressor.sum(axis=1)
        bad = np.nonzero(np.abs(rows - 1.0) > 1e-9)[0]
        if bad.size:
            raise SchemaError(f"joint_regressor: row {bad[0]} sums to {rows[bad[0]]!r}, expected 1")
        if self.skin_weights.shape != (v, j):
            raise SchemaError("skin_weights: shape must be (n_vertices, n_joints)")
        if np.any(self.skin_weights < 0):
            raise SchemaError("skin_weights: negative entry")
        rows = self.skin_weights.sum(axis=1)
        bad = np.nonzero(np.abs(rows - 1.0) > 1e-9)[0]
        if bad.size:
            raise SchemaError(f"skin_weights: row {bad[0]} sums to {rows[bad[0]]!r}, expected 1")
        if self.blend_basis.shape[0] != 3 * v:
            raise SchemaError("blend_basis: expected 3 * n_vertices rows")
        roots = np.nonzero(self.kintree_parents < 0)[0]
        if roots.size != 1:
            raise SchemaError("kintree_parents: expected exactly one root")
        for child in range(j):
            parent = int(self.kintree_parents[child])
            if parent >= child:
                raise SchemaError(
                    f"kintree_parents: joint {child} has parent {parent}; "
                    "parents must precede children")
            if parent >= j:
                raise SchemaError(f"kintree_parents: joint {child} parent out of range")
        seen: set[tuple[int, str]] = set()
        for group in self.scale_groups:
            for joint, axis in group.entries:
                if axis not in AXES:
                    raise SchemaError(f"scale_groups: group '{group.name}' has axis {axis!r}")
                if not 0 <= joint < j:
                    raise SchemaError(f"scale_groups: group '{group.name}' joint {joint} out of range")
                if (joint, axis) in seen:
                    raise SchemaError(
                        f"scale_groups: (joint {joint}, axis {axis}) appears in more than one group")
                seen.add((joint, axis))
        if self.keypoint_map.size and (self.keypoint_map.min() < 0
                                       or self.keypoint_map.max() >= j):
            raise SchemaError("keypoint_map: joint index out of range")
        if len(set(self.keypoint_map.tolist())) != self.keypoint_map.size:
            raise SchemaError("keypoint_map: keypoints must map to distinct joints")
        covered = sorted(k for idx in self.joint_groups.values() for k in idx)
        if covered != list(range(self.n_keypoints)):
            raise SchemaError("joint_groups: groups must partition the keypoints")
        if self.symmetry_pairs is not None:
            for a, b in self.symmetry_pairs:
                if not (0 <= a < j and 0 <= b < j):
                    raise SchemaError("symmetry_pairs: joint index out of range")


@dataclass(frozen=True)
class ParamState:
    """Per-image optimization variables."""

    pose: np.ndarray         # (J*3,) axis-angle per joint, radians; root first
    shape: np.ndarray        # (B,) blendshape coefficients
    log_scale: np.ndarray    # (6,) log of per-group scale factors
    translation: np.ndarray  # (3,) camera-frame offset
    focal_length: float      # pixels

    @property
    def kappa(self):
        return ad.exp(self.log_scale)

    @staticmethod
    def rest(model: TemplateModel, focal_length: float = 1.0) -> "ParamState":
        return ParamState(
            pose=np.zeros(model.n_joints * 3),
            shape=np.zeros(model.n_shapes),
            log_scale=np.zeros(model.n_scale_groups),
            translation=np.array([0.0, 0.0, 1.0]),
            focal_length=focal_length,
        )

    def validate(self, model: TemplateModel) -> None:
        if np.asarray(ad.value_of(self.pose)).shape != (model.n_joints * 3,):
            raise InvalidParameterError("pose: wrong length")
        if np.asarray(ad.value_of(self.shape)).shape != (model.n_shapes,):
            raise InvalidParameterError("shape: wrong length")
        if np.asarray(ad.value_of(self.log_scale)).shape != (model.n_scale_groups,):
            raise InvalidParameterError("log_scale: wrong length")
        for name in ("pose", "shape", "log_scale", "translation"):
            if not np.all(np.isfinite(ad.value_of(getattr(self, name)))):
                raise InvalidParameterError(f"{name}: non-finite entry")
        if not float(ad.value_of(self.focal_length)) > 0:
            raise InvalidParameterError("focal_length must be positive")
        if not float(ad.value_of(self.translation)[2]) > 0:
            raise InvalidParameterError("translation depth t_z must be positive")


@dataclass(frozen=True)
class PosedMesh:
    """Output of the skinning pipeline."""

    vertices: object                    # (V, 3) array or Var
    joints: object                      # (J, 3)
    per_joint_global_transforms: object  # (J, 4, 4), scale composed with pose
    vertex_transforms: object = field(default=None, repr=False)  # (V, 4, 4) pose-stage blend


def rodrigues(axis_angle):
    """3x3 rotation from an axis-angle vector; Taylor form below 1e-8 rad."""
    v = ad.value_of(axis_angle)
    if v.shape != (3,):
        raise InvalidParameterError("rodrigues expects a length-3 vector")
    if not np.all(np.isfinite(v)):
        raise InvalidParameterError("rodrigues: non-finite input")
    return rotation_matrices(ad.reshape(axis_angle, (1, 3)))[0]


def rotation_matrices(axis_angles):
    """Batched Rodrigues map, (J, 3) -> (J, 3, 3)."""
    aa = axis_angles
    n = ad.value_of(aa).shape[0]
    t2 = ad.vsum(aa * aa, axis=1)                       # (J,) squared angles
    t2_safe = t2 + 1e-40
    theta = ad.sqrt(t2_safe)
    small = ad.value_of(t2) < _SMALL_ANGLE_SQ
    a = ad.where(small, 1.0 - t2 / 6.0, ad.sin(theta) / theta)
    b = ad.where(small, 0.5 - t2 / 24.0, (1.0 - ad.cos(theta)) / t2_safe)
    wx, wy, wz = aa[:, 0], aa[:, 1], aa[:, 2]
    zero = wx * 0.0
    k_flat = ad.stack([zero, -wz, wy, wz, zero, -wx, -wy, wx, zero], axis=1)
    k = ad.reshape(k_flat, (n, 3, 3))
    k2 = ad.matmul(k, k)
    eye = np.broadcast_to(np.eye(3), (n, 3, 3))
    a3 = ad.reshape(a, (n, 1, 1))
    b3 = ad.reshape(b, (n, 1, 1))
    return eye + a3 * k + b3 * k2


def axis_angle_from_matrix(r: np.ndarray) -> np.ndarray:
    """Inverse Rodrigues map (numpy only; used for initialization)."""
    cos_t = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    if theta < 1e-8:
        return np.zeros(3)
    if np.pi - theta < 1e-6:
        # Near pi the antisymmetric part vanishes; use the symmetric part.
        m = (r + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diagonal(m), 0.0))
        # fix signs from off-diagonals
        if axis[0] > 0:
            axis[1] = np.copysign(axis[1], m[0, 1])
            axis[2] = np.copysign(axis[2], m[0, 2])
        elif axis[1] > 0:
            axis[2] = np.copysign(axis[2], m[1, 2])
        axis /= max(np.linalg.norm(axis), 1e-12)
        return axis * theta
    vec = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return vec * (theta / (2.0 * np.sin(theta)))


def shape_deform(model: TemplateModel, shape):
    """Rest vertices displaced by the linear blendshape basis."""
    if ad.value_of(shape).shape != (model.n_shapes,):
        raise DimensionMismatchError(
            f"shape: expected length {model.n_shapes}, got {ad.value_of(shape).shape}")
    disp = ad.reshape(ad.matmul(model.blend_basis, shape), (model.n_vertices, 3))
    return model.rest_vertices + disp


def regress_joints(model: TemplateModel, vertices):
    return ad.matmul(model.joint_regressor, vertices)


def _scale_rows(model: TemplateModel, kappa):
    """Per-joint diagonal scale rows (J, 3); ungrouped axes stay at 1."""
    axis_group = model.scale_axis_group()
    gathered = ad.getitem(kappa, np.maximum(axis_group, 0))
    return ad.where(axis_group >= 0, gathered, 1.0)


def _anchor_index(model: TemplateModel) -> np.ndarray:
    """Per joint, the joint whose rest position anchors it (parent; root: self)."""
    parents = model.kintree_parents
    return np.where(parents < 0, np.arange(model.n_joints), parents)


def apply_scale(model: TemplateModel, rest_vertices, rest_joints, kappa):
    """Stretch bones (and the skinned mesh) by per-group scale factors.

    Returns (scaled_vertices, scaled_joints).  kappa == 1 everywhere is the
    identity; the plain-numpy path returns its inputs unchanged in that case
    so the unscaled mesh is reproduced bit-exactly.
    """
    kv = np.atleast_1d(ad.value_of(kappa))
    if kv.shape != (model.n_scale_groups,):
        raise DimensionMismatchError(
            f"kappa: expected length {model.n_scale_groups}, got {kv.shape}")
    if np.any(kv <= 0):
        raise InvalidParameterError("kappa: scale factors must be strictly positive")
    diff_path = any(isinstance(x, ad.Var) for x in (rest_vertices, rest_joints, kappa))
    if not diff_path and np.all(kv == 1.0):
        return rest_vertices, rest_joints

    s = _scale_rows(model, kappa)                        # (J, 3)
    anchor_idx = _anchor_index(model)
    anchors = ad.getitem(rest_joints, anchor_idx)        # (J, 3)
    stretched = s * (rest_joints - anchors)              # scaled bone offsets

    tree = model.tree_levels()
    acc = None  # scaled joint positions in level order
    for d, joints in enumerate(tree.levels):
        if d == 0:
            level = ad.getitem(rest_joints, joints)      # root does not move
        else:
            level = ad.getitem(acc, tree.parent_rows[d]) + ad.getitem(stretched, joints)
        acc = level if acc is None else ad.concatenate([acc, level], axis=0)
    scaled_joints = ad.getitem(acc, tree.unorder)        # back to joint order

    # Vertex map per joint j: v -> scaled_anchor_j + s_j * (v - anchor_j),
    # blended with the skinning weights via the diagonal trick.
    scaled_anchor = ad.getitem(scaled_joints, anchor_idx)
    trans = scaled_anchor - s * anchors                  # (J, 3)
    w = model.skin_weights                               # (V, J)
    scaled_vertices = rest_vertices * ad.matmul(w, s) + ad.matmul(w, trans)
    return scaled_vertices, scaled_joints


def scale_affines(model: TemplateModel, rest_joints, kappa):
    """Per-joint 4x4 affine maps of the scale stage (diagnostics/composition)."""
    _, scaled_joints = apply_scale(
        model, ad.value_of(model.rest_vertices), rest_joints, kappa)
    nj = model.n_joints
    s = _scale_rows(model, kappa)
    anchor_idx = _anchor_index(model)
    anchors = ad.getitem(rest_joints, anchor_idx)
    scaled_anchor = ad.getitem(scaled_joints, anchor_idx)
    trans = scaled_anchor - s * anchors
    lin = np.eye(3) * ad.reshape(s, (nj, 3, 1))
    return _affine_batch(lin, trans, nj)


def _affine(linear, translation):
    """Assemble a 4x4 from a 3x3 linear part and a length-3 translation."""
    top = ad.concatenate([linear, ad.reshape(translation, (3, 1))], axis=1)
    bottom = np.array([[0.0, 0.0, 0.0, 1.0]])
    return ad.concatenate([top, bottom], axis=0)


def _affine_batch(linear, translation, n: int):
    """(J,3,3) linear parts + (J,3) translations -> (J,4,4)."""
    top = ad.concatenate([linear, ad.reshape(translation, (n, 3, 1))], axis=2)
    bottom = np.broadcast_to(np.array([0.0, 0.0, 0.0, 1.0]), (n, 1, 4))
    return ad.concatenate([top, bottom], axis=1)


def forward_kinematics(model: TemplateModel, pose, rest_joints):
    """Compose per-joint rotations down the tree.

    Returns (global_transforms (J,4,4), posed_joints (J,3)).  The root
    transform is its rotation anchored at the root rest joint; each child is
    parent o translate(child - parent) o rotate(child).
    """
    pv = ad.value_of(pose)
    if pv.shape != (model.n_joints * 3,):
        raise DimensionMismatchError(
            f"pose: expected length {model.n_joints * 3}, got {pv.shape}")
    jv = ad.value_of(rest_joints)
    if jv.shape != (model.n_joints, 3):
        raise DimensionMismatchError("rest_joints: expected (n_joints, 3)")
    diff_path = isinstance(pose, ad.Var) or isinstance(rest_joints, ad.Var)
    nj = model.n_joints
    if not diff_path and np.all(pv == 0.0):
        transforms = np.tile(np.eye(4), (nj, 1, 1))
        transforms[:, :3, 3] = jv
        return transforms, jv.copy()

    rots = rotation_matrices(ad.reshape(pose, (nj, 3)))
    anchor_idx = _anchor_index(model)
    root_mask = (model.kintree_parents < 0).astype(np.float64).reshape(-1, 1)
    # offset[j] = rest[j] - rest[parent]; the root keeps its rest position.
    offsets = rest_joints - ad.getitem(rest_joints, anchor_idx) * (1.0 - root_mask)
    locals_ = _affine_batch(rots, offsets, nj)

    tree = model.tree_levels()
    acc = None  # global transforms in level order
    for d, joints in enumerate(tree.levels):
        local_level = ad.getitem(locals_, joints)
        if d == 0:
            level = local_level
        else:
            level = ad.matmul(ad.getitem(acc, tree.parent_rows[d]), local_level)
        acc = level if acc is None else ad.concatenate([acc, level], axis=0)
    transforms = ad.getitem(acc, tree.unorder)
    posed_joints = transforms[:, :3, 3]
    return transforms, posed_joints


def skin(model: TemplateModel, params: ParamState,
         joints_from_template: bool = False,
         with_transforms: bool = True) -> PosedMesh:
    """Full pipeline: blendshapes, joint regression, scaling, kinematics, LBS.

    ``joints_from_template`` regresses rest joints from the undeformed
    template instead of the shaped mesh; this makes the output exactly linear
    in the shape coefficients and exists for diagnostics and tests.
    ``with_transforms=False`` skips assembling the per-joint composed
    transforms, which the energy path never reads.
    """
    params.validate(model)
    shaped = shape_deform(model, params.shape)
    joint_source = model.rest_vertices if joints_from_template else shaped
    rest_joints = regress_joints(model, joint_source)
    kappa = params.kappa
    scaled_vertices, scaled_joints = apply_scale(model, shaped, rest_joints, kappa)
    transforms, posed_joints = forward_kinematics(model, params.pose, scaled_joints)

    nj = model.n_joints
    # Relative transforms: undo each joint's scaled rest position, then pose.
    undo = _affine_batch(np.broadcast_to(np.eye(3), (nj, 3, 3)),
                         -scaled_joints, nj)
    rel_stack = ad.matmul(transforms, undo)              # (J, 4, 4)

    w = model.skin_weights                               # (V, J)
    flat = ad.reshape(rel_stack, (nj, 16))
    per_vertex = ad.reshape(ad.matmul(w, flat), (model.n_vertices, 4, 4))
    ones = np.ones((model.n_vertices, 1))
    homo = ad.reshape(ad.concatenate([scaled_vertices, ones], axis=1),
                      (model.n_vertices, 4, 1))
    posed = ad.matmul(per_vertex, homo)[:, :3, 0]

    combined = None
    if with_transforms:
        s_aff = scale_affines(model, rest_joints, kappa)
        combined = ad.matmul(rel_stack, s_aff)           # scale then pose, per joint
    return PosedMesh(vertices=posed, joints=posed_joints,
                     per_joint_global_transforms=combined,
                     vertex_transforms=per_vertex)
