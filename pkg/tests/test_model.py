import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import quadfit.autodiff as ad
from quadfit.errors import InvalidParameterError, SchemaError
from quadfit.model import (
    ParamState,
    ScaleGroup,
    TemplateModel,
    apply_scale,
    axis_angle_from_matrix,
    forward_kinematics,
    regress_joints,
    rodrigues,
    rotation_matrices,
    shape_deform,
    skin,
)
from quadfit.zoo import build_dog_scale_model, build_toy_model

from conftest import sample_params


# --- independent oracle: rotation via unit quaternions ----------------------

def quaternion_rotation(axis_angle: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(axis_angle)
    if theta == 0.0:
        return np.eye(3)
    axis = axis_angle / theta
    w = np.cos(theta / 2.0)
    x, y, z = np.sin(theta / 2.0) * axis
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def toy_12_vertex_model() -> TemplateModel:
    """Hand-built 12-vertex, 3-joint chain for oracle comparisons."""
    verts = np.array([
        [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.5, 0.5, 0.5], [0.25, 0.0, 1.0],
        [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [1.5, 0.5, 0.5], [1.25, 0.0, 1.0],
        [2.0, 0.0, 0.0], [2.0, 1.0, 0.0], [2.5, 0.5, 0.5], [2.25, 0.0, 1.0],
    ])
    faces = np.array([[0, 1, 2], [4, 5, 6], [8, 9, 10], [1, 5, 9]])
    parents = np.array([-1, 0, 1])
    regressor = np.zeros((3, 12))
    for j in range(3):
        regressor[j, 4 * j:4 * j + 4] = 0.25
    weights = np.zeros((12, 3))
    weights[0:4, 0] = 1.0
    weights[4:6, 0] = 0.5
    weights[4:6, 1] = 0.5
    weights[6:8, 1] = 1.0
    weights[8:10, 1] = 0.25
    weights[8:10, 2] = 0.75
    weights[10:12, 2] = 1.0
    rng = np.random.default_rng(5)
    basis = rng.normal(0.0, 0.05, (36, 2))
    groups = (
        ScaleGroup("g0", ((1, "x"),)),
        ScaleGroup("g1", ((2, "x"), (2, "y"))),
        ScaleGroup("g2", ((1, "z"),)),
        ScaleGroup("g3", ()),
        ScaleGroup("g4", ((2, "z"),)),
        ScaleGroup("g5", ((1, "y"),)),
    )
    model = TemplateModel(
        rest_vertices=verts, faces=faces, kintree_parents=parents,
        joint_regressor=regressor, skin_weights=weights, blend_basis=basis,
        scale_groups=groups, keypoint_map=np.array([0, 1, 2]),
        joint_groups={"legs": (0,), "tail": (1,), "ears": (), "face": (2,)},
        name="chain-12")
    model.validate()
    return model


class TestRodrigues:
    def test_zero_rotation_is_identity(self):
        np.testing.assert_array_equal(rodrigues(np.zeros(3)), np.eye(3))

    def test_quarter_turn_about_z(self):
        r = rodrigues(np.array([0.0, 0.0, np.pi / 2]))
        np.testing.assert_allclose(r @ np.array([1.0, 0.0, 0.0]),
                                   np.array([0.0, 1.0, 0.0]), atol=1e-15)

    def test_matches_quaternion_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            aa = rng.normal(0.0, 1.2, 3)
            np.testing.assert_allclose(rodrigues(aa), quaternion_rotation(aa),
                                       atol=1e-12)

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidParameterError):
            rodrigues(np.array([np.nan, 0.0, 0.0]))

    def test_orthonormal_unit_determinant_bulk(self):
        # direction * magnitude sweep, including near-zero and near-pi angles
        rng = np.random.default_rng(7)
        aa = rng.normal(size=(10_000, 3))
        aa *= (rng.uniform(1e-12, np.pi, (10_000, 1)) /
               np.maximum(np.linalg.norm(aa, axis=1, keepdims=True), 1e-300))
        rots = np.asarray(rotation_matrices(aa))
        eye = np.broadcast_to(np.eye(3), rots.shape)
        err = np.abs(np.matmul(np.swapaxes(rots, 1, 2), rots) - eye).max()
        assert err < 1e-12
        assert np.abs(np.linalg.det(rots) - 1.0).max() < 1e-12

    def test_continuity_at_zero(self):
        tiny = rodrigues(np.array([1e-12, 0.0, 0.0]))
        np.testing.assert_allclose(tiny, np.eye(3), atol=1e-11)

    def test_axis_angle_round_trip(self):
        # extraction is canonical (angle <= pi), so sample inside that range
        rng = np.random.default_rng(3)
        for _ in range(50):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            aa = direction * rng.uniform(1e-6, 0.98 * np.pi)
            back = axis_angle_from_matrix(np.asarray(rodrigues(aa)))
            np.testing.assert_allclose(back, aa, atol=1e-9)

    def test_axis_angle_extraction_near_pi(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            aa = direction * (np.pi - 1e-8)
            back = axis_angle_from_matrix(np.asarray(rodrigues(aa)))
            # same rotation even if the axis sign flips at the pi boundary
            np.testing.assert_allclose(np.asarray(rodrigues(back)),
                                       np.asarray(rodrigues(aa)), atol=1e-6)


class TestShapeDeform:
    def test_zero_coefficients(self, toy_model):
        out = shape_deform(toy_model, np.zeros(toy_model.n_shapes))
        np.testing.assert_array_equal(out, toy_model.rest_vertices)

    def test_unit_vector_picks_column(self, toy_model):
        beta = np.zeros(toy_model.n_shapes)
        beta[1] = 1.0
        out = shape_deform(toy_model, beta)
        expected = toy_model.rest_vertices + toy_model.blend_basis[:, 1].reshape(-1, 3)
        np.testing.assert_allclose(out, expected, atol=1e-15)

    def test_doubling_doubles_displacement(self, toy_model):
        rng = np.random.default_rng(0)
        beta = rng.normal(size=toy_model.n_shapes)
        d1 = shape_deform(toy_model, beta) - toy_model.rest_vertices
        d2 = shape_deform(toy_model, 2.0 * beta) - toy_model.rest_vertices
        np.testing.assert_allclose(d2, 2.0 * d1, atol=1e-12)

    def test_dimension_mismatch(self, toy_model):
        with pytest.raises(InvalidParameterError):
            shape_deform(toy_model, np.zeros(toy_model.n_shapes + 1))


class TestApplyScale:
    def test_identity_is_bit_exact(self, toy_model):
        joints = regress_joints(toy_model, toy_model.rest_vertices)
        sv, sj = apply_scale(toy_model, toy_model.rest_vertices, joints,
                             np.ones(6))
        np.testing.assert_array_equal(sv, toy_model.rest_vertices)
        np.testing.assert_array_equal(sj, joints)

    @pytest.mark.parametrize("builder", [build_toy_model, build_dog_scale_model])
    def test_leg_group_grows_bones_exactly(self, builder):
        model = builder()[0]
        joints = np.asarray(regress_joints(model, model.rest_vertices))
        gi = [i for i, g in enumerate(model.scale_groups) if g.name == "legs"][0]
        kappa = np.ones(6)
        kappa[gi] = 1.25
        _, scaled = apply_scale(model, model.rest_vertices, joints, kappa)
        scaled = np.asarray(scaled)
        axis_of = {"x": 0, "y": 1, "z": 2}
        for joint, axis in model.scale_groups[gi].entries:
            a = axis_of[axis]
            parent = model.kintree_parents[joint]
            before = joints[joint, a] - joints[parent, a]
            after = scaled[joint, a] - scaled[parent, a]
            assert after == pytest.approx(1.25 * before, abs=1e-9)

    def test_disjoint_support_untouched(self):
        model = toy_12_vertex_model()
        joints = np.asarray(regress_joints(model, model.rest_vertices))
        kappa = np.ones(6)
        kappa[1] = 1.5  # scales joint 2 only; verts 0..5 have no joint-2 weight
        sv, sj = apply_scale(model, model.rest_vertices, joints, kappa)
        sv, sj = np.asarray(sv), np.asarray(sj)
        np.testing.assert_array_equal(sj[:2], joints[:2])
        np.testing.assert_allclose(sv[:8], model.rest_vertices[:8], atol=1e-15)

    def test_rejects_non_positive(self, toy_model):
        joints = regress_joints(toy_model, toy_model.rest_vertices)
        with pytest.raises(InvalidParameterError):
            apply_scale(toy_model, toy_model.rest_vertices, joints,
                        np.array([1.0, -0.5, 1, 1, 1, 1]))

    def test_doubling_composes_multiplicatively(self, toy_model):
        joints = np.asarray(regress_joints(toy_model, toy_model.rest_vertices))
        gi = 0
        group = toy_model.scale_groups[gi]
        axis_of = {"x": 0, "y": 1, "z": 2}

        def extents(kval):
            kappa = np.ones(6)
            kappa[gi] = kval
            _, sj = apply_scale(toy_model, toy_model.rest_vertices, joints, kappa)
            sj = np.asarray(sj)
            return np.array([
                sj[j, axis_of[a]] - sj[toy_model.kintree_parents[j], axis_of[a]]
                for j, a in group.entries])

        base = extents(1.0)
        np.testing.assert_allclose(extents(2.0), 2.0 * base, rtol=1e-12)
        np.testing.assert_allclose(extents(4.0), 4.0 * base, rtol=1e-12)


class TestForwardKinematics:
    def test_identity_pose_is_rest(self, toy_model):
        joints = np.asarray(regress_joints(toy_model, toy_model.rest_vertices))
        transforms, posed = forward_kinematics(
            toy_model, np.zeros(toy_model.n_joints * 3), joints)
        np.testing.assert_array_equal(posed, joints)
        np.testing.assert_array_equal(transforms[0][:3, :3], np.eye(3))

    def test_two_joint_chain_analytic(self):
        model = toy_12_vertex_model()
        joints = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
        pose = np.zeros(9)
        pose[2] = np.pi / 2  # root turns about z
        _, posed = forward_kinematics(model, pose, joints)
        posed = np.asarray(posed)
        np.testing.assert_allclose(posed[1], [0.0, 1.0, 0.0], atol=1e-14)
        np.testing.assert_allclose(posed[2], [0.0, 2.0, 0.0], atol=1e-14)

    def test_bone_lengths_preserved(self, toy_model):
        rng = np.random.default_rng(9)
        joints = np.asarray(regress_joints(toy_model, toy_model.rest_vertices))
        for _ in range(10):
            pose = rng.normal(0.0, 0.6, toy_model.n_joints * 3)
            _, posed = forward_kinematics(toy_model, pose, joints)
            posed = np.asarray(posed)
            for j in range(1, toy_model.n_joints):
                p = toy_model.kintree_parents[j]
                if p < 0:
                    continue
                before = np.linalg.norm(joints[j] - joints[p])
                after = np.linalg.norm(posed[j] - posed[p])
                assert after == pytest.approx(before, abs=1e-9)


def naive_skin_oracle(model: TemplateModel, params: ParamState) -> np.ndarray:
    """Straightforward per-vertex reimplementation of the whole pipeline."""
    shaped = model.rest_vertices + (model.blend_basis @ params.shape).reshape(-1, 3)
    joints = model.joint_regressor @ shaped
    kappa = np.exp(params.log_scale)

    scale_of = np.ones((model.n_joints, 3))
    for gi, group in enumerate(model.scale_groups):
        for j, axis in group.entries:
            scale_of[j, {"x": 0, "y": 1, "z": 2}[axis]] = kappa[gi]
    scaled_joints = np.zeros_like(joints)
    for j in range(model.n_joints):
        p = model.kintree_parents[j]
        if p < 0:
            scaled_joints[j] = joints[j]
        else:
            scaled_joints[j] = scaled_joints[p] + scale_of[j] * (joints[j] - joints[p])
    scaled_verts = np.zeros_like(shaped)
    for v in range(model.n_vertices):
        acc = np.zeros(3)
        for j in range(model.n_joints):
            w = model.skin_weights[v, j]
            if w == 0.0:
                continue
            p = model.kintree_parents[j]
            anchor = joints[j] if p < 0 else joints[p]
            moved_anchor = scaled_joints[j] if p < 0 else scaled_joints[p]
            acc += w * (moved_anchor + scale_of[j] * (shaped[v] - anchor))
        scaled_verts[v] = acc

    pose = params.pose.reshape(-1, 3)
    globals_ = [None] * model.n_joints
    for j in range(model.n_joints):
        r = quaternion_rotation(pose[j])
        p = model.kintree_parents[j]
        offset = scaled_joints[j] if p < 0 else scaled_joints[j] - scaled_joints[p]
        local = np.eye(4)
        local[:3, :3] = r
        local[:3, 3] = offset
        globals_[j] = local if p < 0 else globals_[p] @ local
    out = np.zeros_like(scaled_verts)
    for v in range(model.n_vertices):
        acc = np.zeros(3)
        for j in range(model.n_joints):
            w = model.skin_weights[v, j]
            if w == 0.0:
                continue
            rel = globals_[j] @ np.vstack([np.hstack([np.eye(3),
                                                      -scaled_joints[j][:, None]]),
                                           [0, 0, 0, 1]])
            acc += w * (rel @ np.append(scaled_verts[v], 1.0))[:3]
        out[v] = acc
    return out


class TestSkin:
    def test_full_identity(self, toy_model):
        params = ParamState.rest(toy_model)
        mesh = skin(toy_model, params)
        np.testing.assert_array_equal(np.asarray(mesh.vertices),
                                      toy_model.rest_vertices)

    def test_single_weight_vertex_follows_joint_transform(self):
        model = toy_12_vertex_model()
        rng = np.random.default_rng(2)
        params = ParamState(pose=rng.normal(0, 0.4, 9),
                            shape=rng.normal(0, 0.5, 2),
                            log_scale=rng.normal(0, 0.1, 6),
                            translation=np.array([0.0, 0.0, 4.0]),
                            focal_length=32.0)
        mesh = skin(model, params)
        transforms = np.asarray(mesh.per_joint_global_transforms)
        shaped = model.rest_vertices + (model.blend_basis @ params.shape).reshape(-1, 3)
        for v in (10, 11):  # weight 1.0 on joint 2
            expected = (transforms[2] @ np.append(shaped[v], 1.0))[:3]
            np.testing.assert_allclose(np.asarray(mesh.vertices)[v], expected,
                                       atol=1e-10)

    def test_matches_naive_oracle(self):
        model = toy_12_vertex_model()
        rng = np.random.default_rng(17)
        for _ in range(5):
            params = ParamState(pose=rng.normal(0, 0.7, 9),
                                shape=rng.normal(0, 1.0, 2),
                                log_scale=rng.normal(0, 0.2, 6),
                                translation=np.array([0.0, 0.0, 4.0]),
                                focal_length=32.0)
            mesh = skin(model, params)
            np.testing.assert_allclose(np.asarray(mesh.vertices),
                                       naive_skin_oracle(model, params),
                                       atol=1e-10)

    def test_linear_in_shape_with_template_joints(self, toy_model):
        rng = np.random.default_rng(23)
        pose = rng.normal(0, 0.4, toy_model.n_joints * 3)
        log_scale = rng.normal(0, 0.1, 6)

        def verts(beta):
            p = ParamState(pose=pose, shape=beta, log_scale=log_scale,
                           translation=np.array([0.0, 0.0, 5.0]),
                           focal_length=64.0)
            return np.asarray(skin(toy_model, p, joints_from_template=True).vertices)

        b1 = rng.normal(size=3)
        b2 = rng.normal(size=3)
        a, b = 0.7, -1.3
        base = verts(np.zeros(3))
        d1 = verts(b1) - base
        d2 = verts(b2) - base
        combined = verts(a * b1 + b * b2) - base
        np.testing.assert_allclose(combined, a * d1 + b * d2, atol=1e-8)

    def test_transform_determinants_positive(self, toy_model, toy_priors):
        rng = np.random.default_rng(31)
        params = sample_params(toy_model, toy_priors, rng)
        mesh = skin(toy_model, params)
        dets = np.linalg.det(np.asarray(mesh.per_joint_global_transforms)[:, :3, :3])
        assert np.all(dets > 0)

    def test_differentiable_through_tape(self, toy_model):
        params = ParamState.rest(toy_model, focal_length=64.0)

        def energy(p):
            mesh = skin(toy_model, p, with_transforms=False)
            return ad.vsum(mesh.vertices * mesh.vertices)

        value, grads = ad.record_and_backward(energy, params)
        assert value > 0
        assert np.all(np.isfinite(grads["pose"]))
        # gradients at the exact rest pose must exist and be finite
        report = ad.finite_diff_check(energy, params, h=1e-6)
        assert report.worst < 1e-4


class TestValidation:
    def test_bad_skin_weight_row_named(self):
        model = toy_12_vertex_model()
        weights = model.skin_weights.copy()
        weights[3, 0] = 0.9
        with pytest.raises(SchemaError, match="row 3"):
            dataclasses.replace(model, skin_weights=weights).validate()

    def test_two_roots_rejected(self):
        model = toy_12_vertex_model()
        parents = model.kintree_parents.copy()
        parents[1] = -1
        with pytest.raises(SchemaError, match="root"):
            dataclasses.replace(model, kintree_parents=parents).validate()

    def test_duplicate_scale_entry_rejected(self):
        model = toy_12_vertex_model()
        groups = model.scale_groups[:5] + (ScaleGroup("dup", ((1, "x"),)),)
        with pytest.raises(SchemaError, match="more than one group"):
            dataclasses.replace(model, scale_groups=groups).validate()


@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
@settings(max_examples=25, deadline=None)
def test_skin_identity_property_any_model(seed):
    # identity parameters reproduce the rest mesh for randomized toy models
    rng = np.random.default_rng(seed)
    model = toy_12_vertex_model()
    jitter = rng.normal(0.0, 0.2, model.rest_vertices.shape)
    jittered = dataclasses.replace(model, rest_vertices=model.rest_vertices + jitter)
    params = ParamState.rest(jittered)
    mesh = skin(jittered, params)
    np.testing.assert_array_equal(np.asarray(mesh.vertices),
                                  jittered.rest_vertices)
