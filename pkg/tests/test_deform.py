import json

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import polar
from scipy.spatial.transform import Rotation

from hogs.deform import (
    Articulation,
    DeformError,
    HandPose,
    InteractionPose,
    ObjectPose,
    SkinnedRig,
    articulate,
    axis_angle_to_matrix,
    forward_kinematics,
    lbs_deform,
    load_rig,
    matrix_to_axis_angle,
    polar_rotation,
    se3,
    wrap_axis_angle,
)
from hogs.fixtures import KNUCKLE_Y, TIP_Y, paddle_rig
from hogs.mesh import box, save_mesh

seeds = st.integers(0, 2**31 - 1)


def rand_aa(rng, n=None, scale=2.5):
    shape = (3,) if n is None else (n, 3)
    return rng.uniform(-scale, scale, shape) / np.sqrt(3)


@given(seeds)
def test_rodrigues_matches_scipy(seed):
    aa = rand_aa(np.random.default_rng(seed), 8)
    np.testing.assert_allclose(axis_angle_to_matrix(torch.tensor(aa)).numpy(),
                               Rotation.from_rotvec(aa).as_matrix(), atol=1e-13)


def test_rodrigues_gradient_finite_at_zero():
    aa = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    (axis_angle_to_matrix(aa) * torch.arange(9.0, dtype=torch.float64).reshape(3, 3)).sum().backward()
    assert torch.isfinite(aa.grad).all()
    assert torch.autograd.gradcheck(lambda a: axis_angle_to_matrix(a), (torch.full((3,), 1e-5, dtype=torch.float64, requires_grad=True),))


def test_wrap_axis_angle_same_rotation():
    aa = np.array([0.0, 0.0, 1.5 * np.pi])
    w = wrap_axis_angle(aa)
    assert np.linalg.norm(w) <= np.pi + 1e-12
    np.testing.assert_allclose(Rotation.from_rotvec(w).as_matrix(), Rotation.from_rotvec(aa).as_matrix(), atol=1e-12)


@given(seeds)
def test_polar_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    m = Rotation.random(random_state=seed).as_matrix() @ (np.eye(3) + 0.3 * rng.normal(size=(3, 3)) * 0.5)
    if np.linalg.det(m) < 0.05:
        return
    u, _ = polar(m)
    np.testing.assert_allclose(polar_rotation(torch.tensor(m)).numpy(), u, atol=1e-10)


def test_polar_rejects_degenerate():
    with pytest.raises(DeformError, match="degenerate"):
        polar_rotation(torch.zeros(3, 3, dtype=torch.float64))


def test_rest_pose_is_identity():
    rig = paddle_rig()
    bones, world = forward_kinematics(rig, HandPose.identity(3))
    np.testing.assert_allclose(bones.numpy(), np.tile(np.eye(4), (3, 1, 1)), atol=1e-15)
    np.testing.assert_allclose(world[:, :3, 3].numpy(), [[0, 0, 0], [0, KNUCKLE_Y, 0], [0, TIP_Y, 0]])


def test_fk_root_pivots_about_wrist():
    rig = paddle_rig()
    aa = np.array([0.0, 0.0, np.pi / 2])
    _, world = forward_kinematics(rig, HandPose(aa, [1.0, 0, 0], np.zeros((3, 3))))
    # root at the origin, +y finger rotated to -x, then translated
    np.testing.assert_allclose(world[0, :3, 3].numpy(), [1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(world[2, :3, 3].numpy(), [1 - TIP_Y, 0, 0], atol=1e-15)


def test_fk_chain_matches_manual():
    rig = paddle_rig()
    rng = np.random.default_rng(0)
    pose = HandPose(rand_aa(rng), rng.normal(size=3), rand_aa(rng, 3))
    _, world = forward_kinematics(rig, pose)
    R = [Rotation.from_rotvec(pose.joint_rotations[j]).as_matrix() for j in range(3)]
    G = Rotation.from_rotvec(pose.root_rotation).as_matrix()
    p1 = pose.root_translation + G @ R[0] @ np.array([0, KNUCKLE_Y, 0])
    p2 = p1 + G @ R[0] @ R[1] @ np.array([0, TIP_Y - KNUCKLE_Y, 0])
    np.testing.assert_allclose(world[1, :3, 3].numpy(), p1, atol=1e-14)
    np.testing.assert_allclose(world[2, :3, 3].numpy(), p2, atol=1e-14)


def test_fk_joint_count_mismatch():
    with pytest.raises(DeformError, match="joint rotations"):
        forward_kinematics(paddle_rig(), HandPose.identity(2))


@given(seeds)
def test_single_bone_lbs_is_rigid(seed):
    rng = np.random.default_rng(seed)
    bones = se3(torch.tensor(rand_aa(rng, 4)), torch.tensor(rng.normal(size=(4, 3))))
    j = int(rng.integers(4))
    x = torch.tensor(rng.normal(size=(6, 3)))
    w = torch.zeros(6, 4, dtype=torch.float64)
    w[:, j] = 1
    expect = x @ bones[j, :3, :3].T + bones[j, :3, 3]
    np.testing.assert_allclose(lbs_deform(x, w, bones).numpy(), expect.numpy(), atol=1e-12)


def test_rig_validation():
    rig = paddle_rig()
    with pytest.raises(DeformError, match="sum to 1"):
        SkinnedRig(rig.names, rig.parents, rig.rest_local, rig.weights * 0.5, rig.canonical_mesh)
    with pytest.raises(DeformError, match="parents"):
        SkinnedRig(rig.names, [-1, 2, 1], rig.rest_local, rig.weights, rig.canonical_mesh)


def test_rig_json_round_trip(tmp_path):
    rig = paddle_rig()
    save_mesh(rig.canonical_mesh, tmp_path / "p.obj")
    (tmp_path / "rig.json").write_text(json.dumps(rig.to_json("p.obj")))
    r2 = load_rig(tmp_path / "rig.json")
    np.testing.assert_array_equal(r2.weights, rig.weights)
    np.testing.assert_array_equal(r2.rest_world, rig.rest_world)
    np.testing.assert_array_equal(r2.contact_candidates, rig.contact_candidates)


def test_interaction_pose_json_round_trip(tmp_path, ref_pose):
    ref_pose.save(tmp_path / "p.json")
    p2 = InteractionPose.load(tmp_path / "p.json")
    assert p2.to_json() == ref_pose.to_json()


def test_object_pose_rejects_non_rotation():
    with pytest.raises(DeformError):
        ObjectPose(np.diag([1.0, 1.0, -1.0, 1.0]))


def test_non_finite_hand_pose():
    with pytest.raises(DeformError, match="non-finite"):
        HandPose([np.nan, 0, 0], np.zeros(3), np.zeros((3, 3)))


@given(seeds)
def test_se3_round_trip(seed):
    rng = np.random.default_rng(seed)
    aa, t = rand_aa(rng), rng.normal(size=3)
    T = se3(torch.tensor(aa), torch.tensor(t)).numpy()
    T2 = se3(torch.tensor(matrix_to_axis_angle(T[:3, :3])), torch.tensor(T[:3, 3])).numpy()
    np.testing.assert_allclose(T2, T, atol=1e-12)
    np.testing.assert_allclose(T @ np.linalg.inv(T), np.eye(4), atol=1e-12)


def test_articulation_hinge():
    m = box((1.0, 1.0, 1.0), (2, 1, 1))
    labels = (m.vertices[:, 0] > 0.25).astype(int)
    out = articulate(m, labels, (0.0, 0.0, 0.0), (0.0, 0.0, 2.0), np.pi / 2)
    np.testing.assert_array_equal(out.vertices[labels == 0], m.vertices[labels == 0])
    moved = m.vertices[labels == 1]
    np.testing.assert_allclose(out.vertices[labels == 1], np.c_[-moved[:, 1], moved[:, 0], moved[:, 2]], atol=1e-15)
    # distances to the hinge line are preserved
    np.testing.assert_allclose(np.linalg.norm(out.vertices[:, :2], axis=1), np.linalg.norm(m.vertices[:, :2], axis=1))


def test_articulation_label_file(tmp_path):
    (tmp_path / "labels.txt").write_text("0 1 1\n")
    a = Articulation.from_json({"axis_point": [0, 0, 0], "axis_dir": [0, 0, 3], "part_labels": "labels.txt"}, tmp_path)
    np.testing.assert_array_equal(a.part_labels, [0, 1, 1])
    np.testing.assert_allclose(a.axis_dir, [0, 0, 1])
    with pytest.raises(DeformError):
        Articulation([0, 0, 0], [0, 0, 0], [0])
