import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from hogs.deform import HandPose, InteractionPose, ObjectPose
from hogs.fixtures import SPHERE_RADIUS, build_model, reference_pose
from hogs.mesh import TriangleMesh, icosphere
from hogs.pose_opt import (
    FrozenContactPrior,
    GraspContext,
    ObjectSamples,
    PerturbationConfig,
    PomConfig,
    PomError,
    compute_contact_map,
    contact_values,
    loss_contact_consistency,
    loss_hand_centric,
    loss_penetration,
    optimize_pose,
    pom_loss,
    reference_grasp_prior,
    sample_perturbation,
)
from hogs.scene import pose_tensors


def contact_oracle(hand, obj, k=100.0):
    d = np.sqrt(((obj[:, None, :] - hand[None]) ** 2).sum(-1)).min(1)
    return 2.0 / (1.0 + np.exp(k * d))


def test_contact_frozen_values():
    hand = torch.tensor([[0.0, 0.0, 0.0]], dtype=torch.float64)
    obj = torch.tensor([[0.0, 0.0, 0.0], [0.01, 0.0, 0.0], [0.0, 0.03, 0.04]], dtype=torch.float64)
    # 2*sigmoid(-1) and 2*sigmoid(-5)
    np.testing.assert_allclose(contact_values(hand, obj).numpy(), [1.0, 0.5378828427399902, 0.013385701848569713],
                               rtol=1e-14)


@given(st.integers(0, 10**6))
def test_contact_matches_all_pairs_oracle(seed):
    rng = np.random.default_rng(seed)
    hand, obj = rng.normal(scale=0.03, size=(40, 3)), rng.normal(scale=0.03, size=(30, 3))
    cm = compute_contact_map(hand, obj)
    np.testing.assert_allclose(cm.values, contact_oracle(hand, obj), atol=1e-14)
    assert ((cm.values >= 0) & (cm.values <= 1)).all()


@given(st.integers(0, 10**6))
def test_contact_mirror_symmetry(seed):
    rng = np.random.default_rng(seed)
    hand, obj = rng.normal(scale=0.03, size=(25, 3)), rng.normal(scale=0.03, size=(20, 3))
    flip = np.array([-1.0, 1.0, 1.0])
    np.testing.assert_allclose(compute_contact_map(hand * flip, obj * flip).values,
                               compute_contact_map(hand, obj).values, atol=1e-15)


def test_contact_two_hands_is_max_of_each():
    rng = np.random.default_rng(0)
    l, r, obj = (rng.normal(scale=0.03, size=(20, 3)) for _ in range(3))
    both = compute_contact_map([l, r], obj).values
    np.testing.assert_allclose(both, np.maximum(compute_contact_map(l, obj).values, compute_contact_map(r, obj).values))


def test_contact_gradient_matches_finite_difference():
    rng = np.random.default_rng(1)
    hand = torch.tensor(rng.normal(scale=0.02, size=(15, 3)), requires_grad=True)
    obj = torch.tensor(rng.normal(scale=0.02, size=(12, 3)))
    w = torch.tensor(rng.normal(size=12))
    assert torch.autograd.gradcheck(lambda h: (contact_values(h, obj) * w).sum(), (hand,), eps=1e-7, atol=1e-6)


def test_contact_errors():
    with pytest.raises(ValueError, match="empty point cloud"):
        contact_values(torch.zeros(0, 3), torch.zeros(2, 3))
    with pytest.raises(ValueError, match="size mismatch"):
        loss_contact_consistency(torch.zeros(3), torch.zeros(4))


def test_hand_centric_clamps_at_tau():
    sphere = icosphere(3)
    pts = torch.tensor([[0.0, 0.0, 1.005], [0.0, 0.0, 1.5]], dtype=torch.float64)
    val = float(loss_hand_centric(pts, sphere, tau=0.02))
    d0 = float(np.linalg.norm([0, 0, 1.005]) - 1.0)
    assert val == pytest.approx((d0 + 0.02) / 2, abs=2e-3)
    with pytest.raises(ValueError, match="no contact-candidate"):
        loss_hand_centric(torch.zeros(0, 3), sphere)


def test_penetration_counts_inside_only():
    sphere = icosphere(3, 0.1)
    pts = torch.tensor([[0.0, 0.0, 0.08], [0.0, 0.0, 0.2], [0.0, 0.0, 0.0]], dtype=torch.float64, requires_grad=True)
    lp = loss_penetration(pts, sphere)
    assert float(lp.detach()) == pytest.approx(0.02 + 0.1, abs=2e-3)
    lp.backward()
    assert torch.equal(pts.grad[1], torch.zeros(3, dtype=torch.float64))
    outside = torch.tensor([[0.0, 0.0, 0.3]], dtype=torch.float64)
    assert float(loss_penetration(outside, sphere)) == 0.0
    open_mesh = TriangleMesh(sphere.vertices, sphere.faces[:-1])
    with pytest.raises(ValueError, match="watertight"):
        loss_penetration(outside, open_mesh)


def test_frozen_prior_checks_length():
    p = FrozenContactPrior({"left": np.zeros(3), "right": np.ones(3)})
    assert p(None, np.zeros((3, 3)))["right"].sum() == 3
    with pytest.raises(ValueError, match="3 points"):
        p(None, np.zeros((4, 3)))
    np.testing.assert_array_equal(p.combined(), np.ones(3))


# ---------------------------------------------------------------- perturbation


def test_zero_perturbation_is_identity(ref_pose):
    out = sample_perturbation(ref_pose, PerturbationConfig.zero(), np.random.default_rng(0))
    assert out.to_json() == ref_pose.to_json()


def test_retreat_is_five_percent(ref_pose):
    cfg = PerturbationConfig(rot_range_deg=0, jitter_range=0)
    out = sample_perturbation(ref_pose, cfg, np.random.default_rng(0))
    c = ref_pose.object.translation
    for s in ("left", "right"):
        np.testing.assert_allclose(out.hand(s).root_translation - c, 1.05 * (ref_pose.hand(s).root_translation - c))


@settings(max_examples=30)
@given(st.integers(0, 10**6))
def test_perturbation_ranges(seed):
    ref = reference_pose()
    ref.object.articulation_angle = 0.0
    out, info = sample_perturbation(ref, PerturbationConfig(), np.random.default_rng(seed), return_info=True)
    for s in ("left", "right"):
        a = info["angles_deg"][s]
        assert ((a >= 0) & (a <= 20)).all()
        expect = Rotation.from_euler("xyz", a, degrees=True) * Rotation.from_rotvec(ref.hand(s).root_rotation)
        np.testing.assert_allclose(Rotation.from_rotvec(out.hand(s).root_rotation).as_matrix(), expect.as_matrix(),
                                   atol=1e-12)
        base = ref.hand(s).root_translation * 1.05
        assert np.linalg.norm(out.hand(s).root_translation - base) == pytest.approx(info["jitter"][s], abs=1e-12)
        assert info["jitter"][s] <= 0.06
    assert np.linalg.norm(out.object.translation) <= 0.06
    assert 0.01 * math.pi <= out.object.articulation_angle <= 0.2 * math.pi
    np.testing.assert_array_equal(out.object.T[:3, :3], ref.object.T[:3, :3])


def test_rigid_object_gets_no_articulation(ref_pose):
    out = sample_perturbation(ref_pose, PerturbationConfig(), np.random.default_rng(3))
    assert out.object.articulation_angle is None


def test_root_at_center_rejected(ref_pose):
    with pytest.raises(ValueError, match="coincides"):
        sample_perturbation(ref_pose, PerturbationConfig(), np.random.default_rng(0),
                            object_center=ref_pose.left.root_translation)


def test_perturbation_config_validation():
    with pytest.raises(ValueError):
        PerturbationConfig(jitter_range=-1)
    with pytest.raises(ValueError, match="reversed"):
        PerturbationConfig(articulation_range=(0.5, 0.1))
    c = PerturbationConfig(seed=4)
    assert PerturbationConfig.from_json(c.to_json()) == c


# ---------------------------------------------------------------- optimization


def test_lr_warmup():
    c = PomConfig()
    assert c.lr(0, 5e-4) == 6.25e-6
    assert c.lr(10, 5e-4) == pytest.approx((6.25e-6 + 5e-4) / 2)
    assert c.lr(20, 5e-4) == 5e-4 and c.lr(150, 5e-4) == 5e-4
    with pytest.raises(ValueError):
        PomConfig(optimizer="lbfgs")


@pytest.fixture(scope="module")
def grasp():
    model = build_model(k=1, sh_degree=0, dtype=torch.float64)
    ref = reference_pose()
    samples = ObjectSamples.sample(model, 512, 0)
    prior = reference_grasp_prior(model, ref, samples)
    return model, ref, samples, prior


def test_pom_loss_components_weighted(grasp):
    model, ref, samples, prior = grasp
    p = sample_perturbation(ref, PerturbationConfig(), np.random.default_rng(2))
    ctx = GraspContext(model, samples, p.object)
    cfg = PomConfig(lambda_c=0.7, lambda_h=1.3, lambda_p=17)
    total, br = pom_loss(ctx, pose_tensors(p), prior.maps, cfg)
    expect = sum(0.7 * b["contact"] + 1.3 * b["hand_centric"] + 17 * b["penetration"] for b in br.values())
    assert float(total) == pytest.approx(float(expect), abs=1e-12)


def test_reference_pose_has_zero_contact_loss(grasp):
    model, ref, samples, prior = grasp
    ctx = GraspContext(model, samples, ref.object)
    _, br = pom_loss(ctx, pose_tensors(ref), prior.maps, PomConfig())
    for b in br.values():
        assert float(b["contact"]) == 0.0 and float(b["penetration"]) == 0.0


def test_optimize_zero_perturbation_stays_put(grasp):
    model, ref, samples, prior = grasp
    ctx = GraspContext(model, samples, ref.object)
    out, trace = optimize_pose(ctx, ref, prior, PomConfig(iterations=15))
    assert len(trace) == 16
    for s in ("left", "right"):
        assert np.abs(out.hand(s).root_translation - ref.hand(s).root_translation).max() < 2e-3
    assert trace[-1]["penetration"] <= 1e-4


def test_optimize_reduces_loss_and_keeps_object(grasp):
    model, ref, samples, prior = grasp
    p = sample_perturbation(ref, PerturbationConfig(), np.random.default_rng(11))
    ctx = GraspContext(model, samples, p.object)
    out, trace = optimize_pose(ctx, p, prior, PomConfig(iterations=40))
    assert trace[-1]["total"] < trace[0]["total"]
    assert out.object is p.object


def test_optimize_reduces_forced_penetration(grasp):
    model, ref, samples, prior = grasp
    hands = {}
    for s in ("left", "right"):
        h = ref.hand(s)
        hands[s] = HandPose(h.root_rotation, h.root_translation - np.sign(h.root_translation[0]) * np.array([0.005, 0, 0]),
                            h.joint_rotations)
    p = InteractionPose(hands["left"], hands["right"], ref.object)
    _, trace = optimize_pose(GraspContext(model, samples, p.object), p, prior, PomConfig(iterations=60))
    assert trace[0]["penetration"] > 1e-3
    assert trace[-1]["penetration"] < 0.05 * trace[0]["penetration"]


def test_non_finite_prior_raises(grasp):
    model, ref, samples, prior = grasp
    bad = {s: np.full(len(samples), np.nan) for s in ("left", "right")}
    with pytest.raises(PomError, match="non-finite") as exc:
        optimize_pose(GraspContext(model, samples, ref.object), ref, bad, PomConfig(iterations=3))
    assert len(exc.value.trace) == 1


def test_sgd_option_runs(grasp):
    model, ref, samples, prior = grasp
    _, trace = optimize_pose(GraspContext(model, samples, ref.object), ref, prior,
                             PomConfig(iterations=3, optimizer="sgd", grad_clip=10.0))
    assert len(trace) == 4


def test_contact_closed_forms():
    far = compute_contact_map(np.zeros((5, 3)), np.full((4, 3), 1.0 / np.sqrt(3)))
    assert (far.values < 1e-8).all()
    assert float(loss_contact_consistency(torch.ones(2048), torch.zeros(2048))) == 2048.0
    rng = np.random.default_rng(0)
    a, b = rng.random(50), rng.random(50)
    assert float(loss_contact_consistency(torch.tensor(a), torch.tensor(b))) == pytest.approx(((a - b) ** 2).sum(), abs=1e-10)


def test_hand_centric_saturates_and_vanishes():
    sphere = icosphere(2)
    far = torch.tensor(sphere.vertices * 1.5)
    assert float(loss_hand_centric(far, sphere, tau=0.02)) == pytest.approx(0.02, abs=1e-15)
    assert float(loss_hand_centric(torch.tensor(sphere.vertices), sphere)) == 0.0


def test_penetration_unit_sphere_center():
    assert float(loss_penetration(torch.zeros(1, 3, dtype=torch.float64), icosphere(3))) == pytest.approx(1.0, rel=0.02)


def test_zero_loss_start_is_fixed_point(grasp):
    model, ref, samples, prior = grasp
    cfg = PomConfig(lambda_h=0.0, iterations=200)
    out, trace = optimize_pose(GraspContext(model, samples, ref.object), ref, prior, cfg)
    assert trace[0]["total"] == 0.0
    for s in ("left", "right"):
        h, r = out.hand(s), ref.hand(s)
        for a, b in ((h.root_rotation, r.root_rotation), (h.root_translation, r.root_translation),
                     (h.joint_rotations, r.joint_rotations)):
            assert np.abs(a - b).max() < 1e-6
        assert np.abs(h.shape_offsets).max() < 1e-6


def test_mirrored_scene_gives_equal_breakdowns(grasp):
    model, ref, samples, _ = grasp
    ctx = GraspContext(model, samples, ref.object)
    # mirror-closed object sample set so the whole scene is symmetric about x = 0
    pts = ctx.object_points.numpy()
    ctx.object_points = torch.tensor(np.concatenate([pts, pts * [-1.0, 1.0, 1.0]]))
    pose = sample_perturbation(ref, PerturbationConfig(jitter_range=0.0, rot_range_deg=0.0), np.random.default_rng(0))
    maps = {s: np.full(len(ctx.object_points), 0.3) for s in ("left", "right")}
    _, br = pom_loss(ctx, pose_tensors(pose), maps, PomConfig())
    for k in ("contact", "hand_centric", "penetration", "total"):
        assert float(br["left"][k]) == pytest.approx(float(br["right"][k]), abs=1e-6)


def test_optimize_is_deterministic(grasp):
    model, ref, samples, prior = grasp
    p = sample_perturbation(ref, PerturbationConfig(), np.random.default_rng(5))
    ctx = GraspContext(model, samples, p.object)
    _, t1 = optimize_pose(ctx, p, prior, PomConfig(iterations=10))
    _, t2 = optimize_pose(ctx, p, prior, PomConfig(iterations=10))
    assert t1 == t2


def test_reference_prior_has_contact(grasp):
    _, _, _, prior = grasp
    assert prior.combined().max() > 0.5
