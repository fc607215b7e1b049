"""Procedural reference assets: a textured sphere held between two skinned paddle hands.

Used by the test-suite, the acceptance runs and the ``demo`` CLI command. The
paddle is a subdivided box (wrist -> palm -> finger) with three joints; the
finger hinges about the canonical x axis toward the palm side (-z).
"""

from __future__ import annotations

import numpy as np
import torch

from .deform import HandPose, InteractionPose, ObjectPose, SkinnedRig, forward_kinematics
from .gaussians import anchor_gaussians, sh_coeff_count
from .geometry import signed_distance
from .mesh import TriangleMesh, box, icosphere
from .raster.camera import Camera, orbit_camera
from .raster.sh import C0
from .scene import Entity, SceneModel

SPHERE_RADIUS = 0.06
PADDLE_WIDTH = 0.05
PADDLE_LENGTH = 0.10
PADDLE_THICKNESS = 0.014
KNUCKLE_Y = 0.06
TIP_Y = 0.085
CONTACT_GAP = 1e-3

# canonical hand axes -> world: finger direction (+y) points up, palm (-z) faces the sphere
LEFT_ROTATION = np.array([[0.0, 0.0, -1.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
RIGHT_ROTATION = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


PADDLE_SEGMENTS = (2, 10, 1)


def paddle_mesh(segments=PADDLE_SEGMENTS) -> TriangleMesh:
    return box((PADDLE_WIDTH, PADDLE_LENGTH, PADDLE_THICKNESS), tuple(segments),
               center=(0.0, PADDLE_LENGTH / 2, 0.0))


def _ramp(y, center, width=0.01):
    return np.clip((y - center) / width + 0.5, 0.0, 1.0)


def paddle_rig(segments=PADDLE_SEGMENTS) -> SkinnedRig:
    mesh = paddle_mesh(segments)
    y = mesh.vertices[:, 1]
    t1 = _ramp(y, KNUCKLE_Y)
    t2 = _ramp(y, TIP_Y)
    weights = np.stack([1 - t1, t1 - t2, t2], axis=1)
    weights = np.clip(weights, 0.0, None)
    weights /= weights.sum(1, keepdims=True)
    rest = np.tile(np.eye(4), (3, 1, 1))
    rest[1, 1, 3] = KNUCKLE_Y
    rest[2, 1, 3] = TIP_Y - KNUCKLE_Y
    palm_side = mesh.vertices[:, 2] < 0
    candidates = np.flatnonzero(palm_side & (y > 0.02))
    return SkinnedRig(["wrist", "knuckle", "tip"], [-1, 0, 1], rest, weights, mesh, candidates)


def sphere_mesh(subdivisions: int = 2) -> TriangleMesh:
    return icosphere(subdivisions, SPHERE_RADIUS)


def _rotvec(m):
    from scipy.spatial.transform import Rotation
    return Rotation.from_matrix(m).as_rotvec()


def reference_pose(rig: SkinnedRig | None = None, obj: TriangleMesh | None = None,
                   finger_bend: float = 0.35, gap: float = CONTACT_GAP) -> InteractionPose:
    """Both palms facing the sphere, fingers bent toward it, closest vertex ``gap`` off the surface."""
    rig = rig or paddle_rig()
    obj = obj or sphere_mesh()
    joints = np.zeros((3, 3))
    joints[1, 0] = -finger_bend
    joints[2, 0] = -finger_bend * 0.5
    palm_y = 0.045
    hands = {}
    for side, rot, sign in (("left", LEFT_ROTATION, -1.0), ("right", RIGHT_ROTATION, 1.0)):
        x = sign * (SPHERE_RADIUS + PADDLE_THICKNESS / 2 + 0.01)
        wrist = np.array([x, 0.0, -palm_y])
        pose = HandPose(_rotvec(rot), wrist, joints)
        for _ in range(6):
            verts = _posed_vertices(rig, pose)
            sd, _ = signed_distance(verts, obj)
            shift = sd.min() - gap
            if abs(shift) < 1e-9:
                break
            pose = HandPose(pose.root_rotation, pose.root_translation - sign * np.array([shift, 0, 0]), joints)
        hands[side] = pose
    return InteractionPose(hands["left"], hands["right"], ObjectPose.identity())


def _posed_vertices(rig: SkinnedRig, pose: HandPose) -> np.ndarray:
    bones, _ = forward_kinematics(rig, pose)
    w = torch.as_tensor(rig.weights)
    a = torch.einsum("vj,jab->vab", w, bones)
    v = torch.as_tensor(rig.canonical_mesh.vertices)
    return ((a[:, :3, :3] @ v.unsqueeze(-1)).squeeze(-1) + a[:, :3, 3]).numpy()


# ---------------------------------------------------------------- scene models


def _sphere_texture(p: np.ndarray) -> np.ndarray:
    u = np.arctan2(p[:, 1], p[:, 0])
    v = p[:, 2] / SPHERE_RADIUS
    return np.stack([
        0.55 + 0.35 * np.sin(3 * u),
        0.45 + 0.35 * np.cos(2.5 * np.pi * v),
        0.5 + 0.3 * np.sin(2 * u + 2 * np.pi * v),
    ], axis=1)


def _hand_texture(p: np.ndarray, tint: float) -> np.ndarray:
    y = p[:, 1] / PADDLE_LENGTH
    side = np.where(p[:, 2] < 0, 1.0, 0.8)
    return np.stack([
        (0.85 - 0.25 * y) * side,
        (0.6 - 0.15 * y + tint) * side,
        (0.45 + 0.2 * y) * side,
    ], axis=1)


def build_model(k: int = 2, sh_degree: int = 2, dtype=torch.float32, sphere_subdiv: int = 2,
                paddle_segments=PADDLE_SEGMENTS) -> SceneModel:
    """Untrained model: template meshes, mid-gray kernels, opacity 0.5."""
    rig = paddle_rig(paddle_segments)
    obj = sphere_mesh(sphere_subdiv)
    model = SceneModel()
    for side in ("left", "right"):
        cloud = anchor_gaussians(rig.canonical_mesh, k, sh_degree=sh_degree, dtype=dtype)
        model.entities[side] = Entity(side, cloud, rig.canonical_mesh.copy(), rig)
    cloud = anchor_gaussians(obj, k, sh_degree=sh_degree, dtype=dtype)
    model.entities["object"] = Entity("object", cloud, obj.copy())
    return model


def ground_truth_model(k: int = 2, dtype=torch.float32, bump: float = 1e-3, **kw) -> SceneModel:
    """Textured, nearly opaque model with slightly bumped geometry; the fitting target."""
    model = build_model(k, sh_degree=0, dtype=dtype, **kw)
    for name, e in model.entities.items():
        c = e.cloud
        v = c.vertices.double()
        if name == "object":
            n = v / torch.linalg.norm(v, dim=1, keepdim=True)
            radial = bump * torch.sin(5 * torch.atan2(v[:, 1], v[:, 0])) * torch.cos(4 * v[:, 2] / SPHERE_RADIUS)
            v = v + n * radial.unsqueeze(1)
        c.vertices = v.to(dtype)
        tri = c.vertices.double()[torch.as_tensor(c.faces)[c.face_id]]
        centers = (c.beta.double().unsqueeze(-1) * tri).sum(-2).numpy()
        rgb = _sphere_texture(centers) if name == "object" else _hand_texture(centers, 0.05 if name == "left" else -0.05)
        sh = np.zeros((len(c), sh_coeff_count(0), 3))
        sh[:, 0] = (np.clip(rgb, 0.02, 0.98) - 0.5) / C0
        c.sh = torch.tensor(sh, dtype=dtype)
        c.opacity = torch.full_like(c.opacity, 0.92)
    return model


def orbit_cameras(target, n: int, *, radius: float = 0.42, size: int = 128, fx: float | None = None,
                  elevation_range=(-0.45, 0.65), phase: float = 0.0) -> list[Camera]:
    fx = fx if fx is not None else 1.9 * size
    cams = []
    for i in range(n):
        az = 2 * np.pi * (i + phase) / n
        el = elevation_range[0] + (elevation_range[1] - elevation_range[0]) * ((i * 0.618034 + phase) % 1.0)
        cams.append(orbit_camera(target, az, el, radius, width=size, height=size, fx=fx, near=0.05, far=5.0))
    return cams


def reference_scene(n_train: int = 20, n_test: int = 4, size: int = 128, dtype=torch.float32):
    """(gt_model, pose, train_cameras, test_cameras) for the synthetic fitting run."""
    gt = ground_truth_model(dtype=dtype)
    pose = reference_pose()
    target = gt.interaction_centroid(pose)
    train = orbit_cameras(target, n_train, size=size)
    test = orbit_cameras(target, n_test, size=size, phase=0.5)
    return gt, pose, train, test


# ---------------------------------------------------------------- gradient-check scene


def tiny_scene(dtype=torch.float64, size: int = 16):
    """Five splats (2 per hand, 1 on the object), SH degree 1, in front of one camera.

    Each hand is a single triangle on a two-joint rig so every pose parameter
    reaches the image. Returns (model, pose, camera).
    """
    tri = TriangleMesh(np.array([[-0.02, 0.0, 0.0], [0.02, 0.0, 0.0], [0.0, 0.05, 0.0]]), np.array([[0, 1, 2]]))
    rest = np.tile(np.eye(4), (2, 1, 1))
    rest[1, 1, 3] = 0.025
    weights = np.array([[0.9, 0.1], [0.7, 0.3], [0.2, 0.8]])
    rig = SkinnedRig(["root", "tip"], [-1, 0], rest, weights, tri, [2])
    rng = np.random.default_rng(7)
    model = SceneModel()
    for side in ("left", "right"):
        cloud = anchor_gaussians(tri, 2, sh_degree=1, dtype=dtype)
        cloud.sh = torch.tensor(rng.uniform(-0.25, 0.25, (2, 4, 3)), dtype=dtype)
        cloud.opacity = torch.tensor(rng.uniform(0.3, 0.7, 2), dtype=dtype)
        cloud.scale_factor = torch.tensor(rng.uniform(0.3, 0.5, 2), dtype=dtype)
        model.entities[side] = Entity(side, cloud, tri.copy(), rig)
    obj = TriangleMesh(np.array([[0.0, 0.0, -0.02], [0.03, 0.0, 0.02], [-0.03, 0.0, 0.02]]), np.array([[0, 1, 2]]))
    cloud = anchor_gaussians(obj, 1, sh_degree=1, dtype=dtype)
    cloud.sh = torch.tensor(rng.uniform(-0.25, 0.25, (1, 4, 3)), dtype=dtype)
    cloud.opacity = torch.tensor([0.6], dtype=dtype)
    model.entities["object"] = Entity("object", cloud, obj.copy())
    left = HandPose([0.3, 0.2, -0.1], [-0.025, 0.0, -0.02], [[0.1, 0.0, 0.2], [0.4, -0.1, 0.1]])
    right = HandPose([-0.2, 0.4, 0.3], [0.025, 0.0, -0.01], [[0.0, 0.2, -0.1], [-0.3, 0.1, 0.2]])
    obj_pose = ObjectPose.from_axis_angle([0.2, -0.3, 0.1], [0.0, 0.01, 0.01])
    cam = orbit_camera([0.0, 0.01, 0.0], 4.4, 0.35, 0.25, width=size, height=size, fx=0.9 * size * 4, near=0.01, far=2.0)
    return model, InteractionPose(left, right, obj_pose), cam
