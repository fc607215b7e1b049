"""Canonical-to-posed mappings: skinned hands, rigid objects, one-hinge articulation.

Hands use linear blend skinning over a small joint hierarchy. Kernel
covariances follow the rotation factor (polar decomposition) of the blended
linear map so that splats stay aligned with the surface; their scales are
left untouched. Objects move rigidly, optionally after rotating a labelled
moving part about a hinge axis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from .gaussians import GaussianFrame
from .mesh import TriangleMesh, load_mesh

POLAR_ITERS = 14
DEGENERATE_DET = 1e-9


class DeformError(ValueError):
    pass


# ---------------------------------------------------------------- rotations


def axis_angle_to_matrix(aa: torch.Tensor) -> torch.Tensor:
    """Rodrigues formula, smooth (and with finite gradients) through zero angle."""
    aa = torch.as_tensor(aa)
    if not aa.is_floating_point():
        aa = aa.to(torch.float64)
    theta2 = (aa * aa).sum(-1, keepdim=True)
    small = theta2 < 1e-12
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(safe2)
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / safe2)
    x, y, z = aa.unbind(-1)
    zero = torch.zeros_like(x)
    k = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], dim=-1).reshape(aa.shape[:-1] + (3, 3))
    eye = torch.eye(3, dtype=aa.dtype).expand_as(k)
    return eye + a.unsqueeze(-1) * k + b.unsqueeze(-1) * (k @ k)


def wrap_axis_angle(aa) -> np.ndarray:
    """Equivalent axis-angle with magnitude at most pi."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    wrapped = np.mod(theta + np.pi, 2 * np.pi) - np.pi
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(theta > np.pi, aa / theta * wrapped, aa)
    return out


def matrix_to_axis_angle(m) -> np.ndarray:
    return Rotation.from_matrix(np.asarray(m, dtype=np.float64)).as_rotvec()


def se3(aa, t) -> torch.Tensor:
    """4x4 transform from axis-angle rotation and translation (differentiable)."""
    r = axis_angle_to_matrix(aa)
    t = torch.as_tensor(t, dtype=r.dtype)
    top = torch.cat([r, t.unsqueeze(-1)], dim=-1)
    bottom = torch.tensor([0.0, 0.0, 0.0, 1.0], dtype=r.dtype).expand(top.shape[:-2] + (1, 4))
    return torch.cat([top, bottom], dim=-2)


def _rot4(aa: torch.Tensor) -> torch.Tensor:
    return se3(aa, torch.zeros(aa.shape, dtype=aa.dtype))


# ---------------------------------------------------------------- rig and poses


@dataclass
class SkinnedRig:
    names: list[str]
    parents: np.ndarray
    rest_local: np.ndarray
    weights: np.ndarray
    canonical_mesh: TriangleMesh
    contact_candidates: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.rest_local = np.asarray(self.rest_local, dtype=np.float64).reshape(-1, 4, 4)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.contact_candidates = np.asarray(self.contact_candidates, dtype=np.int64)
        n = len(self.parents)
        if self.parents[0] != -1:
            raise DeformError("joint 0 must be the root (parent -1)")
        for j in range(1, n):
            if not 0 <= self.parents[j] < j:
                raise DeformError(f"joint {j} has parent {self.parents[j]}; parents must precede children")
        if self.weights.shape != (self.canonical_mesh.n_vertices, n):
            raise DeformError("weights must be (n_vertices, n_joints)")
        if (self.weights < 0).any() or np.abs(self.weights.sum(1) - 1).max() > 1e-5:
            raise DeformError("weight rows must be non-negative and sum to 1")
        self.rest_world = np.empty_like(self.rest_local)
        for j in range(n):
            p = self.parents[j]
            self.rest_world[j] = self.rest_local[j] if p < 0 else self.rest_world[p] @ self.rest_local[j]

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    def rest_joint_positions(self) -> np.ndarray:
        return self.rest_world[:, :3, 3].copy()

    def to_json(self, mesh_path: str) -> dict:
        return {
            "joints": [
                {"name": nm, "parent": int(p), "rest": r.reshape(-1).tolist()}
                for nm, p, r in zip(self.names, self.parents, self.rest_local)
            ],
            "weights": self.weights.tolist(),
            "mesh": mesh_path,
            "contact_candidates": self.contact_candidates.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict, base_dir=".", mesh: TriangleMesh | None = None) -> "SkinnedRig":
        joints = data["joints"]
        if mesh is None:
            mesh = load_mesh(Path(base_dir) / data["mesh"])
        return cls(
            names=[j.get("name", f"joint{i}") for i, j in enumerate(joints)],
            parents=[j["parent"] for j in joints],
            rest_local=[np.asarray(j["rest"], dtype=np.float64).reshape(4, 4) for j in joints],
            weights=data["weights"],
            canonical_mesh=mesh,
            contact_candidates=data.get("contact_candidates", []),
        )


def load_rig(path) -> SkinnedRig:
    path = Path(path)
    return SkinnedRig.from_json(json.loads(path.read_text()), base_dir=path.parent)


@dataclass
class HandPose:
    root_rotation: np.ndarray
    root_translation: np.ndarray
    joint_rotations: np.ndarray
    shape_offsets: np.ndarray | None = None

    def __post_init__(self):
        self.root_rotation = wrap_axis_angle(np.asarray(self.root_rotation, dtype=np.float64).reshape(3))
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64).reshape(3)
        self.joint_rotations = wrap_axis_angle(np.asarray(self.joint_rotations, dtype=np.float64).reshape(-1, 3))
        if self.shape_offsets is not None:
            self.shape_offsets = np.asarray(self.shape_offsets, dtype=np.float64).reshape(-1, 3)
        for arr in (self.root_rotation, self.root_translation, self.joint_rotations):
            if not np.isfinite(arr).all():
                raise DeformError("non-finite hand pose")

    @classmethod
    def identity(cls, n_joints: int) -> "HandPose":
        return cls(np.zeros(3), np.zeros(3), np.zeros((n_joints, 3)))

    def to_json(self) -> dict:
        return {
            "root_rotation": self.root_rotation.tolist(),
            "root_translation": self.root_translation.tolist(),
            "joint_rotations": self.joint_rotations.tolist(),
            "shape_offsets": None if self.shape_offsets is None else self.shape_offsets.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "HandPose":
        return cls(d["root_rotation"], d["root_translation"], d["joint_rotations"], d.get("shape_offsets"))


@dataclass
class ObjectPose:
    T: np.ndarray
    articulation_angle: float | None = None

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=np.float64).reshape(4, 4)
        r = self.T[:3, :3]
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(r) - 1) > 1e-6:
            raise DeformError("object rotation must be orthonormal with det +1")

    @classmethod
    def identity(cls, articulation_angle: float | None = None) -> "ObjectPose":
        return cls(np.eye(4), articulation_angle)

    @classmethod
    def from_axis_angle(cls, aa, t, articulation_angle=None) -> "ObjectPose":
        T = np.eye(4)
        T[:3, :3] = Rotation.from_rotvec(np.asarray(aa, dtype=np.float64)).as_matrix()
        T[:3, 3] = t
        return cls(T, articulation_angle)

    @property
    def translation(self) -> np.ndarray:
        return self.T[:3, 3]

    def to_json(self) -> dict:
        return {"T": self.T.reshape(-1).tolist(), "articulation_angle": self.articulation_angle}

    @classmethod
    def from_json(cls, d: dict) -> "ObjectPose":
        return cls(d["T"], d.get("articulation_angle"))


@dataclass
class InteractionPose:
    left: HandPose
    right: HandPose
    object: ObjectPose

    def hand(self, side: str) -> HandPose:
        return {"left": self.left, "right": self.right}[side]

    def to_json(self) -> dict:
        return {"left": self.left.to_json(), "right": self.right.to_json(), "object": self.object.to_json()}

    @classmethod
    def from_json(cls, d: dict) -> "InteractionPose":
        return cls(HandPose.from_json(d["left"]), HandPose.from_json(d["right"]), ObjectPose.from_json(d["object"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "InteractionPose":
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- kinematics


def forward_kinematics(rig: SkinnedRig, pose: HandPose | None = None, *, root_rotation=None,
                       root_translation=None, joint_rotations=None, dtype=torch.float64):
    """Bone transforms (n, 4, 4) mapping canonical space to posed space.

    Pass either a ``HandPose`` or the three tensors directly (to keep gradients).
    Returns ``(bones, joint_world)`` where ``joint_world`` are posed joint frames.
    The global rotation pivots about the root joint, then the translation is added.
    """
    if pose is not None:
        root_rotation, root_translation, joint_rotations = (
            pose.root_rotation, pose.root_translation, pose.joint_rotations)
    rr = torch.as_tensor(root_rotation, dtype=dtype)
    rt = torch.as_tensor(root_translation, dtype=dtype)
    jr = torch.as_tensor(joint_rotations, dtype=dtype).reshape(-1, 3)
    n = rig.n_joints
    if jr.shape[0] != n:
        raise DeformError(f"pose has {jr.shape[0]} joint rotations, rig has {n} joints")
    rest_local = torch.as_tensor(rig.rest_local, dtype=dtype)
    rest_world = torch.as_tensor(rig.rest_world, dtype=dtype)
    local_rot = _rot4(jr)
    root_r = axis_angle_to_matrix(rr)
    g_lin = root_r @ rest_world[0, :3, :3]
    g_t = rest_world[0, :3, 3] + rt
    g = torch.cat([torch.cat([g_lin, g_t.unsqueeze(-1)], -1), rest_world[0, 3:]], -2)
    world = [g @ local_rot[0]]
    for j in range(1, n):
        world.append(world[rig.parents[j]] @ rest_local[j] @ local_rot[j])
    world = torch.stack(world)
    bones = world @ torch.linalg.inv(rest_world)
    return bones, world


def lbs_deform(x, weights, bones) -> torch.Tensor:
    """Blend the bone matrices with the weights, then apply to the homogeneous point(s)."""
    bones = torch.as_tensor(bones)
    x = torch.as_tensor(x, dtype=bones.dtype)
    w = torch.as_tensor(weights, dtype=bones.dtype)
    a = torch.einsum("...j,jab->...ab", w, bones)
    return (a[..., :3, :3] @ x.unsqueeze(-1)).squeeze(-1) + a[..., :3, 3]


def blend_bones(weights, bones) -> torch.Tensor:
    return torch.einsum("...j,jab->...ab", torch.as_tensor(weights, dtype=bones.dtype), bones)


def polar_rotation(m: torch.Tensor) -> torch.Tensor:
    """Orthogonal factor of the polar decomposition via scaled Newton iteration."""
    det = torch.linalg.det(m)
    if bool((det < DEGENERATE_DET).any()):
        raise DeformError("degenerate blend")
    x = m
    for _ in range(POLAR_ITERS):
        xinv_t = torch.linalg.inv(x).transpose(-1, -2)
        # Higham's Frobenius-norm scaling; converges quadratically near the solution
        g = torch.sqrt(torch.linalg.norm(xinv_t, dim=(-2, -1)) / torch.linalg.norm(x, dim=(-2, -1)))
        g = g[..., None, None]
        x = 0.5 * (g * x + xinv_t / g)
    return x


def deform_gaussian_hand(frame: GaussianFrame, weights, bones, return_rotation: bool = False):
    """Skin kernel centers; rotate orientation and covariance by the blend's polar factor."""
    a = blend_bones(weights, bones)
    center = (a[..., :3, :3] @ frame.center.unsqueeze(-1)).squeeze(-1) + a[..., :3, 3]
    p = polar_rotation(a[..., :3, :3])
    out = GaussianFrame(
        center,
        p @ frame.rotation,
        frame.scales,
        p @ frame.covariance @ p.transpose(-1, -2),
    )
    return (out, p) if return_rotation else out


def rigid_deform(frame: GaussianFrame, pose) -> GaussianFrame:
    """Apply an SE(3) transform (``ObjectPose`` or a 4x4 tensor) to a batch of frames."""
    T = pose.T if isinstance(pose, ObjectPose) else pose
    T = torch.as_tensor(T, dtype=frame.center.dtype)
    r, t = T[:3, :3], T[:3, 3]
    return GaussianFrame(
        frame.center @ r.T + t,
        r @ frame.rotation,
        frame.scales,
        r @ frame.covariance @ r.T,
    )


# ---------------------------------------------------------------- articulation


@dataclass
class Articulation:
    axis_point: np.ndarray
    axis_dir: np.ndarray
    part_labels: np.ndarray

    def __post_init__(self):
        self.axis_point = np.asarray(self.axis_point, dtype=np.float64).reshape(3)
        self.axis_dir = np.asarray(self.axis_dir, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(self.axis_dir)
        if norm < 1e-12:
            raise DeformError("zero-length articulation axis")
        self.axis_dir = self.axis_dir / norm
        self.part_labels = np.asarray(self.part_labels, dtype=np.int64).reshape(-1)
        if not np.isin(self.part_labels, (0, 1)).all():
            raise DeformError("part labels must be 0 (base) or 1 (moving)")

    def to_json(self) -> dict:
        return {"axis_point": self.axis_point.tolist(), "axis_dir": self.axis_dir.tolist(),
                "part_labels": self.part_labels.tolist()}

    @classmethod
    def from_json(cls, d: dict, base_dir=".") -> "Articulation":
        labels = d["part_labels"]
        if isinstance(labels, str):
            text = (Path(base_dir) / labels).read_text().strip()
            labels = json.loads(text) if text.startswith("[") else [int(t) for t in text.split()]
        return cls(d["axis_point"], d["axis_dir"], labels)


def articulate_vertices(vertices: torch.Tensor, moving, axis_point, axis_dir, angle) -> torch.Tensor:
    """Rotate the moving vertices about the hinge line; base vertices are passed through untouched."""
    dtype = vertices.dtype
    axis_dir = torch.as_tensor(axis_dir, dtype=dtype)
    norm = torch.linalg.norm(axis_dir)
    if float(norm) < 1e-12:
        raise DeformError("zero-length articulation axis")
    axis_dir = axis_dir / norm
    p = torch.as_tensor(axis_point, dtype=dtype)
    angle = torch.as_tensor(angle, dtype=dtype)
    r = axis_angle_to_matrix(axis_dir * angle)
    rotated = (vertices - p) @ r.T + p
    mask = torch.as_tensor(np.asarray(moving, dtype=bool)).unsqueeze(-1)
    return torch.where(mask, rotated, vertices)


def articulate(mesh: TriangleMesh, part_labels, axis_point, axis_dir, angle: float) -> TriangleMesh:
    labels = np.asarray(part_labels).reshape(-1)
    if len(labels) != mesh.n_vertices:
        raise DeformError("part labels must cover every vertex")
    v = articulate_vertices(torch.as_tensor(mesh.vertices), labels == 1, axis_point, axis_dir, angle)
    return mesh.with_vertices(v.numpy())
