"""Hand/object splat models posed into one world frame and rendered together."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .deform import (
    Articulation,
    InteractionPose,
    SkinnedRig,
    articulate_vertices,
    blend_bones,
    deform_gaussian_hand,
    forward_kinematics,
    matrix_to_axis_angle,
    rigid_deform,
    se3,
)
from .gaussians import GaussianCloud, GaussianFrame, cloud_frames, cloud_from_bytes, cloud_to_bytes
from .mesh import TriangleMesh
from .raster.camera import Camera
from .raster.render import RenderedImage, render_gaussians

HANDS = ("left", "right")
SCENE_MAGIC = b"HOGSSCN\x00"
SCENE_VERSION = 1

PARAM_NAMES = ("vertices", "beta", "scale_factor", "sh", "opacity")


@dataclass
class Entity:
    name: str
    cloud: GaussianCloud
    template: TriangleMesh
    rig: SkinnedRig | None = None
    articulation: Articulation | None = None

    @property
    def is_hand(self) -> bool:
        return self.rig is not None

    def gaussian_weights(self, beta: torch.Tensor) -> torch.Tensor:
        """Per-kernel skinning weights interpolated from the face's vertex weights."""
        w = torch.as_tensor(self.rig.weights, dtype=beta.dtype)
        tri = torch.as_tensor(self.cloud.faces)[self.cloud.face_id]
        return (beta.unsqueeze(-1) * w[tri]).sum(-2)


def pose_tensors(pose: InteractionPose, dtype=torch.float64, requires_grad: bool = False) -> dict:
    """Differentiable leaves for every pose parameter of an interaction."""

    def leaf(x):
        return torch.tensor(np.asarray(x, dtype=np.float64), dtype=dtype, requires_grad=requires_grad)

    out = {}
    for side in HANDS:
        h = pose.hand(side)
        out[side] = {
            "root_rotation": leaf(h.root_rotation),
            "root_translation": leaf(h.root_translation),
            "joint_rotations": leaf(h.joint_rotations),
        }
        if h.shape_offsets is not None:
            out[side]["shape_offsets"] = leaf(h.shape_offsets)
    ob = pose.object
    out["object"] = {
        "rotation": leaf(matrix_to_axis_angle(ob.T[:3, :3])),
        "translation": leaf(ob.T[:3, 3]),
    }
    if ob.articulation_angle is not None:
        out["object"]["articulation_angle"] = leaf(ob.articulation_angle)
    return out


@dataclass
class PosedSplats:
    frame: GaussianFrame
    sh: torch.Tensor
    opacity: torch.Tensor
    view_rotation: torch.Tensor
    sh_degree: int


@dataclass
class SceneModel:
    entities: dict[str, Entity] = field(default_factory=dict)

    def __iter__(self):
        return iter(self.entities.values())

    @property
    def sh_degree(self) -> int:
        return max(e.cloud.sh_degree for e in self)

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self)).cloud.dtype

    def n_gaussians(self) -> int:
        return sum(len(e.cloud) for e in self)

    def clone(self) -> "SceneModel":
        return SceneModel({k: Entity(e.name, e.cloud.clone(), e.template.copy(), e.rig, e.articulation)
                           for k, e in self.entities.items()})

    def to(self, dtype: torch.dtype) -> "SceneModel":
        return SceneModel({k: Entity(e.name, e.cloud.to(dtype), e.template.copy(), e.rig, e.articulation)
                           for k, e in self.entities.items()})

    def leaves(self, requires_grad: bool = False) -> dict:
        out = {}
        for name, e in self.entities.items():
            out[name] = {p: getattr(e.cloud, p).detach().clone().requires_grad_(requires_grad)
                         for p in PARAM_NAMES}
        return out

    # ------------------------------------------------------------ posing

    def entity_frames(self, e: Entity, pose_t: dict, params: dict | None = None):
        """World-space frames and the per-kernel canonical->world rotation used for SH lookup."""
        c = e.cloud
        params = params or {}
        vertices = params.get("vertices", c.vertices)
        beta = params.get("beta", c.beta)
        sf = params.get("scale_factor", c.scale_factor)
        if e.is_hand:
            hp = pose_t[e.name]
            if "shape_offsets" in hp:
                vertices = vertices + hp["shape_offsets"].to(vertices.dtype)
            canon = cloud_frames(c, vertices, beta, sf)
            bones, _ = forward_kinematics(e.rig, root_rotation=hp["root_rotation"],
                                          root_translation=hp["root_translation"],
                                          joint_rotations=hp["joint_rotations"], dtype=vertices.dtype)
            return deform_gaussian_hand(canon, e.gaussian_weights(beta), bones, return_rotation=True)
        op = pose_t["object"]
        if e.articulation is not None and "articulation_angle" in op:
            art = e.articulation
            vertices = articulate_vertices(vertices, art.part_labels == 1, art.axis_point, art.axis_dir,
                                           op["articulation_angle"])
        canon = cloud_frames(c, vertices, beta, sf)
        T = se3(op["rotation"].to(vertices.dtype), op["translation"].to(vertices.dtype))
        return rigid_deform(canon, T), T[:3, :3].expand(len(c), 3, 3)

    def posed(self, pose, params: dict | None = None) -> PosedSplats:
        pose_t = pose if isinstance(pose, dict) else pose_tensors(pose, self.dtype)
        params = params or {}
        frames, rots, shs, ops = [], [], [], []
        k = (self.sh_degree + 1) ** 2
        for name, e in self.entities.items():
            p = params.get(name, {})
            f, r = self.entity_frames(e, pose_t, p)
            sh = p.get("sh", e.cloud.sh)
            if sh.shape[1] < k:
                sh = torch.cat([sh, sh.new_zeros(sh.shape[0], k - sh.shape[1], 3)], 1)
            frames.append(f)
            rots.append(r)
            shs.append(sh)
            ops.append(p.get("opacity", e.cloud.opacity))
        return PosedSplats(GaussianFrame.cat(frames), torch.cat(shs), torch.cat(ops), torch.cat(rots),
                           self.sh_degree)

    def render(self, pose, cam: Camera, params: dict | None = None, **kw) -> RenderedImage:
        if not self.entities:
            return RenderedImage(torch.zeros(cam.height, cam.width, 3), torch.zeros(cam.height, cam.width))
        s = self.posed(pose, params)
        return render_gaussians(s.frame.center, s.frame.covariance, s.sh, s.opacity, cam,
                                view_rotation=s.view_rotation, sh_degree=s.sh_degree, **kw)

    # ------------------------------------------------------------ geometry helpers

    def hand_vertices(self, side: str, pose_t: dict, vertices: torch.Tensor | None = None) -> torch.Tensor:
        """Posed hand mesh vertices (differentiable in the pose tensors)."""
        e = self.entities[side]
        hp = pose_t[side]
        dtype = hp["root_rotation"].dtype
        v = (e.cloud.vertices if vertices is None else vertices).detach().to(dtype)
        if "shape_offsets" in hp:
            v = v + hp["shape_offsets"]
        bones, _ = forward_kinematics(e.rig, root_rotation=hp["root_rotation"],
                                      root_translation=hp["root_translation"],
                                      joint_rotations=hp["joint_rotations"], dtype=dtype)
        a = blend_bones(torch.as_tensor(e.rig.weights, dtype=dtype), bones)
        return (a[..., :3, :3] @ v.unsqueeze(-1)).squeeze(-1) + a[..., :3, 3]

    def joint_positions(self, side: str, pose) -> np.ndarray:
        e = self.entities[side]
        _, world = forward_kinematics(e.rig, pose.hand(side))
        return world[:, :3, 3].numpy()

    def object_mesh(self, pose) -> TriangleMesh:
        """Posed object mesh (numpy)."""
        e = self.entities["object"]
        v = e.cloud.vertices.detach().double()
        ob = pose.object
        if e.articulation is not None and ob.articulation_angle is not None:
            art = e.articulation
            v = articulate_vertices(v, art.part_labels == 1, art.axis_point, art.axis_dir, ob.articulation_angle)
        v = v.numpy() @ ob.T[:3, :3].T + ob.T[:3, 3]
        m = TriangleMesh(v, e.cloud.faces)
        m.is_watertight = e.template.is_watertight
        return m

    def interaction_centroid(self, pose) -> np.ndarray:
        pts = [self.joint_positions(s, pose) for s in HANDS if s in self.entities]
        if "object" in self.entities:
            pts.append(self.object_mesh(pose).vertices.mean(0, keepdims=True))
        return np.concatenate(pts).mean(0)


# ---------------------------------------------------------------- gradients


def render_backward(model: SceneModel, pose: InteractionPose, cam: Camera, grad_rgb, grad_alpha=None) -> dict:
    """Gradients of <grad_rgb, rgb> + <grad_alpha, alpha> w.r.t. every parameter class.

    Returns ``{entity: {vertices, beta, scale_factor, sh, opacity}, "pose": {...}}``.
    """
    leaves = model.leaves(requires_grad=True)
    pose_t = pose_tensors(pose, model.dtype, requires_grad=True)
    img = model.render(pose_t, cam, leaves)
    grad_rgb = torch.as_tensor(grad_rgb, dtype=img.rgb.dtype)
    outputs, grads = [img.rgb], [grad_rgb]
    if grad_alpha is not None:
        outputs.append(img.alpha)
        grads.append(torch.as_tensor(grad_alpha, dtype=img.alpha.dtype))
    flat = [t for d in leaves.values() for t in d.values()] + [t for d in pose_t.values() for t in d.values()]
    g = torch.autograd.grad(outputs, flat, grads, allow_unused=True)
    g = [torch.zeros_like(t) if gi is None else gi for t, gi in zip(flat, g)]
    it = iter(g)
    out = {name: {p: next(it) for p in d} for name, d in leaves.items()}
    out["pose"] = {name: {p: next(it) for p in d} for name, d in pose_t.items()}
    return out


# ---------------------------------------------------------------- checkpoints


def _section(name: str, payload: bytes) -> bytes:
    nb = name.encode()
    return struct.pack("<I", len(nb)) + nb + struct.pack("<Q", len(payload)) + payload


def _read_sections(data: bytes) -> dict[str, bytes]:
    if data[:8] != SCENE_MAGIC:
        raise ValueError("not a scene checkpoint")
    version, count = struct.unpack_from("<II", data, 8)
    if version != SCENE_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 16
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        name = data[off + 4: off + 4 + n].decode()
        off += 4 + n
        (size,) = struct.unpack_from("<Q", data, off)
        off += 8
        out[name] = data[off: off + size]
        off += size
    return out


def scene_to_bytes(model: SceneModel, extra: dict[str, bytes] | None = None) -> bytes:
    bindings = {"entities": []}
    sections = []
    for name, e in model.entities.items():
        b = {"name": name, "kind": "hand" if e.is_hand else "object",
             "template_watertight": bool(e.template.is_watertight)}
        if e.rig is not None:
            rig = e.rig.to_json(mesh_path="")
            del rig["mesh"]
            b["rig"] = rig
        if e.articulation is not None:
            b["articulation"] = e.articulation.to_json()
        bindings["entities"].append(b)
        sections.append(_section(f"cloud:{name}", cloud_to_bytes(e.cloud)))
        sections.append(_section(f"template:{name}", e.template.vertices.astype("<f8").tobytes()))
    sections.insert(0, _section("bindings", json.dumps(bindings, sort_keys=True).encode()))
    for k in sorted(extra or {}):
        sections.append(_section(k, extra[k]))
    header = SCENE_MAGIC + struct.pack("<II", SCENE_VERSION, len(sections))
    return header + b"".join(sections)


def scene_from_bytes(data: bytes, dtype: torch.dtype = torch.float32) -> tuple[SceneModel, dict[str, bytes]]:
    sec = _read_sections(data)
    bindings = json.loads(sec.pop("bindings"))
    model = SceneModel()
    for b in bindings["entities"]:
        name = b["name"]
        cloud = cloud_from_bytes(sec.pop(f"cloud:{name}"), dtype)
        tv = np.frombuffer(sec.pop(f"template:{name}"), "<f8").reshape(-1, 3).copy()
        template = TriangleMesh(tv, cloud.faces.copy(), b["template_watertight"])
        rig = None
        if "rig" in b:
            rig = SkinnedRig.from_json(b["rig"], mesh=template)
        art = Articulation.from_json(b["articulation"]) if "articulation" in b else None
        model.entities[name] = Entity(name, cloud, template, rig, art)
    return model, sec


def save_scene(model: SceneModel, path, extra: dict[str, bytes] | None = None) -> None:
    Path(path).write_bytes(scene_to_bytes(model, extra))


def load_scene(path, dtype: torch.dtype = torch.float32) -> SceneModel:
    return scene_from_bytes(Path(path).read_bytes(), dtype)[0]
