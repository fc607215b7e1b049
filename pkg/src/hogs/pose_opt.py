"""Bimanual grasp augmentation: perturb a reference pose, then pull both hands back
into plausible contact with a fixed object.

Per hand the objective is
    l_c * |omega - omega_ref|^2 + l_h * hand-centric + l_p * penetration
where omega is a logistic contact map over object surface samples, the
hand-centric term is the clamped distance of contact-candidate vertices to the
object, and penetration sums the depth of hand vertices inside the object.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Protocol

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from .deform import HandPose, InteractionPose, ObjectPose
from .geometry import point_mesh_distance, safe_norm, sample_surface, signed_distance
from .mesh import TriangleMesh
from .scene import HANDS, SceneModel, pose_tensors

log = logging.getLogger(__name__)

CONTACT_SHARPNESS = 100.0
HAND_CENTRIC_TAU = 0.02
DEFAULT_POINTS = 2048
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class PomError(RuntimeError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace or []


# ---------------------------------------------------------------- contact maps


@dataclass
class ContactMap:
    object_points: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.object_points = np.asarray(self.object_points, dtype=np.float64).reshape(-1, 3)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if len(self.values) != len(self.object_points):
            raise ValueError("one contact value per object point")
        if (self.values < 0).any() or (self.values > 1).any():
            raise ValueError("contact values must lie in [0, 1]")


def contact_values(hand_points: torch.Tensor, object_points: torch.Tensor,
                   sharpness: float = CONTACT_SHARPNESS) -> torch.Tensor:
    """omega_p = 2 * sigmoid(-k * d_p), d_p = distance to the nearest hand point."""
    if hand_points.shape[0] == 0 or object_points.shape[0] == 0:
        raise ValueError("empty point cloud")
    with torch.no_grad():
        nearest = torch.cdist(object_points.detach(), hand_points.detach().to(object_points.dtype)).argmin(dim=1)
    # only the selected pairs carry gradient, which is exactly the subgradient of the min
    d = safe_norm(object_points - hand_points[nearest])
    return 2.0 * torch.sigmoid(-sharpness * d)


def compute_contact_map(hand_points, object_points, sharpness: float = CONTACT_SHARPNESS) -> ContactMap:
    """``hand_points`` is one (N,3) cloud or a sequence of clouds (e.g. left and right)."""
    if isinstance(hand_points, (list, tuple)):
        clouds = [np.asarray(h, dtype=np.float64).reshape(-1, 3) for h in hand_points]
        hand_points = np.concatenate(clouds) if clouds else np.zeros((0, 3))
    hp = torch.as_tensor(np.asarray(hand_points, dtype=np.float64).reshape(-1, 3))
    op = torch.as_tensor(np.asarray(object_points, dtype=np.float64).reshape(-1, 3))
    with torch.no_grad():
        vals = contact_values(hp, op, sharpness)
    return ContactMap(op.numpy(), vals.numpy())


# ---------------------------------------------------------------- losses


def loss_contact_consistency(omega, omega_ref) -> torch.Tensor:
    omega = torch.as_tensor(omega)
    omega_ref = torch.as_tensor(omega_ref, dtype=omega.dtype)
    if omega.shape != omega_ref.shape:
        raise ValueError(f"contact map size mismatch: {tuple(omega.shape)} vs {tuple(omega_ref.shape)}")
    return ((omega - omega_ref) ** 2).sum()


def loss_hand_centric(candidate_vertices, object_mesh: TriangleMesh, tau: float = HAND_CENTRIC_TAU) -> torch.Tensor:
    v = torch.as_tensor(candidate_vertices)
    if v.shape[0] == 0:
        raise ValueError("no contact-candidate vertices designated")
    return point_mesh_distance(v, object_mesh).clamp(0.0, tau).mean()


def loss_penetration(hand_vertices, object_mesh: TriangleMesh) -> torch.Tensor:
    """Sum of penetration depths of hand vertices strictly inside the object."""
    if not object_mesh.is_watertight:
        raise ValueError("penetration requires watertight mesh")
    v = torch.as_tensor(hand_vertices)
    sd, q = signed_distance(v.detach().double().cpu().numpy(), object_mesh)
    inside = torch.as_tensor(sd < 0)
    if not bool(inside.any()):
        return (v * 0).sum()
    qt = torch.as_tensor(q, dtype=v.dtype)
    return safe_norm(v[inside] - qt[inside]).sum()


# ---------------------------------------------------------------- object samples and priors


@dataclass
class ObjectSamples:
    """Surface samples fixed in object-local terms (face + barycentrics) so they follow any pose."""

    face: np.ndarray
    bary: np.ndarray

    @classmethod
    def sample(cls, model: SceneModel, n: int = DEFAULT_POINTS, seed: int = 0) -> "ObjectSamples":
        _, face, bary = sample_surface(model.entities["object"].cloud.mesh, n, seed)
        return cls(face, bary)

    def __len__(self) -> int:
        return len(self.face)

    def points(self, mesh: TriangleMesh) -> np.ndarray:
        return np.einsum("ij,ijk->ik", self.bary, mesh.vertices[mesh.faces[self.face]])


class ContactPrior(Protocol):
    """Maps posed hand point clouds and object samples to target contact values per hand."""

    def __call__(self, hand_points: dict[str, np.ndarray], object_points: np.ndarray) -> dict[str, np.ndarray]:
        ...


@dataclass(frozen=True)
class FrozenContactPrior:
    """Returns the same per-hand maps regardless of the query."""

    maps: dict

    def __call__(self, hand_points=None, object_points=None) -> dict[str, np.ndarray]:
        if object_points is not None:
            n = len(object_points)
            for side, m in self.maps.items():
                if len(m) != n:
                    raise ValueError(f"prior for {side} has {len(m)} points, query has {n}")
        return {k: v.copy() for k, v in self.maps.items()}

    def combined(self) -> np.ndarray:
        """Map of both hands together (max is exact: omega is decreasing in distance)."""
        return np.maximum.reduce(list(self.maps.values()))


def posed_hand_points(model: SceneModel, pose: InteractionPose) -> dict[str, np.ndarray]:
    pt = pose_tensors(pose, torch.float64)
    with torch.no_grad():
        return {s: model.hand_vertices(s, pt).numpy() for s in HANDS}


def reference_grasp_prior(model: SceneModel, reference: InteractionPose, samples: ObjectSamples,
                          sharpness: float = CONTACT_SHARPNESS) -> FrozenContactPrior:
    """Contact maps of the unperturbed reference grasp, frozen."""
    pts = samples.points(model.object_mesh(reference))
    hands = posed_hand_points(model, reference)
    maps = {s: compute_contact_map(hands[s], pts, sharpness).values for s in HANDS}
    return FrozenContactPrior(maps)


# ---------------------------------------------------------------- perturbation


@dataclass
class PerturbationConfig:
    rot_range_deg: float = 20.0
    retreat_fraction: float = 0.05
    jitter_range: float = 0.06
    articulation_range: tuple = (0.01 * math.pi, 0.2 * math.pi)
    seed: int = 0

    def __post_init__(self):
        self.articulation_range = tuple(float(x) for x in self.articulation_range)
        vals = (self.rot_range_deg, self.retreat_fraction, self.jitter_range, *self.articulation_range)
        if any(v < 0 for v in vals):
            raise ValueError("perturbation ranges must be non-negative")
        if self.articulation_range[0] > self.articulation_range[1]:
            raise ValueError("articulation range is reversed")

    @classmethod
    def zero(cls, seed: int = 0) -> "PerturbationConfig":
        return cls(0.0, 0.0, 0.0, (0.0, 0.0), seed)

    def to_json(self) -> dict:
        d = asdict(self)
        d["articulation_range"] = list(self.articulation_range)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PerturbationConfig":
        return cls(**d)


def _random_direction(rng: np.random.Generator) -> np.ndarray:
    while True:
        d = rng.standard_normal(3)
        n = np.linalg.norm(d)
        if n > 1e-12:
            return d / n


def sample_perturbation(reference: InteractionPose, cfg: PerturbationConfig, rng: np.random.Generator,
                        object_center=None, return_info: bool = False):
    """Random rotation about each hand root, retreat from the object, positional jitter,
    and a fresh articulation angle for articulated objects."""
    center = np.asarray(reference.object.translation if object_center is None else object_center, dtype=np.float64)
    info = {"angles_deg": {}, "jitter": {}}
    hands = {}
    for side in HANDS:
        h = reference.hand(side)
        angles = rng.uniform(0.0, cfg.rot_range_deg, 3)
        rotvec = h.root_rotation.copy()
        if np.any(angles != 0):
            pert = Rotation.from_euler("xyz", angles, degrees=True)
            rotvec = (pert * Rotation.from_rotvec(h.root_rotation)).as_rotvec()
        root = h.root_translation.copy()
        away = root - center
        dist = np.linalg.norm(away)
        if dist < 1e-9:
            raise ValueError(f"{side} hand root coincides with the object center")
        root = root + cfg.retreat_fraction * away
        mag = rng.uniform(0.0, cfg.jitter_range)
        root = root + mag * _random_direction(rng)
        info["angles_deg"][side] = angles
        info["jitter"][side] = mag
        hands[side] = HandPose(rotvec, root, h.joint_rotations.copy(),
                               None if h.shape_offsets is None else h.shape_offsets.copy())
    ob = reference.object
    mag = rng.uniform(0.0, cfg.jitter_range)
    T = ob.T.copy()
    T[:3, 3] += mag * _random_direction(rng)
    info["jitter"]["object"] = mag
    art = ob.articulation_angle
    if art is not None:
        art = float(rng.uniform(*cfg.articulation_range))
        info["articulation"] = art
    out = InteractionPose(hands["left"], hands["right"], ObjectPose(T, art))
    return (out, info) if return_info else out


# ---------------------------------------------------------------- optimization


@dataclass
class PomConfig:
    lambda_c: float = 1.0
    lambda_h: float = 1.0
    lambda_p: float = 17.0
    iterations: int = 200
    lr_pose: float = 5e-4
    lr_translation: float = 3e-5
    lr_initial: float = 6.25e-6
    warmup_steps: int = 20
    n_points: int = DEFAULT_POINTS
    contact_sharpness: float = CONTACT_SHARPNESS
    tau: float = HAND_CENTRIC_TAU
    optimize_shape: bool = True
    optimizer: str = "adam"
    grad_clip: float = 0.0
    penetration_threshold: float = 1e-4

    def __post_init__(self):
        if min(self.lambda_c, self.lambda_h, self.lambda_p) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def lr(self, step: int, final: float) -> float:
        """Linear ramp from ``lr_initial`` at step 0 to ``final`` at ``warmup_steps``."""
        if self.warmup_steps <= 0:
            return final
        t = min(step, self.warmup_steps) / self.warmup_steps
        return self.lr_initial + (final - self.lr_initial) * t

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "PomConfig":
        return cls(**d)


@dataclass
class GraspContext:
    """Everything the objective needs besides the hand poses."""

    model: SceneModel
    samples: ObjectSamples
    object_pose: ObjectPose
    object_mesh: TriangleMesh = field(init=False)
    object_points: torch.Tensor = field(init=False)

    def __post_init__(self):
        self.object_mesh = self.model.object_mesh(InteractionPose(None, None, self.object_pose))
        self.object_points = torch.as_tensor(self.samples.points(self.object_mesh))


def pom_loss(ctx: GraspContext, pose_t: dict, prior_maps: dict, cfg: PomConfig):
    """Returns (total, {side: {contact, hand_centric, penetration, total}})."""
    total = None
    breakdown = {}
    for side in HANDS:
        e = ctx.model.entities[side]
        v = ctx.model.hand_vertices(side, pose_t)
        omega = contact_values(v, ctx.object_points.to(v.dtype), cfg.contact_sharpness)
        lc = loss_contact_consistency(omega, torch.as_tensor(prior_maps[side], dtype=v.dtype))
        cand = np.asarray(e.rig.contact_candidates, dtype=np.int64)
        lh = loss_hand_centric(v[torch.as_tensor(cand)], ctx.object_mesh, cfg.tau)
        lp = loss_penetration(v, ctx.object_mesh)
        t = cfg.lambda_c * lc + cfg.lambda_h * lh + cfg.lambda_p * lp
        breakdown[side] = {"contact": lc, "hand_centric": lh, "penetration": lp, "total": t}
        total = t if total is None else total + t
    return total, breakdown


def _trace_row(it: int, total, br) -> dict:
    row = {"iteration": it, "total": float(total.detach())}
    for side, d in br.items():
        for k, v in d.items():
            row[f"{side}_{k}"] = float(v.detach())
    row["penetration"] = sum(row[f"{s}_penetration"] for s in br)
    return row


def optimize_pose(ctx: GraspContext, initial: InteractionPose, prior, cfg: PomConfig):
    """Gradient descent on both hands' pose (object fixed). Returns (pose, trace).

    ``trace[i]`` holds the loss after ``i`` updates, so it has ``iterations + 1`` rows.
    """
    object_before = initial.object
    pose_t = pose_tensors(initial, torch.float64, requires_grad=True)
    if cfg.optimize_shape:
        for side in HANDS:
            if "shape_offsets" not in pose_t[side]:
                nv = ctx.model.entities[side].cloud.vertices.shape[0]
                pose_t[side]["shape_offsets"] = torch.zeros(nv, 3, dtype=torch.float64, requires_grad=True)
    hands = {s: initial.hand(s).root_translation for s in HANDS}
    maps = prior({s: hands[s] for s in HANDS}, ctx.object_points.numpy()) if not isinstance(prior, dict) else prior
    groups = []
    for side in HANDS:
        p = pose_t[side]
        groups.append((p["root_rotation"], cfg.lr_pose))
        groups.append((p["joint_rotations"], cfg.lr_pose))
        groups.append((p["root_translation"], cfg.lr_translation))
        if "shape_offsets" in p and cfg.optimize_shape:
            groups.append((p["shape_offsets"], cfg.lr_translation))
    params = [g[0] for g in groups]
    trace = []
    moments: dict = {}
    for it in range(cfg.iterations + 1):
        total, br = pom_loss(ctx, pose_t, maps, cfg)
        row = _trace_row(it, total, br)
        trace.append(row)
        if not math.isfinite(row["total"]):
            raise PomError(f"non-finite POM loss at iteration {it}", trace)
        if it == cfg.iterations:
            break
        grads = torch.autograd.grad(total, params, allow_unused=True)
        with torch.no_grad():
            step = it + 1
            for j, ((p, final), g) in enumerate(zip(groups, grads)):
                if g is None:
                    continue
                if cfg.grad_clip > 0:
                    n = float(torch.linalg.norm(g))
                    if n > cfg.grad_clip:
                        g = g * (cfg.grad_clip / n)
                lr = cfg.lr(it, final)
                if cfg.optimizer == "sgd":
                    p -= lr * g
                    continue
                m, v = moments.setdefault(j, (torch.zeros_like(p), torch.zeros_like(p)))
                m.mul_(ADAM_BETAS[0]).add_((1 - ADAM_BETAS[0]) * g)
                v.mul_(ADAM_BETAS[1]).add_((1 - ADAM_BETAS[1]) * g * g)
                mh = m / (1 - ADAM_BETAS[0] ** step)
                vh = v / (1 - ADAM_BETAS[1] ** step)
                p -= lr * mh / (torch.sqrt(vh) + ADAM_EPS)
    out = {}
    for side in HANDS:
        p = pose_t[side]
        shape = p["shape_offsets"].detach().numpy().copy() if "shape_offsets" in p else None
        out[side] = HandPose(p["root_rotation"].detach().numpy().copy(),
                             p["root_translation"].detach().numpy().copy(),
                             p["joint_rotations"].detach().numpy().copy(), shape)
    return InteractionPose(out["left"], out["right"], object_before), trace
