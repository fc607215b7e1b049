"""Gaussian kernels anchored on triangle faces.

Each kernel lives on one face and is positioned by barycentric weights. Its
orientation and extent are derived from the face itself: the first axis is the
face normal, the second points from the face centroid to the first vertex and
the third completes a right-handed frame. Because everything is computed from
the (trainable) vertex positions, gradients reach the mesh through every
kernel attribute.

All batched functions take torch tensors with arbitrary leading dimensions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch

from .mesh import TriangleMesh

SCALE_FLOOR = 1e-8
NORMAL_SCALE = 1e-4
DEGENERATE_EPS = 1e-12
DEFAULT_SH_DEGREE = 2

CLOUD_MAGIC = b"HOGSCLD\x00"
CLOUD_VERSION = 1


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


@dataclass
class SurfaceGaussian:
    face_id: int
    beta: np.ndarray
    scale_factor: float
    sh_coeffs: np.ndarray
    opacity: float

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if not self.scale_factor > 0:
            raise ValueError("scale_factor must be positive")
        if not 0.0 < self.opacity < 1.0:
            raise ValueError("opacity must lie in (0, 1)")
        if abs(self.beta.sum() - 1.0) > 1e-6 or (self.beta < 0).any():
            raise ValueError("beta must lie on the probability simplex")


@dataclass
class GaussianFrame:
    """Batched kernel geometry: centers (...,3), rotations (...,3,3), scales (...,3), covariances (...,3,3)."""

    center: torch.Tensor
    rotation: torch.Tensor
    scales: torch.Tensor
    covariance: torch.Tensor

    def __len__(self) -> int:
        return self.center.shape[0]

    @staticmethod
    def cat(frames: list["GaussianFrame"]) -> "GaussianFrame":
        return GaussianFrame(
            torch.cat([f.center for f in frames]),
            torch.cat([f.rotation for f in frames]),
            torch.cat([f.scales for f in frames]),
            torch.cat([f.covariance for f in frames]),
        )


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def gaussian_center(beta, face_vertices) -> torch.Tensor:
    """Barycentric blend of a face's vertices; ``face_vertices`` has shape (..., 3, 3)."""
    beta = _as_tensor(beta)
    face_vertices = _as_tensor(face_vertices, beta)
    return (beta.unsqueeze(-1) * face_vertices).sum(dim=-2)


def face_frame(v1, v2, v3) -> torch.Tensor:
    """Rotation whose columns are (normal, centroid->v1, normal x that)."""
    v1 = _as_tensor(v1)
    v2, v3 = _as_tensor(v2, v1), _as_tensor(v3, v1)
    n = torch.linalg.cross(v2 - v1, v3 - v1, dim=-1)
    n_len = torch.linalg.norm(n, dim=-1, keepdim=True)
    if bool((n_len <= 2 * DEGENERATE_EPS).any()):
        raise ValueError("degenerate face: cannot build a frame")
    r1 = n / n_len
    m = (v1 + v2 + v3) / 3.0
    d = v1 - m
    d = d - (d * r1).sum(-1, keepdim=True) * r1
    r2 = d / torch.linalg.norm(d, dim=-1, keepdim=True)
    r3 = torch.linalg.cross(r1, r2, dim=-1)
    return torch.stack([r1, r2, r3], dim=-1)


def face_scale(v1, v2, v3, scale_factor, rotation=None) -> torch.Tensor:
    """Face-derived scales (s1, s2, s3) with s1 == s2; all multiplied by ``scale_factor``.

    s3 uses the centroid-relative vertex so that the result does not depend on
    where the mesh sits in space.
    """
    v1 = _as_tensor(v1)
    v2, v3 = _as_tensor(v2, v1), _as_tensor(v3, v1)
    scale_factor = _as_tensor(scale_factor, v1)
    if bool((scale_factor <= 0).any()):
        raise ValueError("scale_factor must be positive")
    if rotation is None:
        rotation = face_frame(v1, v2, v3)
    m = (v1 + v2 + v3) / 3.0
    s12 = torch.linalg.norm(m - v2, dim=-1)
    s3 = ((v2 - m) * rotation[..., :, 2]).sum(-1).abs()
    s = torch.stack([s12, s12, s3], dim=-1) * scale_factor.unsqueeze(-1)
    return s.clamp_min(SCALE_FLOOR)


def build_covariance(rotation, scales) -> torch.Tensor:
    rotation = _as_tensor(rotation)
    scales = _as_tensor(scales, rotation)
    m = rotation * scales.unsqueeze(-2)
    return m @ m.transpose(-1, -2)


def axis_scales(face_scales: torch.Tensor) -> torch.Tensor:
    """Per-axis standard deviations actually used along (normal, r2, r3).

    The normal axis is pinned to a thin shell so splats hug the surface; the
    in-plane axes take the face-derived s2 and s3.
    """
    normal = torch.full_like(face_scales[..., :1], NORMAL_SCALE)
    return torch.cat([normal, face_scales[..., 1:]], dim=-1)


def project_beta(beta):
    """Euclidean projection of each row onto the probability simplex."""
    is_np = not isinstance(beta, torch.Tensor)
    b = _as_tensor(beta)
    if b.shape[-1] == 0:
        raise ValueError("empty beta")
    if bool(torch.isnan(b).all(dim=-1).any()):
        raise ValueError("beta is all-NaN")
    u, _ = torch.sort(b, dim=-1, descending=True)
    css = u.cumsum(-1) - 1.0
    ind = torch.arange(1, b.shape[-1] + 1, dtype=b.dtype, device=b.device)
    cond = (u - css / ind) > 0
    # the mask is a prefix of Trues, so the largest masked index is its end
    rho = (cond * ind).argmax(-1, keepdim=True)
    theta = css.gather(-1, rho) / (rho + 1).to(b.dtype)
    out = (b - theta).clamp_min(0.0)
    return out.numpy() if is_np else out


# ---------------------------------------------------------------- clouds


def initial_betas(k: int) -> np.ndarray:
    if k < 1:
        raise ValueError("k must be >= 1")
    if k == 1:
        return np.full((1, 3), 1.0 / 3.0)
    if k == 2:
        return np.array([[0.5, 0.25, 0.25], [0.25, 0.5, 0.25]])
    # spread the remaining points on a shrunken ring around the centroid
    angles = 2 * np.pi * np.arange(k) / k
    corners = np.eye(3)
    c = np.full(3, 1.0 / 3.0)
    pts = []
    for a in angles:
        t = (a / (2 * np.pi)) * 3
        i = int(t) % 3
        frac = t - int(t)
        edge_pt = (1 - frac) * corners[i] + frac * corners[(i + 1) % 3]
        pts.append(c + 0.5 * (edge_pt - c))
    return np.array(pts)


@dataclass
class GaussianCloud:
    """Kernels anchored on one mesh. Tensors are updated in place by the trainer."""

    vertices: torch.Tensor
    faces: np.ndarray
    face_id: torch.Tensor
    beta: torch.Tensor
    scale_factor: torch.Tensor
    sh: torch.Tensor
    opacity: torch.Tensor
    k: int
    sh_degree: int

    def __len__(self) -> int:
        return int(self.face_id.shape[0])

    @property
    def dtype(self) -> torch.dtype:
        return self.vertices.dtype

    @property
    def mesh(self) -> TriangleMesh:
        m = TriangleMesh(self.vertices.detach().double().numpy(), self.faces)
        m.is_watertight = self._watertight
        return m

    _watertight: bool = False

    def kernel(self, i: int) -> SurfaceGaussian:
        return SurfaceGaussian(
            int(self.face_id[i]),
            self.beta[i].detach().double().numpy(),
            float(self.scale_factor[i]),
            self.sh[i].detach().double().numpy(),
            float(self.opacity[i]),
        )

    def clone(self) -> "GaussianCloud":
        c = GaussianCloud(
            self.vertices.detach().clone(), self.faces.copy(), self.face_id.clone(),
            self.beta.detach().clone(), self.scale_factor.detach().clone(),
            self.sh.detach().clone(), self.opacity.detach().clone(), self.k, self.sh_degree,
        )
        c._watertight = self._watertight
        return c

    def to(self, dtype: torch.dtype) -> "GaussianCloud":
        c = self.clone()
        for name in ("vertices", "beta", "scale_factor", "sh", "opacity"):
            setattr(c, name, getattr(c, name).to(dtype))
        return c

    def check_invariants(self, tol: float = 1e-6) -> None:
        if len(self) != self.k * len(self.faces):
            raise AssertionError("kernel count changed")
        b = self.beta.detach()
        if (b < -tol).any() or ((b.sum(-1) - 1).abs() > tol).any():
            raise AssertionError("beta left the simplex")
        o = self.opacity.detach()
        if ((o <= 0) | (o >= 1)).any():
            raise AssertionError("opacity outside (0, 1)")
        if (self.scale_factor.detach() <= 0).any():
            raise AssertionError("non-positive scale factor")


def anchor_gaussians(
    mesh: TriangleMesh,
    k: int = 2,
    seed: int = 0,
    sh_degree: int = DEFAULT_SH_DEGREE,
    dtype: torch.dtype = torch.float32,
) -> GaussianCloud:
    """Place ``k`` kernels on every face at fixed interior barycentric points.

    ``seed`` is accepted for interface stability; the placement is deterministic.
    """
    if not 0 <= sh_degree <= 3:
        raise ValueError("sh_degree must be in 0..3")
    betas = initial_betas(k)
    n_faces = mesh.n_faces
    face_id = np.repeat(np.arange(n_faces), k)
    beta = np.tile(betas, (n_faces, 1))
    n = len(face_id)
    cloud = GaussianCloud(
        vertices=torch.tensor(mesh.vertices, dtype=dtype),
        faces=mesh.faces.copy(),
        face_id=torch.as_tensor(face_id, dtype=torch.int64),
        beta=torch.tensor(beta, dtype=dtype),
        scale_factor=torch.ones(n, dtype=dtype),
        # DC = 0 decodes to mid-gray after the +0.5 offset
        sh=torch.zeros(n, sh_coeff_count(sh_degree), 3, dtype=dtype),
        opacity=torch.full((n,), 0.5, dtype=dtype),
        k=k,
        sh_degree=sh_degree,
    )
    cloud._watertight = mesh.is_watertight
    return cloud


def cloud_frames(cloud: GaussianCloud, vertices: torch.Tensor | None = None,
                 beta: torch.Tensor | None = None, scale_factor: torch.Tensor | None = None) -> GaussianFrame:
    """Canonical-space frames for every kernel; overrides allow differentiable leaves."""
    vertices = cloud.vertices if vertices is None else vertices
    beta = cloud.beta if beta is None else beta
    scale_factor = cloud.scale_factor if scale_factor is None else scale_factor
    tri = vertices[torch.as_tensor(cloud.faces)[cloud.face_id]]
    v1, v2, v3 = tri[:, 0], tri[:, 1], tri[:, 2]
    rot = face_frame(v1, v2, v3)
    s = axis_scales(face_scale(v1, v2, v3, scale_factor, rot))
    center = gaussian_center(beta, tri)
    return GaussianFrame(center, rot, s, build_covariance(rot, s))


# ---------------------------------------------------------------- container


def _kernel_dtype(sh_degree: int) -> np.dtype:
    return np.dtype([
        ("face_id", "<u4"),
        ("beta", "<f4", (3,)),
        ("scale_factor", "<f4"),
        ("opacity", "<f4"),
        ("sh", "<f4", (sh_coeff_count(sh_degree) * 3,)),
    ])


def cloud_to_bytes(cloud: GaussianCloud) -> bytes:
    """Little-endian container: 16-byte header, counts, vertex and face arrays, kernel records."""
    header = CLOUD_MAGIC + struct.pack("<II", CLOUD_VERSION, cloud.sh_degree)
    counts = struct.pack("<IIII", len(cloud.vertices), len(cloud.faces), len(cloud), cloud.k)
    verts = cloud.vertices.detach().cpu().numpy().astype("<f4").tobytes()
    faces = np.asarray(cloud.faces).astype("<u4").tobytes()
    rec = np.zeros(len(cloud), dtype=_kernel_dtype(cloud.sh_degree))
    rec["face_id"] = cloud.face_id.numpy()
    rec["beta"] = cloud.beta.detach().cpu().numpy()
    rec["scale_factor"] = cloud.scale_factor.detach().cpu().numpy()
    rec["opacity"] = cloud.opacity.detach().cpu().numpy()
    rec["sh"] = cloud.sh.detach().cpu().numpy().reshape(len(cloud), -1)
    flags = struct.pack("<I", int(cloud._watertight))
    return header + counts + flags + verts + faces + rec.tobytes()


def cloud_from_bytes(data: bytes, dtype: torch.dtype = torch.float32) -> GaussianCloud:
    if data[:8] != CLOUD_MAGIC:
        raise ValueError("not a gaussian cloud container")
    version, sh_degree = struct.unpack_from("<II", data, 8)
    if version != CLOUD_VERSION:
        raise ValueError(f"unsupported cloud container version {version}")
    n_v, n_f, n_k, k = struct.unpack_from("<IIII", data, 16)
    (watertight,) = struct.unpack_from("<I", data, 32)
    off = 36
    verts = np.frombuffer(data, "<f4", n_v * 3, off).reshape(n_v, 3)
    off += verts.nbytes
    faces = np.frombuffer(data, "<u4", n_f * 3, off).reshape(n_f, 3).astype(np.int64)
    off += faces.size * 4
    rec = np.frombuffer(data, _kernel_dtype(sh_degree), n_k, off)
    cloud = GaussianCloud(
        vertices=torch.tensor(verts, dtype=dtype),
        faces=faces,
        face_id=torch.as_tensor(rec["face_id"].astype(np.int64)),
        beta=torch.tensor(rec["beta"], dtype=dtype),
        scale_factor=torch.tensor(rec["scale_factor"], dtype=dtype),
        sh=torch.tensor(rec["sh"].reshape(n_k, -1, 3), dtype=dtype),
        opacity=torch.tensor(rec["opacity"], dtype=dtype),
        k=k,
        sh_degree=sh_degree,
    )
    cloud._watertight = bool(watertight)
    return cloud
