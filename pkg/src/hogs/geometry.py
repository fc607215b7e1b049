"""Point-to-mesh queries: closest points, generalized winding numbers, signed distance."""

from __future__ import annotations

import math

import numpy as np
import torch
from numba import njit, prange

from .mesh import TriangleMesh

FEATURE_FACE = 0
FEATURE_EDGE = 1
FEATURE_VERTEX = 2


@njit(cache=True, inline="always")
def _tri_closest(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    """Closest point on triangle abc to p (Ericson's region test). Returns (qx, qy, qz, feature)."""
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az, FEATURE_VERTEX
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz, FEATURE_VERTEX
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return ax + v * abx, ay + v * aby, az + v * abz, FEATURE_EDGE
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz, FEATURE_VERTEX
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return ax + w * acx, ay + w * acy, az + w * acz, FEATURE_EDGE
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return bx + w * (cx - bx), by + w * (cy - by), bz + w * (cz - bz), FEATURE_EDGE
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w, FEATURE_FACE


@njit(cache=True)
def _closest_on_triangle(p, a, b, c):
    """Array wrapper around the scalar kernel. Returns (q, feature)."""
    qx, qy, qz, feat = _tri_closest(p[0], p[1], p[2], a[0], a[1], a[2], b[0], b[1], b[2], c[0], c[1], c[2])
    return np.array([qx, qy, qz]), feat


@njit(parallel=True, cache=True)
def _closest_points(points, verts, faces):
    m = points.shape[0]
    dist2 = np.full(m, np.inf)
    closest = np.zeros((m, 3))
    face = np.zeros(m, dtype=np.int64)
    feature = np.zeros(m, dtype=np.int64)
    for i in prange(m):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        best = np.inf
        bq0 = bq1 = bq2 = 0.0
        bf = 0
        bfeat = 0
        for f in range(faces.shape[0]):
            a, b, c = faces[f, 0], faces[f, 1], faces[f, 2]
            qx, qy, qz, feat = _tri_closest(px, py, pz, verts[a, 0], verts[a, 1], verts[a, 2],
                                            verts[b, 0], verts[b, 1], verts[b, 2],
                                            verts[c, 0], verts[c, 1], verts[c, 2])
            d = (px - qx) ** 2 + (py - qy) ** 2 + (pz - qz) ** 2
            if d < best:
                best = d
                bq0, bq1, bq2 = qx, qy, qz
                bf = f
                bfeat = feat
        dist2[i] = best
        closest[i, 0], closest[i, 1], closest[i, 2] = bq0, bq1, bq2
        face[i] = bf
        feature[i] = bfeat
    return dist2, closest, face, feature


@njit(parallel=True, cache=True)
def _winding_numbers(points, verts, faces):
    out = np.zeros(points.shape[0])
    for i in prange(points.shape[0]):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        total = 0.0
        for f in range(faces.shape[0]):
            i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
            ax, ay, az = verts[i0, 0] - px, verts[i0, 1] - py, verts[i0, 2] - pz
            bx, by, bz = verts[i1, 0] - px, verts[i1, 1] - py, verts[i1, 2] - pz
            cx, cy, cz = verts[i2, 0] - px, verts[i2, 1] - py, verts[i2, 2] - pz
            la = math.sqrt(ax * ax + ay * ay + az * az)
            lb = math.sqrt(bx * bx + by * by + bz * bz)
            lc = math.sqrt(cx * cx + cy * cy + cz * cz)
            det = ax * (by * cz - bz * cy) - ay * (bx * cz - bz * cx) + az * (bx * cy - by * cx)
            den = (la * lb * lc + (ax * bx + ay * by + az * bz) * lc
                   + (bx * cx + by * cy + bz * cz) * la + (cx * ax + cy * ay + cz * az) * lb)
            total += 2.0 * math.atan2(det, den)
        out[i] = total / (4.0 * math.pi)
    return out


def _prep(points, mesh: TriangleMesh):
    p = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    if mesh.n_faces == 0:
        raise ValueError("empty mesh")
    return p, np.ascontiguousarray(mesh.vertices), np.ascontiguousarray(mesh.faces)


def closest_points(points, mesh: TriangleMesh):
    """Brute-force nearest surface point. Returns (distance, point, face, feature)."""
    p, v, f = _prep(points, mesh)
    d2, q, face, feat = _closest_points(p, v, f)
    return np.sqrt(d2), q, face, feat


def winding_number(points, mesh: TriangleMesh) -> np.ndarray:
    p, v, f = _prep(points, mesh)
    return _winding_numbers(p, v, f)


def signed_distance(points, mesh: TriangleMesh):
    """Negative inside. Sign from the face normal when the nearest feature is a face
    interior, else from the winding number. Returns (sdf, closest_points)."""
    dist, q, face, feat = closest_points(points, mesh)
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    normals = mesh.face_normals()[face]
    side = np.einsum("ij,ij->i", p - q, normals)
    inside = side < 0
    near_edge = feat != FEATURE_FACE
    if near_edge.any():
        inside[near_edge] = winding_number(p[near_edge], mesh) > 0.5
    return np.where(inside, -dist, dist), q


def point_mesh_distance(points: torch.Tensor, mesh: TriangleMesh) -> torch.Tensor:
    """Unsigned distance with gradient w.r.t. ``points`` (closest point held fixed)."""
    with torch.no_grad():
        _, q, _, _ = closest_points(points.detach().double().cpu().numpy(), mesh)
    q = torch.as_tensor(q, dtype=points.dtype)
    return safe_norm(points - q)


def safe_norm(d: torch.Tensor) -> torch.Tensor:
    """Euclidean norm over the last axis with zero (not NaN) gradient at the origin."""
    n2 = (d * d).sum(-1)
    pos = n2 > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, n2, torch.ones_like(n2))), torch.zeros_like(n2))


def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0):
    """Area-weighted uniform surface samples. Returns (points, face ids, barycentrics)."""
    rng = np.random.default_rng(seed)
    v = mesh.vertices[mesh.faces]
    area = 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
    face = rng.choice(mesh.n_faces, size=n, p=area / area.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    bary = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    pts = np.einsum("ij,ijk->ik", bary, v[face])
    return pts, face, bary
