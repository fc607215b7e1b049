"""Triangle meshes: OBJ-subset I/O, validation and a few procedural primitives."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEGENERATE_AREA = 1e-12


class MeshError(ValueError):
    """Raised for malformed or degenerate mesh input."""


def face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    v = vertices[faces]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def is_closed_manifold(faces: np.ndarray) -> bool:
    """True when every directed edge is matched by exactly one opposite edge."""
    if len(faces) == 0:
        return False
    f = np.asarray(faces, dtype=np.int64)
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    n = int(f.max()) + 1
    keys = directed[:, 0] * n + directed[:, 1]
    if len(np.unique(keys)) != len(keys):
        return False
    reverse = directed[:, 1] * n + directed[:, 0]
    return bool(np.isin(reverse, keys).all())


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    is_watertight: bool = field(default=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    @classmethod
    def from_arrays(cls, vertices, faces) -> "TriangleMesh":
        mesh = cls(vertices, faces)
        mesh.validate()
        mesh.is_watertight = is_closed_manifold(mesh.faces)
        return mesh

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def validate(self) -> None:
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError("face index out of range")
        bad = np.flatnonzero(face_areas(self.vertices, self.faces) <= DEGENERATE_AREA)
        if len(bad):
            raise MeshError(f"degenerate faces: {bad.tolist()}")

    def copy(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices.copy(), self.faces.copy(), self.is_watertight)

    def with_vertices(self, vertices) -> "TriangleMesh":
        return TriangleMesh(np.asarray(vertices, dtype=np.float64), self.faces.copy(), self.is_watertight)

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)


def _parse_index(token: str, n_vertices: int, lineno: int) -> int:
    head = token.split("/")[0]
    try:
        idx = int(head)
    except ValueError:
        raise MeshError(f"bad face index {token!r} at line {lineno}") from None
    if idx < 0:
        idx = n_vertices + idx
    else:
        idx -= 1
    if not 0 <= idx < n_vertices:
        raise MeshError(f"face index {token!r} out of range at line {lineno}")
    return idx


def parse_obj(text: str) -> TriangleMesh:
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise MeshError(f"vertex needs 3 coordinates at line {lineno}")
            try:
                vertices.append([float(p) for p in parts[1:4]])
            except ValueError:
                raise MeshError(f"bad vertex coordinate at line {lineno}") from None
        elif tag == "f":
            if len(parts) != 4:
                raise MeshError(f"non-triangular face at line {lineno}")
            faces.append([_parse_index(p, len(vertices), lineno) for p in parts[1:]])
        # vt/vn/o/g/s/usemtl/mtllib carry nothing we need
    if not faces:
        raise MeshError("mesh has no faces")
    return TriangleMesh.from_arrays(np.array(vertices), np.array(faces))


def load_mesh(path) -> TriangleMesh:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    return parse_obj(path.read_text())


def dump_obj(mesh: TriangleMesh) -> str:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    return "\n".join(lines) + "\n"


def save_mesh(mesh: TriangleMesh, path) -> None:
    Path(path).write_text(dump_obj(mesh))


# ---------------------------------------------------------------- primitives


def icosphere(subdivisions: int = 2, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    t = (1.0 + 5.0**0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts) * radius + np.asarray(center, dtype=np.float64)
    return TriangleMesh.from_arrays(v, np.array(faces))


def box(size=(1.0, 1.0, 1.0), segments=(1, 1, 1), center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Closed axis-aligned box with outward-facing triangles, each side split into a grid."""
    size = np.asarray(size, dtype=np.float64)
    segments = tuple(int(s) for s in segments)
    index: dict[tuple[int, int, int], int] = {}
    verts: list[np.ndarray] = []

    def vid(i: int, j: int, k: int) -> int:
        key = (i, j, k)
        if key not in index:
            index[key] = len(verts)
            verts.append(np.array([i / segments[0], j / segments[1], k / segments[2]]) - 0.5)
        return index[key]

    faces = []
    for axis in range(3):
        u_ax, v_ax = [a for a in range(3) if a != axis]
        nu, nv = segments[u_ax], segments[v_ax]
        for side in (0, segments[axis]):
            for a in range(nu):
                for b in range(nv):
                    quad = []
                    for da, db in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        ijk = [0, 0, 0]
                        ijk[axis] = side
                        ijk[u_ax] = a + da
                        ijk[v_ax] = b + db
                        quad.append(vid(*ijk))
                    p, q, r, s = quad
                    # (u, v, axis) is right-handed for axis 0 and 2, left-handed for 1
                    outward = (side > 0) == (axis != 1)
                    if outward:
                        faces += [(p, q, r), (p, r, s)]
                    else:
                        faces += [(p, r, q), (p, s, r)]
    v = np.array(verts) * size + np.asarray(center, dtype=np.float64)
    return TriangleMesh.from_arrays(v, np.array(faces))


def merge(meshes: list[TriangleMesh]) -> TriangleMesh:
    verts, faces, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += m.n_vertices
    return TriangleMesh.from_arrays(np.concatenate(verts), np.concatenate(faces))
