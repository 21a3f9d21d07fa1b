"""Triangle mesh container, ASCII OBJ I/O, and primitive generators.

Meshes are the ground-truth geometry for dataset generation: complete clouds
are sampled from the surface, partial clouds come from ray casting or from the
radar simulator driven by surface scatterers.  Only the geometry subset of
OBJ is read (``v`` and ``f`` records); faces with more than three vertices
are fan triangulated.  Primitives wind counter-clockwise seen from outside,
so face normals point outward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cloudio import atomic_write_text


class DegenerateMesh(ValueError):
    """Raised for meshes with no faces or with invalid vertex references."""


class MeshParseError(ValueError):
    """Raised on malformed OBJ input; carries the 1-based line number."""

    def __init__(self, path, line_no: int, message: str):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


@dataclass
class Mesh:
    """Indexed triangle mesh: vertices (V, 3) float, faces (F, 3) int."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) == 0:
            raise DegenerateMesh("mesh has no faces")
        if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
            raise DegenerateMesh("face references a vertex out of range")

    @property
    def triangles(self) -> np.ndarray:
        """Face corner positions, shape (F, 3, 3)."""
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        tri = self.triangles
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def face_normals(self) -> np.ndarray:
        """Unit normals following the winding order; zero for slivers."""
        tri = self.triangles
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norm = np.linalg.norm(cross, axis=1, keepdims=True)
        return np.divide(cross, norm, out=np.zeros_like(cross), where=norm > 0)

    def surface_area(self) -> float:
        return float(self.face_areas().sum())

    def transformed(self, rotation=None, translation=None, scale: float = 1.0) -> "Mesh":
        v = self.vertices * scale
        if rotation is not None:
            v = v @ np.asarray(rotation, dtype=float).T
        if translation is not None:
            v = v + np.asarray(translation, dtype=float)
        return Mesh(v, self.faces.copy())


def load_obj(path) -> Mesh:
    vertices = []
    faces = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise MeshParseError(path, line_no, "vertex needs 3 coordinates")
                try:
                    vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError:
                    raise MeshParseError(path, line_no, "non-numeric vertex") from None
            elif tag == "f":
                if len(parts) < 4:
                    raise MeshParseError(path, line_no, "face needs >= 3 vertices")
                idx = []
                for token in parts[1:]:
                    head = token.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError:
                        raise MeshParseError(
                            path, line_no, f"bad face index {token!r}"
                        ) from None
                    if i == 0:
                        raise MeshParseError(path, line_no, "face index 0 is invalid")
                    # OBJ indices are 1-based; negatives count from the end.
                    idx.append(i - 1 if i > 0 else len(vertices) + i)
                for a, b in zip(idx[1:], idx[2:]):
                    faces.append([idx[0], a, b])
            # other record types (vn, vt, usemtl, ...) are ignored
    if not faces:
        raise DegenerateMesh(f"{path}: no faces found")
    mesh = Mesh(np.asarray(vertices, dtype=float), np.asarray(faces, dtype=np.int64))
    return mesh


def obj_text(mesh: Mesh) -> str:
    lines = ["# exported triangle mesh"]
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    for f in mesh.faces:
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    return "\n".join(lines) + "\n"


def save_obj(path, mesh: Mesh) -> None:
    atomic_write_text(path, obj_text(mesh))


def box_mesh(extents=(1.0, 1.0, 1.0)) -> Mesh:
    """Axis-aligned box centered at the origin, outward winding."""
    ex, ey, ez = (float(e) / 2.0 for e in extents)
    if min(ex, ey, ez) <= 0.0:
        raise ValueError("extents must be positive")
    v = np.array([
        [-ex, -ey, -ez], [ex, -ey, -ez], [ex, ey, -ez], [-ex, ey, -ez],
        [-ex, -ey, ez], [ex, -ey, ez], [ex, ey, ez], [-ex, ey, ez],
    ])
    quads = [
        (0, 3, 2, 1),  # -z
        (4, 5, 6, 7),  # +z
        (0, 1, 5, 4),  # -y
        (2, 3, 7, 6),  # +y
        (0, 4, 7, 3),  # -x
        (1, 2, 6, 5),  # +x
    ]
    faces = []
    for a, b, c, d in quads:
        faces.append([a, b, c])
        faces.append([a, c, d])
    return Mesh(v, np.asarray(faces))


def cylinder_mesh(radius: float = 0.5, height: float = 1.0,
                  n_segments: int = 24) -> Mesh:
    """Closed cylinder along z, centered at the origin."""
    if radius <= 0.0 or height <= 0.0:
        raise ValueError("radius and height must be positive")
    if n_segments < 3:
        raise ValueError("n_segments must be >= 3")
    ang = 2.0 * np.pi * np.arange(n_segments) / n_segments
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    lo = np.column_stack([ring, np.full(n_segments, -height / 2.0)])
    hi = np.column_stack([ring, np.full(n_segments, height / 2.0)])
    centers = np.array([[0.0, 0.0, -height / 2.0], [0.0, 0.0, height / 2.0]])
    verts = np.vstack([lo, hi, centers])
    c_lo = 2 * n_segments
    c_hi = 2 * n_segments + 1
    faces = []
    for i in range(n_segments):
        j = (i + 1) % n_segments
        # side quad, outward
        faces.append([i, j, n_segments + j])
        faces.append([i, n_segments + j, n_segments + i])
        # caps: bottom winds clockwise seen from +z so its normal is -z
        faces.append([c_lo, j, i])
        faces.append([c_hi, n_segments + i, n_segments + j])
    return Mesh(verts, np.asarray(faces))


def icosphere_mesh(radius: float = 0.5, subdivisions: int = 2) -> Mesh:
    """Icosahedron subdivided and projected onto a sphere."""
    if radius <= 0.0:
        raise ValueError("radius must be positive")
    if subdivisions < 0:
        raise ValueError("subdivisions must be >= 0")
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    v = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
    verts = [tuple(p) for p in v]
    faces = [tuple(t) for t in f]
    for _ in range(subdivisions):
        cache = {}
        new_faces = []

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key in cache:
                return cache[key]
            p = np.asarray(verts[a]) + np.asarray(verts[b])
            p /= np.linalg.norm(p)
            verts.append(tuple(p))
            cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab = midpoint(a, b)
            bc = midpoint(b, c)
            ca = midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    verts_arr = np.asarray(verts, dtype=float) * radius
    return Mesh(verts_arr, np.asarray(faces, dtype=np.int64))
