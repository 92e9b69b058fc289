"""
Triangle meshes: ASCII ingestion, ray-triangle intersection and point-in-solid voxelization
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Tuple, Union

import numpy as np
from numpy.typing import NDArray

from errors import OpenMesh, ParseError

# Fixed, deliberately non-axis-aligned direction for parity ray casting;
# axis-aligned rays would graze the edges of axis-aligned meshes
_PARITY_DIRECTION = np.array([1.0, 0.2113248654, 0.1357021871])
_PARITY_DIRECTION /= np.linalg.norm(_PARITY_DIRECTION)
_CHUNK_PAIRS = 2_000_000
_IGNORED_TAGS = {"vn", "vt", "o", "g", "s", "usemtl", "mtllib", "l"}


@dataclass(eq=False)
class TriangleMesh:
    """Vertices in mm, faces as 0-based index triples"""
    vertices: NDArray[np.float64]
    faces: NDArray[np.int64]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ParseError("face index out of range")

    @property
    def triangles(self) -> NDArray[np.float64]:
        return self.vertices[self.faces]

    def face_cross_products(self) -> NDArray[np.float64]:
        """(v1 - v0) x (v2 - v0) per face: normal direction scaled by twice the area"""
        tri = self.triangles
        return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])

    def bounds(self) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def transformed(self, matrix: NDArray[np.float64], translation: NDArray[np.float64]) -> "TriangleMesh":
        faces = self.faces
        if np.linalg.det(matrix) < 0:
            faces = faces[:, ::-1]
        return TriangleMesh(self.vertices @ np.asarray(matrix).T + translation, faces.copy())


def parse_ascii_mesh(source: Union[str, Path], text: bool = False) -> TriangleMesh:
    """
    Parse the `v x y z` / `f i j k` subset of the Wavefront text layout.
    Indices are 1-based; polygons with more than three corners are fanned.
    """
    if text:
        content, name = str(source), "<text>"
    else:
        path = Path(source)
        try:
            content = path.read_text(encoding="utf-8")
        except UnicodeDecodeError as e:
            raise ParseError(f"{path}: not a text mesh ({e})")
        name = str(path)

    vertices: List[List[float]] = []
    faces: List[List[int]] = []
    for lineno, raw in enumerate(content.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *fields = line.split()
        if tag == "v":
            if len(fields) < 3:
                raise ParseError(f"{name}:{lineno}: vertex needs 3 coordinates")
            try:
                vertices.append([float(x) for x in fields[:3]])
            except ValueError:
                raise ParseError(f"{name}:{lineno}: bad vertex coordinate")
        elif tag == "f":
            if len(fields) < 3:
                raise ParseError(f"{name}:{lineno}: face needs at least 3 indices")
            try:
                corners = [int(f.split("/", 1)[0]) for f in fields]
            except ValueError:
                raise ParseError(f"{name}:{lineno}: bad face index")
            if any(c < 1 for c in corners):
                raise ParseError(f"{name}:{lineno}: face indices are 1-based")
            for k in range(1, len(corners) - 1):
                faces.append([corners[0] - 1, corners[k] - 1, corners[k + 1] - 1])
        elif tag in _IGNORED_TAGS:
            continue
        else:
            raise ParseError(f"{name}:{lineno}: unknown record '{tag}'")

    if not vertices or not faces:
        raise ParseError(f"{name}: mesh has no vertices or no faces")
    if max(max(f) for f in faces) >= len(vertices):
        raise ParseError(f"{name}: face references a missing vertex")
    return TriangleMesh(np.array(vertices), np.array(faces))


def write_ascii_mesh(mesh: TriangleMesh, path: Union[str, Path]) -> str:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)


def is_watertight(mesh: TriangleMesh) -> bool:
    """Every undirected edge is shared by exactly two faces"""
    edges = np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return bool(len(counts)) and bool(np.all(counts == 2))


def require_watertight(mesh: TriangleMesh, label: str = "mesh") -> None:
    if not is_watertight(mesh):
        raise OpenMesh(f"{label} is not watertight")


def ray_triangle_distances(mesh: TriangleMesh, origin: Iterable[float],
                           direction: Iterable[float]) -> NDArray[np.float64]:
    """Möller–Trumbore distance along the ray to every face (inf where missed)"""
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    tri = mesh.triangles
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    pvec = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-12
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origin - tri[:, 0]
    u = np.einsum("ij,ij->i", tvec, pvec) * inv_det
    qvec = np.cross(tvec, e1)
    v = (qvec @ direction) * inv_det
    t = np.einsum("ij,ij->i", e2, qvec) * inv_det
    eps = 1e-12
    hit = ok & (u >= -eps) & (v >= -eps) & (u + v <= 1 + eps)
    return np.where(hit, t, np.inf)


def points_inside_mesh(mesh: TriangleMesh, points: NDArray[np.float64]) -> NDArray[np.bool_]:
    """Parity ray-casting inside test for a closed mesh"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    inside = np.zeros(len(points), dtype=bool)
    if len(points) == 0:
        return inside
    tri = mesh.triangles
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    d = _PARITY_DIRECTION
    pvec = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    keep = np.abs(det) > 1e-12
    v0, e1, e2, pvec, det = tri[keep, 0], e1[keep], e2[keep], pvec[keep], det[keep]
    inv_det = 1.0 / det
    chunk = max(1, _CHUNK_PAIRS // max(len(v0), 1))
    for start in range(0, len(points), chunk):
        pts = points[start:start + chunk]
        tvec = pts[:, None, :] - v0[None, :, :]
        u = np.einsum("pmk,mk->pm", tvec, pvec) * inv_det
        qvec = np.cross(tvec, e1[None, :, :])
        v = (qvec @ d) * inv_det
        t = np.einsum("pmk,mk->pm", qvec, e2) * inv_det
        hits = (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
        inside[start:start + chunk] = (hits.sum(axis=1) % 2) == 1
    return inside


def voxelize_mesh(mesh: TriangleMesh, resolution: float) -> NDArray[np.int64]:
    """World-lattice voxels whose centers lie inside the closed mesh"""
    lo, hi = mesh.bounds()
    i_lo = np.floor(lo / resolution).astype(np.int64)
    i_hi = np.floor(hi / resolution).astype(np.int64)
    axes = [np.arange(a, b + 1) for a, b in zip(i_lo, i_hi)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    centers = (grid + 0.5) * resolution
    return grid[points_inside_mesh(mesh, centers)]


def box_mesh(lo: Iterable[float], hi: Iterable[float]) -> TriangleMesh:
    """Closed, outward-wound axis-aligned box"""
    (x0, y0, z0), (x1, y1, z1) = lo, hi
    vertices = np.array([
        [x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
        [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1],
    ], dtype=np.float64)
    faces = np.array([
        [0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7],
        [0, 1, 5], [0, 5, 4], [2, 3, 7], [2, 7, 6],
        [1, 2, 6], [1, 6, 5], [0, 4, 7], [0, 7, 3],
    ])
    return TriangleMesh(vertices, faces)


def uv_sphere_mesh(center: Iterable[float], radius: float, n_lat: int = 24, n_lon: int = 48) -> TriangleMesh:
    """Closed latitude/longitude sphere"""
    center = np.asarray(center, dtype=np.float64)
    vertices = [center + [0.0, 0.0, radius]]
    for i in range(1, n_lat):
        polar = np.pi * i / n_lat
        for j in range(n_lon):
            az = 2 * np.pi * j / n_lon
            vertices.append(center + radius * np.array(
                [np.sin(polar) * np.cos(az), np.sin(polar) * np.sin(az), np.cos(polar)]))
    vertices.append(center + [0.0, 0.0, -radius])
    south = len(vertices) - 1

    def ring(i, j):
        return 1 + (i - 1) * n_lon + (j % n_lon)

    faces = []
    for j in range(n_lon):
        faces.append([0, ring(1, j), ring(1, j + 1)])
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append([a, c, d])
            faces.append([a, d, b])
    for j in range(n_lon):
        faces.append([south, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)])
    return TriangleMesh(np.array(vertices), np.array(faces))


def cylinder_shell_mesh(radius: float, h_min: float, h_max: float, n_theta: int = 72) -> TriangleMesh:
    """Open lateral surface of a z-axis cylinder (skin stand-in)"""
    vertices = []
    for h in (h_min, h_max):
        for j in range(n_theta):
            az = 2 * np.pi * j / n_theta
            vertices.append([radius * np.cos(az), radius * np.sin(az), h])
    faces = []
    for j in range(n_theta):
        a, b = j, (j + 1) % n_theta
        faces.append([a, b, b + n_theta])
        faces.append([a, b + n_theta, a + n_theta])
    return TriangleMesh(np.array(vertices), np.array(faces))
