"""
Vector and rotation math, the cylindrical probe frame, voxel grids and skin projection
"""

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from errors import DegenerateInput, NoContact
from mesh_tools import TriangleMesh, ray_triangle_distances

Vec3 = NDArray[np.float64]
VoxelIndex = Tuple[int, int, int]

ORTHONORMAL_TOL = 1e-9


def as_vec3(value: Iterable[float]) -> Vec3:
    """Convert to a finite float64 3-vector"""
    vec = np.asarray(value, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(vec)):
        raise ValueError(f"non-finite vector component: {vec}")
    return vec


def unit(value: Iterable[float]) -> Vec3:
    vec = as_vec3(value)
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        raise DegenerateInput("cannot normalize a zero vector")
    return vec / norm


def rot_x(deg: float) -> NDArray[np.float64]:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_z(deg: float) -> NDArray[np.float64]:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def nearest_rotation(matrix: NDArray[np.float64]) -> NDArray[np.float64]:
    """Closest proper rotation to a 3x3 matrix (polar decomposition)"""
    u, _, vt = np.linalg.svd(matrix)
    rot = u @ vt
    if np.linalg.det(rot) < 0:
        u[:, -1] *= -1.0
        rot = u @ vt
    return rot


@dataclass(frozen=True, eq=False)
class Pose:
    """
    Probe pose. Orientation columns are the footprint long axis, the
    footprint short axis and the probe centerline (pointing into the body).
    """
    position: Vec3
    orientation: NDArray[np.float64]

    def __post_init__(self):
        object.__setattr__(self, "position", as_vec3(self.position))
        rot = np.asarray(self.orientation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(rot.T @ rot, np.eye(3), atol=ORTHONORMAL_TOL * 10):
            raise ValueError("pose orientation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > ORTHONORMAL_TOL * 10:
            raise ValueError("pose orientation is not a proper rotation")
        object.__setattr__(self, "orientation", rot)

    @property
    def long_axis(self) -> Vec3:
        return self.orientation[:, 0]

    @property
    def short_axis(self) -> Vec3:
        return self.orientation[:, 1]

    @property
    def centerline(self) -> Vec3:
        return self.orientation[:, 2]


@dataclass(frozen=True, eq=False)
class CylinderFrame:
    """Bounding cylinder that parameterizes probe translation as (h, theta)"""
    origin: Vec3
    axis: Vec3
    radius: float
    h_min: float
    h_max: float

    def __post_init__(self):
        object.__setattr__(self, "origin", as_vec3(self.origin))
        axis = as_vec3(self.axis)
        if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise ValueError("cylinder axis must be unit-norm")
        object.__setattr__(self, "axis", axis)
        if not self.radius > 0:
            raise ValueError(f"cylinder radius must be positive, got {self.radius}")
        if not self.h_min < self.h_max:
            raise ValueError(f"h_min ({self.h_min}) must be below h_max ({self.h_max})")

    @cached_property
    def basis(self) -> Tuple[Vec3, Vec3]:
        """Unit vectors (e1, e2) spanning the plane normal to the axis; theta=0 is e1"""
        ref = np.array([1.0, 0.0, 0.0])
        if abs(self.axis @ ref) > 0.9:
            ref = np.array([0.0, 1.0, 0.0])
        e1 = ref - (ref @ self.axis) * self.axis
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(self.axis, e1)
        return e1, e2

    def radial(self, theta: float) -> Vec3:
        e1, e2 = self.basis
        t = math.radians(theta)
        return math.cos(t) * e1 + math.sin(t) * e2

    def clamp_h(self, h: float) -> float:
        return min(max(h, self.h_min), self.h_max)


def canonical_theta(theta: float) -> float:
    t = theta % 360.0
    return 0.0 if t >= 360.0 else t


def cyl_to_cartesian(frame: CylinderFrame, h: float, theta: float, r: float) -> Vec3:
    return frame.origin + h * frame.axis + r * frame.radial(theta)


def cartesian_to_cyl(frame: CylinderFrame, p: Iterable[float]) -> Tuple[float, float, float]:
    """Inverse of cyl_to_cartesian; theta canonicalized to [0, 360)"""
    rel = as_vec3(p) - frame.origin
    h = float(rel @ frame.axis)
    e1, e2 = frame.basis
    x, y = float(rel @ e1), float(rel @ e2)
    r = math.hypot(x, y)
    theta = canonical_theta(math.degrees(math.atan2(y, x)))
    return h, theta, r


# Minimum enclosing circle (Welzl style, iterative form)

_IN_CIRCLE_EPS = 1 + 1e-14


def _in_circle(c: Optional[Tuple[float, float, float]], p: Sequence[float]) -> bool:
    return c is not None and math.hypot(p[0] - c[0], p[1] - c[1]) <= c[2] * _IN_CIRCLE_EPS


def _diameter_circle(a, b) -> Tuple[float, float, float]:
    cx, cy = (a[0] + b[0]) / 2, (a[1] + b[1]) / 2
    return cx, cy, max(math.hypot(cx - a[0], cy - a[1]), math.hypot(cx - b[0], cy - b[1]))


def _circumcircle(a, b, c) -> Optional[Tuple[float, float, float]]:
    ox = (min(a[0], b[0], c[0]) + max(a[0], b[0], c[0])) / 2
    oy = (min(a[1], b[1], c[1]) + max(a[1], b[1], c[1])) / 2
    ax, ay = a[0] - ox, a[1] - oy
    bx, by = b[0] - ox, b[1] - oy
    cx, cy = c[0] - ox, c[1] - oy
    d = (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by)) * 2.0
    if d == 0.0:
        return None
    x = ox + ((ax * ax + ay * ay) * (by - cy) + (bx * bx + by * by) * (cy - ay)
              + (cx * cx + cy * cy) * (ay - by)) / d
    y = oy + ((ax * ax + ay * ay) * (cx - bx) + (bx * bx + by * by) * (ax - cx)
              + (cx * cx + cy * cy) * (bx - ax)) / d
    radius = max(math.hypot(x - a[0], y - a[1]), math.hypot(x - b[0], y - b[1]),
                 math.hypot(x - c[0], y - c[1]))
    return x, y, radius


def _cross(x0, y0, x1, y1, x2, y2) -> float:
    return (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)


def _circle_two_points(points, p, q) -> Tuple[float, float, float]:
    circ = _diameter_circle(p, q)
    left = right = None
    for r in points:
        if _in_circle(circ, r):
            continue
        cross = _cross(p[0], p[1], q[0], q[1], r[0], r[1])
        c = _circumcircle(p, q, r)
        if c is None:
            continue
        side = _cross(p[0], p[1], q[0], q[1], c[0], c[1])
        if cross > 0.0 and (left is None or side > _cross(p[0], p[1], q[0], q[1], left[0], left[1])):
            left = c
        elif cross < 0.0 and (right is None or side < _cross(p[0], p[1], q[0], q[1], right[0], right[1])):
            right = c
    if left is None and right is None:
        return circ
    if left is None:
        return right
    if right is None:
        return left
    return left if left[2] <= right[2] else right


def _circle_one_point(points, p) -> Tuple[float, float, float]:
    c = (p[0], p[1], 0.0)
    for i, q in enumerate(points):
        if not _in_circle(c, q):
            if c[2] == 0.0:
                c = _diameter_circle(p, q)
            else:
                c = _circle_two_points(points[: i + 1], p, q)
    return c


def min_enclosing_circle(points_2d: NDArray[np.float64], seed: int = 0) -> Tuple[float, float, float]:
    """Smallest circle (cx, cy, r) enclosing the 2D points; deterministic for a fixed seed"""
    order = np.random.default_rng(seed).permutation(len(points_2d))
    shuffled = [(float(points_2d[i, 0]), float(points_2d[i, 1])) for i in order]
    c = None
    for i, p in enumerate(shuffled):
        if c is None or not _in_circle(c, p):
            c = _circle_one_point(shuffled[: i + 1], p)
    return c


def fit_bounding_cylinder(rib_points: Sequence[Iterable[float]],
                          axis: Iterable[float] = (0.0, 0.0, 1.0)) -> CylinderFrame:
    """Minimum bounding cylinder of a point cloud around a fixed axis direction"""
    pts = np.asarray(rib_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3:
        raise DegenerateInput(f"need at least 3 points, got {len(pts)}")
    axis = unit(axis)
    probe = CylinderFrame(np.zeros(3), axis, 1.0, 0.0, 1.0)
    e1, e2 = probe.basis
    planar = np.stack([pts @ e1, pts @ e2], axis=1)
    if np.ptp(planar[:, 0]) < 1e-12 and np.ptp(planar[:, 1]) < 1e-12:
        raise DegenerateInput("all points are collinear with the cylinder axis")
    cx, cy, radius = min_enclosing_circle(planar)
    heights = pts @ axis
    origin = cx * e1 + cy * e2
    h_min, h_max = float(heights.min()), float(heights.max())
    if h_max <= h_min:
        h_max = h_min + 1e-6
    return CylinderFrame(origin, axis, float(radius), h_min, h_max)


# Skin surfaces

class SkinSurface(ABC):
    """Skin reachable by a radial inward search from the cylinder surface"""

    @abstractmethod
    def intersect_radial(self, frame: CylinderFrame, h: float, theta: float) -> Optional[Tuple[Vec3, Vec3]]:
        """First skin hit moving inward from radius R_c, as (contact, outward unit normal)"""

    @abstractmethod
    def sample_points(self) -> NDArray[np.float64]:
        """Representative points on the skin (used when fitting the frame)"""

    @abstractmethod
    def transformed(self, matrix: NDArray[np.float64], translation: Vec3,
                    native_frame: CylinderFrame, new_frame: CylinderFrame) -> "SkinSurface":
        """Skin under an affine map x -> M x + t"""


@dataclass(eq=False)
class HeightFieldSkin(SkinSurface):
    """
    Radial height field r(h, theta) sampled on a regular grid: rows over
    h in [h_start, h_start + (n_h - 1) * h_step], columns over theta in
    [0, 360) with periodic wrap. Bilinear in between, clamped in h.
    """
    h_start: float
    h_step: float
    radii: NDArray[np.float64]
    origin: Vec3 = field(default_factory=lambda: np.zeros(3))
    axis: Vec3 = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        self.radii = np.atleast_2d(np.asarray(self.radii, dtype=np.float64))
        if np.any(self.radii < 0):
            raise ValueError("height field radii must be non-negative")
        if self.h_step <= 0:
            raise ValueError("h_step must be positive")
        self.origin = as_vec3(self.origin)
        self.axis = unit(self.axis)

    @classmethod
    def constant(cls, radius: float, h_min: float, h_max: float,
                 origin=(0.0, 0.0, 0.0), axis=(0.0, 0.0, 1.0)) -> "HeightFieldSkin":
        return cls(h_start=h_min, h_step=max(h_max - h_min, 1e-6),
                   radii=np.full((2, 1), float(radius)), origin=as_vec3(origin), axis=unit(axis))

    @property
    def n_theta(self) -> int:
        return self.radii.shape[1]

    def _local_frame(self, frame: CylinderFrame) -> CylinderFrame:
        return CylinderFrame(self.origin, self.axis, frame.radius, frame.h_min, frame.h_max)

    def radius_and_gradient(self, h: float, theta: float) -> Tuple[float, float, float]:
        """r, dr/dh and dr/dtheta (per radian) at (h, theta)"""
        n_h = self.radii.shape[0]
        fh = (h - self.h_start) / self.h_step
        dh_scale = 1.0 / self.h_step
        if fh <= 0.0:
            fh, dh_scale = 0.0, 0.0
        elif fh >= n_h - 1:
            fh, dh_scale = float(n_h - 1), 0.0
        i0 = min(int(math.floor(fh)), n_h - 2) if n_h > 1 else 0
        i1 = min(i0 + 1, n_h - 1)
        t = fh - i0

        step_deg = 360.0 / self.n_theta
        ft = canonical_theta(theta) / step_deg
        j0 = int(math.floor(ft)) % self.n_theta
        j1 = (j0 + 1) % self.n_theta
        s = ft - math.floor(ft)

        r00, r01 = self.radii[i0, j0], self.radii[i0, j1]
        r10, r11 = self.radii[i1, j0], self.radii[i1, j1]
        r = (1 - t) * (1 - s) * r00 + (1 - t) * s * r01 + t * (1 - s) * r10 + t * s * r11
        dr_dt = (1 - s) * (r10 - r00) + s * (r11 - r01)
        dr_ds = (1 - t) * (r01 - r00) + t * (r11 - r10)
        return float(r), float(dr_dt * dh_scale), float(dr_ds / math.radians(step_deg))

    def intersect_radial(self, frame: CylinderFrame, h: float, theta: float) -> Optional[Tuple[Vec3, Vec3]]:
        local = self._local_frame(frame)
        # the skin shares the probe frame's axis; only an axial origin shift is allowed
        h = h + float((frame.origin - self.origin) @ self.axis)
        r, dr_dh, dr_dtheta = self.radius_and_gradient(h, theta)
        if r > frame.radius + 1e-9 or r < 0.0:
            return None
        u = local.radial(theta)
        du = local.radial(theta + 90.0)
        contact = cyl_to_cartesian(local, h, theta, r)
        d_theta = dr_dtheta * u + r * du
        d_h = local.axis + dr_dh * u
        normal = np.cross(d_theta, d_h)
        norm = np.linalg.norm(normal)
        if norm == 0.0:
            return None
        normal /= norm
        if normal @ u < 0:
            normal = -normal
        return contact, normal

    def sample_points(self) -> NDArray[np.float64]:
        local = CylinderFrame(self.origin, self.axis, 1.0, 0.0, 1.0)
        pts = []
        n_h = self.radii.shape[0]
        n_theta = max(self.n_theta, 36)
        for i in range(n_h):
            h = self.h_start + i * self.h_step
            for j in range(n_theta):
                theta = 360.0 * j / n_theta
                r, _, _ = self.radius_and_gradient(h, theta)
                pts.append(cyl_to_cartesian(local, h, theta, r))
        return np.asarray(pts)

    def transformed(self, matrix, translation, native_frame, new_frame) -> "HeightFieldSkin":
        # The maps used here scale radius and height about the frame axis,
        # so the field keeps its shape on the new frame
        e1, _ = native_frame.basis
        radial_scale = float(e1 @ matrix @ e1)
        axial_scale = float(native_frame.axis @ matrix @ native_frame.axis)
        new_origin = matrix @ self.origin + translation
        h_shift = float((new_origin - new_frame.origin) @ new_frame.axis)
        return HeightFieldSkin(
            h_start=self.h_start * axial_scale + h_shift,
            h_step=self.h_step * axial_scale,
            radii=self.radii * radial_scale,
            origin=new_frame.origin,
            axis=new_frame.axis,
        )


@dataclass(eq=False)
class MeshSkin(SkinSurface):
    """Skin given as a triangle mesh"""
    mesh: TriangleMesh

    def intersect_radial(self, frame: CylinderFrame, h: float, theta: float) -> Optional[Tuple[Vec3, Vec3]]:
        u = frame.radial(theta)
        start = cyl_to_cartesian(frame, h, theta, frame.radius)
        dist = ray_triangle_distances(self.mesh, start, -u)
        valid = np.isfinite(dist) & (dist >= -1e-9) & (dist <= frame.radius + 1e-9)
        if not np.any(valid):
            return None
        best = float(np.min(dist[valid]))
        hit_faces = np.nonzero(valid & (np.abs(dist - best) <= 1e-9))[0]
        # cross products are area-weighted face normals
        normal = self.mesh.face_cross_products()[hit_faces].sum(axis=0)
        norm = np.linalg.norm(normal)
        if norm == 0.0:
            return None
        normal = normal / norm
        if normal @ u < 0:
            normal = -normal
        return start - best * u, normal

    def sample_points(self) -> NDArray[np.float64]:
        return self.mesh.vertices.copy()

    def transformed(self, matrix, translation, native_frame, new_frame) -> "MeshSkin":
        return MeshSkin(self.mesh.transformed(matrix, translation))


def project_to_skin(frame: CylinderFrame, h: float, theta: float, skin: SkinSurface) -> Tuple[Vec3, Vec3]:
    """Contact point and outward normal below the cylinder point (h, theta)"""
    hit = skin.intersect_radial(frame, h, theta)
    if hit is None:
        raise NoContact(f"no skin intersection below h={h:.2f} theta={theta:.2f}")
    return hit


def probe_pose(contact: Iterable[float], frame: CylinderFrame, phi: float, psi: float) -> Pose:
    """
    Probe pose at a skin contact. The base orientation has the long axis
    along the cylinder axis and the centerline pointing radially inward;
    phi rotates about the centerline, then psi tilts about the rotated long
    axis: R = R_base @ rot_z(phi) @ rot_x(psi).
    """
    contact = as_vec3(contact)
    rel = contact - frame.origin
    radial = rel - (rel @ frame.axis) * frame.axis
    norm = np.linalg.norm(radial)
    if norm < 1e-12:
        raise DegenerateInput("contact lies on the cylinder axis")
    u = radial / norm
    centerline = -u
    long_axis = frame.axis
    short_axis = np.cross(centerline, long_axis)
    base = np.column_stack([long_axis, short_axis, centerline])
    return Pose(contact, base @ rot_z(phi) @ rot_x(psi))


def centerline_surface_angle(pose: Pose, normal: Iterable[float]) -> float:
    """Angle in degrees between the probe centerline and the skin normal, in [0, 90]"""
    cos_angle = abs(float(pose.centerline @ unit(normal)))
    return math.degrees(math.acos(min(1.0, cos_angle)))


# Voxel grids

@dataclass(eq=False)
class VoxelGrid:
    """
    Three binary channels on a regular lattice: 0 target, 1 bone,
    2 insonified. Data layout is (channel, nx, ny, nz).
    """
    origin: Vec3
    resolution: float = 4.0
    dims: Tuple[int, int, int] = (30, 30, 30)
    data: Optional[NDArray[np.uint8]] = None

    def __post_init__(self):
        self.origin = as_vec3(self.origin)
        if not self.resolution > 0:
            raise ValueError("grid resolution must be positive")
        self.dims = tuple(int(d) for d in self.dims)
        if self.data is None:
            self.data = np.zeros((3,) + self.dims, dtype=np.uint8)
        elif self.data.shape != (3,) + self.dims:
            raise ValueError(f"grid data shape {self.data.shape} does not match dims {self.dims}")

    @property
    def target(self) -> NDArray[np.uint8]:
        return self.data[0]

    @property
    def bone(self) -> NDArray[np.uint8]:
        return self.data[1]

    @property
    def insonified(self) -> NDArray[np.uint8]:
        return self.data[2]

    @property
    def extent(self) -> Vec3:
        return np.asarray(self.dims, dtype=np.float64) * self.resolution

    def contains_index(self, idx: Sequence[int]) -> bool:
        return all(0 <= int(i) < d for i, d in zip(idx, self.dims))

    def voxel_center(self, idx: Sequence[int]) -> Vec3:
        return self.origin + (np.asarray(idx, dtype=np.float64) + 0.5) * self.resolution

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.origin.copy(), self.resolution, self.dims, self.data.copy())

    def channel_sums(self) -> Tuple[int, int, int]:
        return tuple(int(self.data[c].sum()) for c in range(3))


def world_to_voxel(grid: VoxelGrid, p: Iterable[float]) -> Optional[VoxelIndex]:
    """Voxel index containing p, or None when p lies outside the grid"""
    rel = (as_vec3(p) - grid.origin) / grid.resolution
    idx = tuple(int(math.floor(v)) for v in rel)
    return idx if grid.contains_index(idx) else None


def lattice_index(points: NDArray[np.float64], resolution: float) -> NDArray[np.int64]:
    """World-lattice voxel indices (lattice anchored at the world origin)"""
    return np.floor(np.asarray(points, dtype=np.float64) / resolution).astype(np.int64)


def lattice_center(indices: NDArray[np.int64], resolution: float) -> NDArray[np.float64]:
    return (np.asarray(indices, dtype=np.float64) + 0.5) * resolution
