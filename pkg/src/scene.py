"""
Scenario construction: rib cages, targets, size normalization and static voxel channels
"""

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Any, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage
from scipy.spatial.transform import Rotation

from errors import InvalidParams, SceneFormatError, TargetOutsideGrid, PlacementFailed
from geometry import (CylinderFrame, HeightFieldSkin, MeshSkin, Pose, SkinSurface, VoxelGrid,
                      cartesian_to_cyl, cyl_to_cartesian, fit_bounding_cylinder, lattice_center,
                      nearest_rotation)
from mesh_tools import (TriangleMesh, parse_ascii_mesh, points_inside_mesh, require_watertight)
from retry_strategies import RejectedSample, RetryManager

SMALL_MAX_CM3 = 4.0
MEDIUM_MAX_CM3 = 13.5


class SizeClass(str, Enum):
    """Target size classes by volume"""
    S = "S"
    M = "M"
    L = "L"


def classify_target_size(volume: float) -> SizeClass:
    """S below 4 cm3, M from 4 to 13.5 cm3 inclusive, L above"""
    if not volume > 0:
        raise ValueError(f"target volume must be positive, got {volume}")
    if volume < SMALL_MAX_CM3:
        return SizeClass.S
    if volume <= MEDIUM_MAX_CM3:
        return SizeClass.M
    return SizeClass.L


# Affine maps and solids

@dataclass(frozen=True, eq=False)
class AffineMap:
    """x -> matrix @ x + translation"""
    matrix: NDArray[np.float64] = field(default_factory=lambda: np.eye(3))
    translation: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        if abs(np.linalg.det(matrix)) < 1e-12:
            raise ValueError("affine map must be invertible")
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    def apply(self, points: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.asarray(points, dtype=np.float64) @ self.matrix.T + self.translation

    def inverse(self) -> "AffineMap":
        inv = np.linalg.inv(self.matrix)
        return AffineMap(inv, -inv @ self.translation)

    def then(self, other: "AffineMap") -> "AffineMap":
        """Composition: apply self first, then other"""
        return AffineMap(other.matrix @ self.matrix, other.matrix @ self.translation + other.translation)

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.matrix, np.eye(3)) and not np.any(self.translation))


class Solid(ABC):
    """A closed region of space in mm"""

    @abstractmethod
    def contains(self, points: NDArray[np.float64]) -> NDArray[np.bool_]:
        ...

    @abstractmethod
    def bounds(self) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
        ...


@dataclass(eq=False)
class RibCageSolid(Solid):
    """Ribs as tubes of constant radius swept along circles around the body axis"""
    origin: NDArray[np.float64]
    axis: NDArray[np.float64]
    centerline_radius: float
    tube_radius: float
    heights: NDArray[np.float64]
    arc_start: float = 0.0
    arc_span: float = 360.0

    def _frame(self) -> CylinderFrame:
        return CylinderFrame(self.origin, self.axis, self.centerline_radius, -1.0, 1.0)

    def contains(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        frame = self._frame()
        rel = pts - frame.origin
        h = rel @ frame.axis
        e1, e2 = frame.basis
        x, y = rel @ e1, rel @ e2
        r = np.hypot(x, y)
        dist2 = (r - self.centerline_radius)[:, None] ** 2 + (h[:, None] - self.heights[None, :]) ** 2
        inside = np.min(dist2, axis=1) <= self.tube_radius ** 2
        if self.arc_span < 360.0:
            theta = np.degrees(np.arctan2(y, x)) % 360.0
            inside &= ((theta - self.arc_start) % 360.0) <= self.arc_span
        return inside

    def bounds(self):
        reach = self.centerline_radius + self.tube_radius
        frame = self._frame()
        e1, e2 = frame.basis
        corners = []
        for h in (self.heights.min() - self.tube_radius, self.heights.max() + self.tube_radius):
            for a in (-reach, reach):
                for b in (-reach, reach):
                    corners.append(frame.origin + h * frame.axis + a * e1 + b * e2)
        corners = np.asarray(corners)
        return corners.min(axis=0), corners.max(axis=0)

    def surface_points(self, n_theta: int = 72) -> NDArray[np.float64]:
        frame = self._frame()
        pts = []
        for h in self.heights:
            for j in range(n_theta):
                theta = self.arc_start + self.arc_span * j / n_theta
                for dr, dh in ((self.tube_radius, 0.0), (-self.tube_radius, 0.0),
                               (0.0, self.tube_radius), (0.0, -self.tube_radius)):
                    pts.append(cyl_to_cartesian(frame, h + dh, theta, self.centerline_radius + dr))
        return np.asarray(pts)


@dataclass(eq=False)
class EllipsoidSolid(Solid):
    center: NDArray[np.float64]
    rotation: NDArray[np.float64]
    semi_axes: NDArray[np.float64]

    def contains(self, points):
        local = (np.asarray(points, dtype=np.float64).reshape(-1, 3) - self.center) @ self.rotation
        return np.sum((local / self.semi_axes) ** 2, axis=1) <= 1.0

    def bounds(self):
        # exact half-widths of a rotated ellipsoid's bounding box
        half = np.sqrt(((self.rotation * self.semi_axes) ** 2).sum(axis=1))
        return self.center - half, self.center + half


@dataclass(eq=False)
class MeshSolid(Solid):
    mesh: TriangleMesh

    def contains(self, points):
        return points_inside_mesh(self.mesh, points)

    def bounds(self):
        return self.mesh.bounds()


@dataclass(eq=False)
class TransformedSolid(Solid):
    """A solid moved by an affine map"""
    base: Solid
    affine: AffineMap

    def contains(self, points):
        return self.base.contains(self.affine.inverse().apply(points))

    def bounds(self):
        lo, hi = self.base.bounds()
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        moved = self.affine.apply(corners)
        return moved.min(axis=0), moved.max(axis=0)


def voxelize_solid(solid: Solid, resolution: float) -> NDArray[np.int64]:
    """World-lattice voxels whose centers lie inside the solid, sorted lexicographically"""
    lo, hi = solid.bounds()
    i_lo = np.floor(lo / resolution - 0.5).astype(np.int64)
    i_hi = np.ceil(hi / resolution - 0.5).astype(np.int64)
    axes = [np.arange(a, b + 1) for a, b in zip(i_lo, i_hi)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    inside = solid.contains(lattice_center(grid, resolution))
    return grid[inside]


def _voxel_keys(voxels: NDArray[np.int64]) -> set:
    return set(map(tuple, np.asarray(voxels, dtype=np.int64).tolist()))


def _remove_voxels(voxels: NDArray[np.int64], excluded: set) -> NDArray[np.int64]:
    if not excluded or len(voxels) == 0:
        return voxels
    keep = np.array([tuple(v) not in excluded for v in voxels.tolist()], dtype=bool)
    return voxels[keep]


# Anatomy and targets

@dataclass(eq=False)
class Anatomy:
    """Rib cage, skin and the cylinder frame they define"""
    bone_solid: Solid
    bone_voxels: NDArray[np.int64]
    skin: SkinSurface
    frame: CylinderFrame
    resolution: float
    bone_inner_radius: float
    bone_outer_radius: float
    bone_h_range: Tuple[float, float]
    scale_to_generic: AffineMap = field(default_factory=AffineMap)

    def bone_keys(self) -> set:
        return _voxel_keys(self.bone_voxels)


@dataclass(eq=False)
class Target:
    voxels: NDArray[np.int64]
    volume: float
    size_class: SizeClass
    id: int
    solid: Optional[Solid] = None

    @classmethod
    def from_voxels(cls, voxels: NDArray[np.int64], resolution: float, target_id: int,
                    solid: Optional[Solid] = None) -> "Target":
        voxels = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
        if len(voxels) == 0:
            raise RejectedSample("empty target")
        volume = len(voxels) * resolution ** 3 / 1000.0
        return cls(voxels, volume, classify_target_size(volume), target_id, solid)

    def centroid(self, resolution: float) -> NDArray[np.float64]:
        return lattice_center(self.voxels, resolution).mean(axis=0)


@dataclass
class RibCageParams:
    """Procedural rib cage; ribs fill h_extent when n_ribs is None"""
    n_ribs: Optional[int] = None
    rib_radius: float = 6.0
    gap: float = 20.0
    gaps: Optional[List[float]] = None
    centerline_radius: float = 150.0
    h_extent: float = 240.0
    arc_start: float = 0.0
    arc_span: float = 360.0
    skin_offset: float = 15.0
    skin_wobble: float = 0.0
    gap_jitter: float = 0.0

    def __post_init__(self):
        gaps = list(self.gaps) if self.gaps is not None else [self.gap]
        if self.rib_radius <= 0:
            raise InvalidParams(f"rib radius must be positive, got {self.rib_radius}")
        if min(gaps) <= 0:
            raise InvalidParams(f"intercostal gaps must be positive, got {gaps}")
        if self.n_ribs is not None and self.n_ribs < 2:
            raise InvalidParams(f"need at least 2 ribs, got {self.n_ribs}")
        if self.gaps is not None and self.n_ribs is not None and len(self.gaps) != self.n_ribs - 1:
            raise InvalidParams("gaps must list one value per pair of neighbouring ribs")
        if self.rib_radius >= self.centerline_radius:
            raise InvalidParams("rib radius must be below the rib centerline radius")
        if self.n_ribs is None and self.gaps is None and 4 * self.rib_radius + self.gap > self.h_extent:
            raise InvalidParams("h_extent cannot hold two ribs")
        if self.gap_jitter < 0 or 2 * self.gap_jitter >= min(gaps):
            raise InvalidParams("gap jitter must be non-negative and below half the narrowest gap")
        if self.skin_offset < 0 or self.skin_wobble < 0 or self.skin_wobble >= self.skin_offset + self.rib_radius:
            raise InvalidParams("skin must stay outside the ribs")
        if not 0 < self.arc_span <= 360:
            raise InvalidParams("arc span must lie in (0, 360]")

    def rib_gaps(self) -> List[float]:
        if self.gaps is not None:
            return list(self.gaps)
        if self.n_ribs is not None:
            return [self.gap] * (self.n_ribs - 1)
        pitch = 2 * self.rib_radius + self.gap
        count = int(math.floor((self.h_extent + self.gap) / pitch))
        return [self.gap] * (count - 1)


@dataclass
class VariantRanges:
    """Per-scenario ranges for randomized rib cage variants"""
    rib_radius: Tuple[float, float] = (5.0, 7.0)
    gap: Tuple[float, float] = (15.0, 30.0)
    centerline_radius: Tuple[float, float] = (130.0, 170.0)


@dataclass
class FixedTargetSpec:
    """A target placed under a chosen intercostal gap rather than at random"""
    gap_index: int = 0
    theta: float = 0.0
    depth: float = 20.0
    semi_axes: Tuple[float, float, float] = (8.0, 8.0, 8.0)


@dataclass
class ScenarioConfig:
    seed: int = 0
    ribcage: RibCageParams = field(default_factory=RibCageParams)
    variants: Optional[VariantRanges] = None
    bone_mesh: Optional[str] = None
    skin_mesh: Optional[str] = None
    target_meshes: List[str] = field(default_factory=list)
    n_targets: int = 1
    randomize_target_count: bool = False
    size_classes: List[str] = field(default_factory=lambda: ["S", "M", "L"])
    fixed_target: Optional[FixedTargetSpec] = None
    semi_axis_range: Tuple[float, float] = (8.0, 20.0)
    max_target_depth: float = 50.0
    cluster_radius: float = 25.0
    grid_extent: float = 120.0
    resolution: float = 4.0
    generic_radius: Optional[float] = 150.0
    start_rule: str = "random"
    start_pose: Optional[List[float]] = None

    def __post_init__(self):
        if not 1 <= self.n_targets <= 3:
            raise InvalidParams(f"n_targets must be 1..3, got {self.n_targets}")
        if self.resolution <= 0:
            raise InvalidParams("resolution must be positive")
        ratio = self.grid_extent / self.resolution
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 2:
            raise InvalidParams("grid extent must be a multiple of the resolution")
        if not self.size_classes or any(c not in SizeClass.__members__ for c in self.size_classes):
            raise InvalidParams(f"size classes must be drawn from S, M, L: {self.size_classes}")
        lo, hi = self.semi_axis_range
        if not 0 < lo <= hi:
            raise InvalidParams("semi-axis range must be positive and ordered")
        if self.start_rule not in ("random", "fixed", "above_target"):
            raise InvalidParams(f"unknown start rule {self.start_rule}")
        if self.start_rule == "fixed" and (self.start_pose is None or len(self.start_pose) != 4):
            raise InvalidParams("fixed start rule needs start_pose [h, theta, phi, psi]")

    @property
    def grid_dims(self) -> Tuple[int, int, int]:
        n = int(round(self.grid_extent / self.resolution))
        return (n, n, n)


@dataclass(eq=False)
class Scenario:
    """One episode's world: normalized anatomy, targets and static channels"""
    config: ScenarioConfig
    seed: int
    anatomy: Anatomy
    targets: List[Target]
    grid: VoxelGrid

    @property
    def target_voxel_count(self) -> int:
        return int(self.grid.target.sum())


# Rib cages

def _skin_height_field(frame_origin, axis, params: RibCageParams, h_lo: float, h_hi: float,
                       rng: np.random.Generator, resolution: float) -> HeightFieldSkin:
    base = params.centerline_radius + params.rib_radius + params.skin_offset
    n_h = max(2, int(math.ceil((h_hi - h_lo) / resolution)) + 1)
    h_step = (h_hi - h_lo) / (n_h - 1)
    n_theta = 72
    theta = np.radians(np.arange(n_theta) * 360.0 / n_theta)
    phase = rng.uniform(0, 2 * np.pi)
    row = base + params.skin_wobble * np.cos(2 * theta + phase)
    return HeightFieldSkin(h_start=h_lo, h_step=h_step, radii=np.tile(row, (n_h, 1)),
                           origin=frame_origin, axis=axis)


def generate_procedural_ribcage(params: RibCageParams, seed: int, resolution: float = 4.0) -> Anatomy:
    """Rib tubes at regular heights on a cylinder, with a height-field skin outside them"""
    rng = np.random.default_rng(seed)
    gaps = params.rib_gaps()
    pitch = [2 * params.rib_radius + g for g in gaps]
    heights = np.concatenate([[0.0], np.cumsum(pitch)])
    heights -= heights.mean()
    if params.gap_jitter > 0:
        heights = heights + rng.uniform(-params.gap_jitter, params.gap_jitter, size=len(heights))

    axis = np.array([0.0, 0.0, 1.0])
    ribs = RibCageSolid(np.zeros(3), axis, params.centerline_radius, params.rib_radius,
                        heights, params.arc_start, params.arc_span)
    h_lo = float(heights.min() - params.rib_radius - 20.0)
    h_hi = float(heights.max() + params.rib_radius + 20.0)
    skin = _skin_height_field(np.zeros(3), axis, params, h_lo, h_hi, rng, resolution)

    frame = fit_bounding_cylinder(np.concatenate([ribs.surface_points(), skin.sample_points()]), axis)
    skin = replace(skin, origin=frame.origin)
    return Anatomy(
        bone_solid=ribs,
        bone_voxels=voxelize_solid(ribs, resolution),
        skin=skin,
        frame=frame,
        resolution=resolution,
        bone_inner_radius=params.centerline_radius - params.rib_radius,
        bone_outer_radius=params.centerline_radius + params.rib_radius,
        bone_h_range=(float(heights.min() - params.rib_radius), float(heights.max() + params.rib_radius)),
    )


def bone_component_count(anatomy: Anatomy) -> int:
    """Number of 26-connected bone components"""
    if len(anatomy.bone_voxels) == 0:
        return 0
    lo = anatomy.bone_voxels.min(axis=0)
    shape = tuple(anatomy.bone_voxels.max(axis=0) - lo + 1)
    volume = np.zeros(shape, dtype=np.uint8)
    rel = anatomy.bone_voxels - lo
    volume[rel[:, 0], rel[:, 1], rel[:, 2]] = 1
    _, count = ndimage.label(volume, structure=np.ones((3, 3, 3)))
    return int(count)


def _radial_stats(frame: CylinderFrame, points: NDArray[np.float64]) -> Tuple[NDArray, NDArray]:
    rel = points - frame.origin
    h = rel @ frame.axis
    r = np.linalg.norm(rel - h[:, None] * frame.axis, axis=1)
    return h, r


@lru_cache(maxsize=8)
def _load_meshes_cached(bone_path: str, skin_path: str, target_paths: Tuple[str, ...]):
    bone = parse_ascii_mesh(bone_path)
    skin = parse_ascii_mesh(skin_path)
    targets = []
    for path in target_paths:
        mesh = parse_ascii_mesh(path)
        require_watertight(mesh, path)
        targets.append(mesh)
    return bone, skin, targets


def load_segmented_meshes(bone_path: Union[str, Path], skin_path: Union[str, Path],
                          target_paths: Sequence[Union[str, Path]], resolution: float = 4.0,
                          axis=(0.0, 0.0, 1.0)) -> Tuple[Anatomy, List[Target]]:
    """Voxelize segmented bone, skin and target meshes by the voxel-center-in-solid rule"""
    bone_mesh, skin_mesh, target_meshes = _load_meshes_cached(
        str(bone_path), str(skin_path), tuple(str(p) for p in target_paths))
    bone_solid = MeshSolid(bone_mesh)
    bone_voxels = voxelize_solid(bone_solid, resolution)
    frame = fit_bounding_cylinder(np.concatenate([bone_mesh.vertices, skin_mesh.vertices]), axis)

    bone_centers = lattice_center(bone_voxels, resolution) if len(bone_voxels) else bone_mesh.vertices
    h, r = _radial_stats(frame, bone_centers)
    anatomy = Anatomy(
        bone_solid=bone_solid,
        bone_voxels=bone_voxels,
        skin=MeshSkin(skin_mesh),
        frame=frame,
        resolution=resolution,
        # the spine and sternum pull the minimum inward; a low percentile tracks the rib layer
        bone_inner_radius=float(np.percentile(r, 10)),
        bone_outer_radius=float(r.max()),
        bone_h_range=(float(h.min()), float(h.max())),
    )
    bone_keys = anatomy.bone_keys()
    targets = []
    for target_id, mesh in enumerate(target_meshes):
        solid = MeshSolid(mesh)
        voxels = _remove_voxels(voxelize_solid(solid, resolution), bone_keys)
        targets.append(Target.from_voxels(voxels, resolution, target_id, solid))
    return anatomy, targets


# Targets

def _fits_grid(voxels: NDArray[np.int64], dims: Tuple[int, int, int]) -> bool:
    center = lattice_center(voxels, 1.0).mean(axis=0)
    origin_index = np.round(center).astype(np.int64) - np.asarray(dims) // 2
    rel = voxels - origin_index
    return bool(np.all(rel >= 0) and np.all(rel < np.asarray(dims)))


def _check_target(anatomy: Anatomy, target: Target, placed: Sequence[Target],
                  bone_keys: set, dims: Tuple[int, int, int]) -> None:
    keys = _voxel_keys(target.voxels)
    if keys & bone_keys:
        raise RejectedSample("bone overlap")
    for other in placed:
        if keys & _voxel_keys(other.voxels):
            raise RejectedSample("target overlap")
    _, r = _radial_stats(anatomy.frame, lattice_center(target.voxels, anatomy.resolution))
    if np.any(r >= anatomy.bone_inner_radius):
        raise RejectedSample("target not beneath the ribs")
    union = np.concatenate([t.voxels for t in placed] + [target.voxels])
    if not _fits_grid(union, dims):
        raise RejectedSample("targets do not fit the state grid")


def make_ellipsoid_target(anatomy: Anatomy, center, semi_axes, rotation, target_id: int) -> Target:
    solid = EllipsoidSolid(np.asarray(center, dtype=np.float64), np.asarray(rotation, dtype=np.float64),
                           np.asarray(semi_axes, dtype=np.float64))
    return Target.from_voxels(voxelize_solid(solid, anatomy.resolution), anatomy.resolution, target_id, solid)


def place_target_at(anatomy: Anatomy, center, semi_axes, rotation=None, target_id: int = 0,
                    dims: Tuple[int, int, int] = (30, 30, 30)) -> Optional[Target]:
    """Target at a fixed position, or None when the position is infeasible"""
    rotation = np.eye(3) if rotation is None else rotation
    try:
        target = make_ellipsoid_target(anatomy, center, semi_axes, rotation, target_id)
        _check_target(anatomy, target, [], anatomy.bone_keys(), dims)
    except RejectedSample:
        return None
    return target


def _sample_target(anatomy: Anatomy, config: ScenarioConfig, rng: np.random.Generator,
                   target_id: int, placed: Sequence[Target], bone_keys: set) -> Target:
    lo, hi = config.semi_axis_range
    semi = rng.uniform(lo, hi, size=3)
    reach = float(semi.max())
    frame = anatomy.frame
    if placed:
        anchor = placed[0].centroid(anatomy.resolution)
        h0, theta0, r0 = cartesian_to_cyl(frame, anchor)
        c = config.cluster_radius
        h = h0 + rng.uniform(-c, c)
        theta = theta0 + math.degrees(rng.uniform(-c, c) / max(r0, 1.0))
        r = r0 + rng.uniform(-c, c)
    else:
        h_lo, h_hi = anatomy.bone_h_range
        h = rng.uniform(h_lo + reach, max(h_lo + reach, h_hi - reach))
        arc_start, arc_span = 0.0, 360.0
        if isinstance(anatomy.bone_solid, RibCageSolid):
            arc_start, arc_span = anatomy.bone_solid.arc_start, anatomy.bone_solid.arc_span
        theta = arc_start + rng.uniform(0.0, arc_span)
        r = anatomy.bone_inner_radius - anatomy.resolution - reach - rng.uniform(0.0, config.max_target_depth)
    if r <= reach:
        raise RejectedSample("target too deep")
    center = cyl_to_cartesian(frame, h, theta, r)
    rotation = Rotation.random(random_state=rng).as_matrix()
    target = make_ellipsoid_target(anatomy, center, semi, rotation, target_id)
    if target.size_class.value not in config.size_classes:
        raise RejectedSample(f"size class {target.size_class.value} not allowed")
    _check_target(anatomy, target, placed, bone_keys, config.grid_dims)
    return target


def place_targets(anatomy: Anatomy, config: ScenarioConfig, rng: np.random.Generator,
                  retry_manager: Optional[RetryManager] = None) -> List[Target]:
    """Randomly rotated and scaled ellipsoids beneath the ribs, one RNG stream per target"""
    retry_manager = retry_manager or RetryManager()
    n = int(rng.integers(1, config.n_targets + 1)) if config.randomize_target_count else config.n_targets
    streams = rng.spawn(n)
    bone_keys = anatomy.bone_keys()
    placed: List[Target] = []
    for target_id, stream in enumerate(streams):
        target = retry_manager.retry(
            'target_placement',
            lambda: _sample_target(anatomy, config, stream, target_id, placed, bone_keys),
            exhausted_error=PlacementFailed,
        )
        placed.append(target)
    return placed


def place_fixed_target(anatomy: Anatomy, spec: FixedTargetSpec, dims=(30, 30, 30)) -> Target:
    """Target centered under an intercostal gap of a procedural rib cage"""
    ribs = anatomy.bone_solid
    if isinstance(ribs, TransformedSolid):
        raise InvalidParams("fixed targets are placed before normalization")
    if not isinstance(ribs, RibCageSolid):
        raise InvalidParams("fixed targets need a procedural rib cage")
    heights = np.sort(ribs.heights)
    if not 0 <= spec.gap_index < len(heights) - 1:
        raise InvalidParams(f"gap index {spec.gap_index} out of range")
    h = float(heights[spec.gap_index] + heights[spec.gap_index + 1]) / 2
    # ribs are swept about their own origin; express h in the fitted frame
    h += float((ribs.origin - anatomy.frame.origin) @ anatomy.frame.axis)
    center = cyl_to_cartesian(anatomy.frame, h, spec.theta, anatomy.bone_inner_radius - spec.depth)
    target = place_target_at(anatomy, center, spec.semi_axes, np.eye(3), 0, dims)
    if target is None:
        raise PlacementFailed("fixed target intersects bone or leaves the grid")
    return target


# Normalization

def _generic_affine(frame: CylinderFrame, generic_radius: float,
                    generic_h_range: Optional[Tuple[float, float]]) -> AffineMap:
    radial_scale = generic_radius / frame.radius
    axial_scale, shift = 1.0, 0.0
    if generic_h_range is not None:
        axial_scale = (generic_h_range[1] - generic_h_range[0]) / (frame.h_max - frame.h_min)
        shift = generic_h_range[0] - axial_scale * frame.h_min
    a = frame.axis
    if radial_scale == 1.0 and axial_scale == 1.0 and shift == 0.0:
        return AffineMap()
    matrix = radial_scale * (np.eye(3) - np.outer(a, a)) + axial_scale * np.outer(a, a)
    return AffineMap(matrix, frame.origin - matrix @ frame.origin + shift * a)


def normalize_to_generic(anatomy: Anatomy, targets: Sequence[Target], generic_radius: float,
                         generic_h_range: Optional[Tuple[float, float]] = None) -> Tuple[Anatomy, List[Target]]:
    """Affinely resize the scene so the frame radius becomes generic_radius"""
    affine = _generic_affine(anatomy.frame, generic_radius, generic_h_range)
    if affine.is_identity():
        return anatomy, list(targets)

    frame = anatomy.frame
    radial_scale = generic_radius / frame.radius
    axial_scale = float(frame.axis @ affine.matrix @ frame.axis)
    h_of_origin = float((affine.apply(frame.origin[None])[0] - frame.origin) @ frame.axis)
    new_frame = CylinderFrame(frame.origin, frame.axis, generic_radius,
                              axial_scale * frame.h_min + h_of_origin,
                              axial_scale * frame.h_max + h_of_origin)
    bone_solid = TransformedSolid(anatomy.bone_solid, affine)
    res = anatomy.resolution
    normalized = Anatomy(
        bone_solid=bone_solid,
        bone_voxels=voxelize_solid(bone_solid, res),
        skin=anatomy.skin.transformed(affine.matrix, affine.translation, frame, new_frame),
        frame=new_frame,
        resolution=res,
        bone_inner_radius=anatomy.bone_inner_radius * radial_scale,
        bone_outer_radius=anatomy.bone_outer_radius * radial_scale,
        bone_h_range=tuple(axial_scale * h + h_of_origin for h in anatomy.bone_h_range),
        scale_to_generic=anatomy.scale_to_generic.then(affine),
    )
    bone_keys = normalized.bone_keys()
    moved = []
    for target in targets:
        if target.solid is None:
            raise InvalidParams(f"target {target.id} has no solid to resample")
        solid = TransformedSolid(target.solid, affine)
        voxels = _remove_voxels(voxelize_solid(solid, res), bone_keys)
        moved.append(Target.from_voxels(voxels, res, target.id, solid))
    return normalized, moved


def normalize_trajectory(traj: Sequence[Pose], anatomy: Anatomy) -> List[Pose]:
    return _map_poses(traj, anatomy.scale_to_generic)


def denormalize_trajectory(traj: Sequence[Pose], anatomy: Anatomy) -> List[Pose]:
    """Map generic-frame poses back to the native anatomy"""
    return _map_poses(traj, anatomy.scale_to_generic.inverse())


def _map_poses(traj: Sequence[Pose], affine: AffineMap) -> List[Pose]:
    if affine.is_identity():
        return list(traj)
    out = []
    for pose in traj:
        position = affine.apply(pose.position[None])[0]
        out.append(Pose(position, nearest_rotation(affine.matrix @ pose.orientation)))
    return out


# Static channels

def build_static_channels(anatomy: Anatomy, targets: Sequence[Target],
                          grid_center: Optional[NDArray[np.float64]] = None,
                          extent: float = 120.0) -> VoxelGrid:
    """Target and bone channels of a grid centered on the union of the targets"""
    res = anatomy.resolution
    n = int(round(extent / res))
    dims = (n, n, n)
    target_voxels = np.concatenate([t.voxels for t in targets]) if targets else np.zeros((0, 3), np.int64)
    if grid_center is None:
        if len(target_voxels) == 0:
            raise TargetOutsideGrid("no target voxels to center the grid on")
        grid_center = lattice_center(target_voxels, res).mean(axis=0)
    origin_index = np.round(np.asarray(grid_center) / res).astype(np.int64) - n // 2
    grid = VoxelGrid(origin_index * res, res, dims)

    rel = target_voxels - origin_index
    if len(rel) and (np.any(rel < 0) or np.any(rel >= n)):
        raise TargetOutsideGrid("target voxels extend beyond the state grid")
    grid.data[0][rel[:, 0], rel[:, 1], rel[:, 2]] = 1

    bone = anatomy.bone_voxels - origin_index
    inside = np.all((bone >= 0) & (bone < n), axis=1)
    bone = bone[inside]
    grid.data[1][bone[:, 0], bone[:, 1], bone[:, 2]] = 1
    if np.any(grid.data[0] & grid.data[1]):
        raise InvalidParams("target and bone channels overlap")
    return grid


def _vary_ribcage(params: RibCageParams, variants: Optional[VariantRanges],
                  rng: np.random.Generator) -> RibCageParams:
    if variants is None:
        return params
    rib_radius = float(rng.uniform(*variants.rib_radius))
    gap = float(rng.uniform(*variants.gap))
    radius = float(rng.uniform(*variants.centerline_radius))
    return replace(params, rib_radius=rib_radius, gap=gap, gaps=None, centerline_radius=radius,
                   gap_jitter=min(params.gap_jitter, gap / 2 - 1e-6))


def build_scenario(config: ScenarioConfig, seed: int, retry_manager: Optional[RetryManager] = None,
                   logger: Optional[Any] = None) -> Scenario:
    """Pure function of (config, seed): anatomy, targets, normalization and static grid"""
    rib_seq, target_seq = np.random.SeedSequence([config.seed, seed]).spawn(2)
    rib_rng = np.random.default_rng(rib_seq)
    target_rng = np.random.default_rng(target_seq)

    if config.bone_mesh:
        if not config.skin_mesh:
            raise InvalidParams("mesh scenarios need a skin mesh")
        anatomy, targets = load_segmented_meshes(config.bone_mesh, config.skin_mesh,
                                                 config.target_meshes, config.resolution)
        if not targets:
            targets = place_targets(anatomy, config, target_rng, retry_manager)
    else:
        params = _vary_ribcage(config.ribcage, config.variants, rib_rng)
        anatomy = generate_procedural_ribcage(params, int(rib_rng.integers(2 ** 63)), config.resolution)
        if config.fixed_target is not None:
            targets = [place_fixed_target(anatomy, config.fixed_target, config.grid_dims)]
        else:
            targets = place_targets(anatomy, config, target_rng, retry_manager)

    return assemble_scenario(config, seed, anatomy, targets, logger)


def assemble_scenario(config: ScenarioConfig, seed: int, anatomy: Anatomy, targets: Sequence[Target],
                      logger: Optional[Any] = None) -> Scenario:
    """Normalize native anatomy and targets, then build the static grid"""
    targets = list(targets)
    if config.generic_radius is not None:
        anatomy, targets = normalize_to_generic(anatomy, targets, config.generic_radius)
    grid = build_static_channels(anatomy, targets, extent=config.grid_extent)
    if logger:
        logger.debug(f"scenario seed={seed}: {len(targets)} target(s), "
                     f"{int(grid.target.sum())} target voxels, {int(grid.bone.sum())} bone voxels in grid")
    return Scenario(config, seed, anatomy, targets, grid)


# Scene text format

def export_scene(grid: VoxelGrid, cylinder_radius: float, path: Union[str, Path]) -> str:
    lines = [
        f"dims {grid.dims[0]} {grid.dims[1]} {grid.dims[2]}",
        f"res {grid.resolution:.9g}",
        f"origin {grid.origin[0]:.9g} {grid.origin[1]:.9g} {grid.origin[2]:.9g}",
        f"Rc {cylinder_radius:.9g}",
    ]
    for c in range(3):
        for i, j, k in np.argwhere(grid.data[c]).tolist():
            lines.append(f"{c} {i} {j} {k}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)


def load_scene_file(path: Union[str, Path]) -> Tuple[VoxelGrid, float]:
    """Strict parser for the scene text format"""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) < 4:
        raise SceneFormatError(f"{path}: truncated header")
    expected = [("dims", 3), ("res", 1), ("origin", 3), ("Rc", 1)]
    header = []
    for lineno, (key, count) in enumerate(expected, start=1):
        parts = lines[lineno - 1].split()
        if len(parts) != count + 1 or parts[0] != key:
            raise SceneFormatError(f"{path}:{lineno}: expected '{key}' with {count} value(s)")
        try:
            header.append([int(p) if key == "dims" else float(p) for p in parts[1:]])
        except ValueError:
            raise SceneFormatError(f"{path}:{lineno}: bad number in '{key}'")
    dims, (res,), origin, (radius,) = header
    if min(dims) < 1 or res <= 0:
        raise SceneFormatError(f"{path}: invalid dims or resolution")
    grid = VoxelGrid(np.asarray(origin), res, tuple(dims))
    for lineno, line in enumerate(lines[4:], start=5):
        parts = line.split()
        if not parts:
            continue
        try:
            c, i, j, k = (int(p) for p in parts)
        except ValueError:
            raise SceneFormatError(f"{path}:{lineno}: expected 'c i j k'")
        if c not in (0, 1, 2) or not grid.contains_index((i, j, k)):
            raise SceneFormatError(f"{path}:{lineno}: voxel out of range")
        if grid.data[c, i, j, k]:
            raise SceneFormatError(f"{path}:{lineno}: duplicate voxel")
        grid.data[c, i, j, k] = 1
    if np.any(grid.data[0] & grid.data[1]):
        raise SceneFormatError(f"{path}: target and bone channels overlap")
    return grid, radius
