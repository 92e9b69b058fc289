"""
Virtual linear probe: per-element ray casting with bone occlusion and imaging-plane accounting
"""

import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from errors import InvalidParams
from geometry import Pose, VoxelGrid, VoxelIndex, as_vec3, lattice_center, unit

_MIN_SEGMENT = 1e-9


@dataclass(frozen=True)
class ProbeModel:
    """Linear array geometry in mm"""
    footprint_length: float = 40.0
    imaging_depth: float = 100.0
    element_pitch: float = 2.0
    depth_step: float = 2.0

    def __post_init__(self):
        for name in ("footprint_length", "imaging_depth", "element_pitch", "depth_step"):
            if not getattr(self, name) > 0:
                raise InvalidParams(f"probe {name} must be positive")
        if self.n_elements < 2:
            raise InvalidParams("probe needs at least two elements")

    @property
    def n_elements(self) -> int:
        return int(math.floor(self.footprint_length / self.element_pitch + 1e-9)) + 1

    def element_offsets(self) -> NDArray[np.float64]:
        """Element positions along the long axis, centered on the contact"""
        k = np.arange(self.n_elements, dtype=np.float64)
        return (k - (self.n_elements - 1) / 2.0) * self.element_pitch


@dataclass
class ImagingPlaneResult:
    insonified: NDArray[np.bool_]
    shadow: NDArray[np.bool_]
    N_t: int
    n_shadow: int
    n_blocking: int
    plane_voxels: int
    p_t: float
    covered_target: NDArray[np.bool_]
    d_t: float

    @property
    def n_t(self) -> int:
        return int(self.covered_target.sum())


def traverse_voxels(grid: VoxelGrid, origin: Iterable[float], direction: Iterable[float],
                    max_depth: float) -> List[Tuple[VoxelIndex, float, float]]:
    """
    Exact voxel walk of the segment origin + t*direction, t in [0, max_depth],
    clipped to the grid box. Returns (voxel, entry depth, exit depth) in order;
    zero-length touches at edges and corners are dropped.
    """
    o = as_vec3(origin)
    d = unit(direction)
    lo = grid.origin
    hi = grid.origin + grid.extent
    res = grid.resolution

    t_enter, t_exit = 0.0, float(max_depth)
    for a in range(3):
        if abs(d[a]) < 1e-15:
            if o[a] < lo[a] or o[a] >= hi[a]:
                return []
            continue
        ta, tb = (lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]
        t_enter = max(t_enter, min(ta, tb))
        t_exit = min(t_exit, max(ta, tb))
    if t_enter >= t_exit:
        return []

    p = o + t_enter * d
    dims = np.asarray(grid.dims)
    idx = np.clip(np.floor((p - lo) / res).astype(np.int64), 0, dims - 1)
    step = np.sign(d).astype(np.int64)
    t_max = np.full(3, np.inf)
    t_delta = np.full(3, np.inf)
    for a in range(3):
        if step[a] != 0:
            boundary = lo[a] + (idx[a] + (1 if step[a] > 0 else 0)) * res
            t_max[a] = (boundary - o[a]) / d[a]
            t_delta[a] = res / abs(d[a])

    out: List[Tuple[VoxelIndex, float, float]] = []
    t = t_enter
    while True:
        axis = int(np.argmin(t_max))
        t_next = min(float(t_max[axis]), t_exit)
        if t_next - t > _MIN_SEGMENT:
            out.append(((int(idx[0]), int(idx[1]), int(idx[2])), t, t_next))
        if t_next >= t_exit:
            break
        idx[axis] += step[axis]
        if not 0 <= idx[axis] < dims[axis]:
            break
        t = t_next
        t_max[axis] += t_delta[axis]
    return out


def sample_ray_voxels(grid: VoxelGrid, origin: Iterable[float], direction: Iterable[float],
                      max_depth: float, depth_step: float) -> List[VoxelIndex]:
    """Reference traversal by uniform depth sampling; consecutive duplicates removed"""
    o = as_vec3(origin)
    d = unit(direction)
    n = int(math.floor(max_depth / depth_step + 1e-9))
    depths = (np.arange(n + 1) * depth_step)
    pts = o + depths[:, None] * d
    idx = np.floor((pts - grid.origin) / grid.resolution).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.asarray(grid.dims)), axis=1)
    out: List[VoxelIndex] = []
    for v in idx[inside].tolist():
        v = tuple(v)
        if not out or out[-1] != v:
            out.append(v)
    return out


def cast_ray(grid: VoxelGrid, origin: Iterable[float], direction: Iterable[float],
             max_depth: float) -> Tuple[List[VoxelIndex], Optional[float]]:
    """Voxels crossed before the first bone voxel, and that voxel's entry depth"""
    visited: List[VoxelIndex] = []
    bone = grid.bone
    for voxel, t_in, _ in traverse_voxels(grid, origin, direction, max_depth):
        if bone[voxel]:
            return visited, t_in
        visited.append(voxel)
    return visited, None


def _centroid_distance(contact, voxels: NDArray[np.int64], grid: VoxelGrid) -> float:
    centroid = grid.origin + lattice_center(voxels, grid.resolution).mean(axis=0)
    return float(np.linalg.norm(as_vec3(contact) - centroid))


def probe_target_distance(contact: Iterable[float], grid: VoxelGrid,
                          coverage_mask: Optional[NDArray[np.bool_]] = None) -> float:
    """
    Distance from the contact to the centroid of the target voxels not yet
    covered; all target voxels once everything is covered.
    """
    target = grid.target.astype(bool)
    if not target.any():
        raise ValueError("grid holds no target voxels")
    remaining = target if coverage_mask is None else target & ~coverage_mask
    voxels = np.argwhere(remaining if remaining.any() else target)
    return _centroid_distance(contact, voxels, grid)


def render_imaging_plane(grid: VoxelGrid, pose: Pose, probe: ProbeModel,
                         coverage_mask: Optional[NDArray[np.bool_]] = None,
                         threshold: float = 0.8) -> ImagingPlaneResult:
    """
    Cast one ray per element along the centerline and rewrite channel 2.

    Shadow is every voxel after a ray's blocking bone voxel (bone included)
    that no ray insonifies and that blocks no other ray. Target coverage is
    gated off when the shadow fraction reaches a positive threshold; a
    threshold of 0 disables gating.
    """
    shape = grid.dims
    insonified = np.zeros(shape, dtype=bool)
    beyond = np.zeros(shape, dtype=bool)
    blocking = np.zeros(shape, dtype=bool)
    bone = grid.bone.astype(bool)
    direction = pose.centerline
    for offset in probe.element_offsets():
        origin = pose.position + offset * pose.long_axis
        path = traverse_voxels(grid, origin, direction, probe.imaging_depth)
        blocked = False
        for voxel, _, _ in path:
            if blocked:
                beyond[voxel] = True
            elif bone[voxel]:
                blocking[voxel] = True
                blocked = True
            else:
                insonified[voxel] = True

    shadow = beyond & ~insonified & ~blocking
    only_blocking = blocking & ~insonified
    N_t = int(insonified.sum())
    n_shadow = int(shadow.sum())
    n_blocking = int(only_blocking.sum())
    p_t = n_shadow / max(N_t + n_shadow, 1)

    if coverage_mask is None:
        coverage_mask = np.zeros(shape, dtype=bool)
    target = grid.target.astype(bool)
    if threshold > 0 and p_t >= threshold:
        covered = np.zeros(shape, dtype=bool)
    else:
        covered = insonified & target & ~coverage_mask
    d_t = probe_target_distance(pose.position, grid, coverage_mask) if target.any() else 0.0

    grid.data[2] = insonified.astype(np.uint8)
    return ImagingPlaneResult(
        insonified=insonified,
        shadow=shadow,
        N_t=N_t,
        n_shadow=n_shadow,
        n_blocking=n_blocking,
        plane_voxels=N_t + n_shadow + n_blocking,
        p_t=float(p_t),
        covered_target=covered,
        d_t=d_t,
    )


def plane_voxel_union(grid: VoxelGrid, pose: Pose, probe: ProbeModel,
                      sampler_step: Optional[float] = None) -> NDArray[np.bool_]:
    """Voxels crossed by the element rays with bone ignored"""
    plane = np.zeros(grid.dims, dtype=bool)
    for offset in probe.element_offsets():
        origin = pose.position + offset * pose.long_axis
        if sampler_step is None:
            voxels: Sequence[VoxelIndex] = [v for v, _, _ in traverse_voxels(
                grid, origin, pose.centerline, probe.imaging_depth)]
        else:
            voxels = sample_ray_voxels(grid, origin, pose.centerline, probe.imaging_depth, sampler_step)
        for v in voxels:
            plane[v] = True
    return plane
