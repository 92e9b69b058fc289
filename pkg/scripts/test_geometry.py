"""
Cylindrical frame, enclosing circle, skin projection and probe pose checks
"""

import itertools
import math

import numpy as np
import pytest

from errors import DegenerateInput, NoContact
from geometry import (CylinderFrame, HeightFieldSkin, MeshSkin, Pose, VoxelGrid, canonical_theta,
                      cartesian_to_cyl, centerline_surface_angle, cyl_to_cartesian, fit_bounding_cylinder,
                      min_enclosing_circle, probe_pose, project_to_skin, world_to_voxel)
from mesh_tools import cylinder_shell_mesh, points_inside_mesh, uv_sphere_mesh


def _frame(radius=120.0):
    return CylinderFrame(np.array([1.0, -2.0, 3.0]), np.array([0.0, 0.0, 1.0]), radius, -50.0, 50.0)


def _brute_force_circle(points):
    best = None
    candidates = []
    for a, b in itertools.combinations(points, 2):
        c = (a + b) / 2
        candidates.append((c, np.linalg.norm(a - c)))
    for a, b, c in itertools.combinations(points, 3):
        d = 2 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]))
        if abs(d) < 1e-12:
            continue
        ux = ((a @ a) * (b[1] - c[1]) + (b @ b) * (c[1] - a[1]) + (c @ c) * (a[1] - b[1])) / d
        uy = ((a @ a) * (c[0] - b[0]) + (b @ b) * (a[0] - c[0]) + (c @ c) * (b[0] - a[0])) / d
        center = np.array([ux, uy])
        candidates.append((center, np.linalg.norm(a - center)))
    for center, radius in candidates:
        if np.all(np.linalg.norm(points - center, axis=1) <= radius * (1 + 1e-9)):
            if best is None or radius < best:
                best = radius
    return best


def test_cylindrical_round_trip():
    frame = _frame()
    rng = np.random.default_rng(1)
    for _ in range(200):
        h, theta, r = rng.uniform(-50, 50), rng.uniform(0, 360), rng.uniform(1, 200)
        h2, theta2, r2 = cartesian_to_cyl(frame, cyl_to_cartesian(frame, h, theta, r))
        assert h2 == pytest.approx(h, abs=1e-9)
        assert r2 == pytest.approx(r, abs=1e-9)
        assert min(abs(theta2 - theta), 360 - abs(theta2 - theta)) < 1e-7


def test_canonical_theta_wraps():
    assert canonical_theta(360.0) == 0.0
    assert canonical_theta(-90.0) == pytest.approx(270.0)
    assert canonical_theta(725.0) == pytest.approx(5.0)
    assert 0.0 <= canonical_theta(-1e-300) < 360.0


def test_min_enclosing_circle_matches_brute_force():
    rng = np.random.default_rng(7)
    for trial in range(5):
        points = rng.normal(size=(25, 2)) * rng.uniform(1, 10)
        cx, cy, r = min_enclosing_circle(points, seed=trial)
        assert np.all(np.hypot(points[:, 0] - cx, points[:, 1] - cy) <= r * (1 + 1e-9))
        assert r == pytest.approx(_brute_force_circle(points), rel=1e-9)


def test_min_enclosing_circle_is_seed_stable():
    points = np.random.default_rng(3).uniform(-5, 5, size=(40, 2))
    assert min_enclosing_circle(points, seed=11) == min_enclosing_circle(points, seed=11)


def test_fit_bounding_cylinder_recovers_circle():
    angles = np.linspace(0, 2 * np.pi, 36, endpoint=False)
    pts = np.stack([1.0 + 5 * np.cos(angles), 2.0 + 5 * np.sin(angles), np.linspace(-3, 4, 36)], axis=1)
    frame = fit_bounding_cylinder(pts)
    assert frame.radius == pytest.approx(5.0, rel=1e-9)
    assert frame.origin[:2] == pytest.approx([1.0, 2.0], abs=1e-9)
    assert (frame.h_min, frame.h_max) == pytest.approx((-3.0, 4.0))


def test_fit_bounding_cylinder_degenerate_inputs():
    with pytest.raises(DegenerateInput):
        fit_bounding_cylinder([[0, 0, 0], [1, 1, 1]])
    with pytest.raises(DegenerateInput):
        fit_bounding_cylinder([[2, 3, z] for z in range(5)])


def test_height_field_projection_is_radial():
    frame = _frame()
    skin = HeightFieldSkin.constant(100.0, -50.0, 50.0, origin=frame.origin)
    contact, normal = project_to_skin(frame, 10.0, 30.0, skin)
    h, theta, r = cartesian_to_cyl(frame, contact)
    assert (h, theta, r) == pytest.approx((10.0, 30.0, 100.0))
    assert normal == pytest.approx(frame.radial(30.0), abs=1e-9)


def test_skin_outside_cylinder_has_no_contact():
    frame = _frame(radius=120.0)
    skin = HeightFieldSkin.constant(130.0, -50.0, 50.0, origin=frame.origin)
    with pytest.raises(NoContact):
        project_to_skin(frame, 0.0, 0.0, skin)


def test_mesh_skin_projection():
    frame = CylinderFrame(np.zeros(3), np.array([0.0, 0.0, 1.0]), 120.0, -50.0, 50.0)
    skin = MeshSkin(cylinder_shell_mesh(100.0, -60.0, 60.0, n_theta=72))
    contact, normal = project_to_skin(frame, 5.0, 2.5, skin)
    r = math.hypot(contact[0], contact[1])
    assert 100.0 * math.cos(math.radians(2.5)) - 1e-6 <= r <= 100.0 + 1e-6
    assert contact[2] == pytest.approx(5.0)
    assert math.degrees(math.acos(min(1.0, normal @ frame.radial(2.5)))) < 3.0


def test_probe_pose_base_orientation():
    frame = _frame()
    contact = cyl_to_cartesian(frame, 0.0, 45.0, 100.0)
    pose = probe_pose(contact, frame, 0.0, 0.0)
    assert pose.centerline == pytest.approx(-frame.radial(45.0), abs=1e-12)
    assert pose.long_axis == pytest.approx(frame.axis, abs=1e-12)
    assert np.linalg.det(pose.orientation) == pytest.approx(1.0)


def test_probe_tilt_sets_surface_angle():
    frame = _frame()
    contact = cyl_to_cartesian(frame, 0.0, 0.0, 100.0)
    normal = frame.radial(0.0)
    assert centerline_surface_angle(probe_pose(contact, frame, 0.0, 0.0), normal) == pytest.approx(0.0, abs=1e-6)
    assert centerline_surface_angle(probe_pose(contact, frame, 0.0, 10.0), normal) == pytest.approx(10.0)
    # rotation about the centerline leaves the angle unchanged
    assert centerline_surface_angle(probe_pose(contact, frame, 30.0, 10.0), normal) == pytest.approx(10.0)


def test_probe_pose_on_axis_is_degenerate():
    frame = _frame()
    with pytest.raises(DegenerateInput):
        probe_pose(frame.origin + 5 * frame.axis, frame, 0.0, 0.0)


def test_pose_rejects_non_rotation():
    with pytest.raises(ValueError):
        Pose(np.zeros(3), np.diag([1.0, 1.0, -1.0]))


def test_world_to_voxel_bounds():
    grid = VoxelGrid(np.array([-4.0, -4.0, -4.0]), 2.0, (4, 4, 4))
    assert world_to_voxel(grid, [-3.9, -3.9, -3.9]) == (0, 0, 0)
    assert world_to_voxel(grid, [3.9, 0.1, -0.1]) == (3, 2, 1)
    assert world_to_voxel(grid, [4.0, 0.0, 0.0]) is None


def test_mesh_skin_matches_marching_the_ray():
    frame = CylinderFrame(np.zeros(3), np.array([0.0, 0.0, 1.0]), 60.0, -30.0, 30.0)
    mesh = uv_sphere_mesh([0.0, 0.0, 0.0], 50.0, n_lat=16, n_lon=32)
    skin = MeshSkin(mesh)
    rng = np.random.default_rng(4)
    step = 0.01
    march = np.arange(0.0, frame.radius, step)
    for h, theta in zip(rng.uniform(-25.0, 25.0, 8), rng.uniform(0.0, 360.0, 8)):
        contact, normal = skin.intersect_radial(frame, float(h), float(theta))
        u = frame.radial(float(theta))
        start = cyl_to_cartesian(frame, float(h), float(theta), frame.radius)
        inside = points_inside_mesh(mesh, start - march[:, None] * u)
        first = float(march[np.argmax(inside)])
        hit = float(np.linalg.norm(start - contact))
        assert inside.any()
        assert -1e-6 <= first - hit <= step + 1e-6
        assert normal @ u > 0.0
        assert normal @ (contact / np.linalg.norm(contact)) > 0.98
