import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import Delaunay

from soilmap.errors import DegenerateSweep, NoValidSlices, RankDeficientFit
from soilmap.gridmap import new_map
from soilmap.sweep import (
    BladePose, blade_pose_from_edge, blade_rotation, check_movement, extract_fee_params,
    generate_swept_volume, get_surface_points, intersect_heightmap, interpolate_fee_params,
    mesh_is_closed, wls_line_fit_intersect,
)


def box_sweep(m, x0=1.0, y=2.0, length=0.5, depth=0.15, heading=0.0, rake=math.pi / 2,
              yaw=0.0, surface=0.0):
    h = np.array([math.cos(heading), math.sin(heading), 0.0])
    e0 = np.array([x0, y, surface - depth])
    T0 = blade_pose_from_edge(e0, heading, rake, yaw)
    T1 = blade_pose_from_edge(e0 + length * h, heading, rake, yaw)
    return T0, T1


def random_rotation(g):
    q = g.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


class TestPose:
    def test_rotation_orthonormal(self):
        R = blade_rotation(0.3, rake=1.2, yaw=0.1)
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)

    def test_vertical_blade_frame(self):
        R = blade_rotation(0.0)
        np.testing.assert_allclose(R[:, 0], [1, 0, 0], atol=1e-12)
        np.testing.assert_allclose(R[:, 2], [0, 0, 1], atol=1e-12)

    def test_rejects_bad_rotation(self):
        with pytest.raises(ValueError):
            BladePose(np.zeros(3), np.diag([1.0, 1.0, 2.0]))


class TestMovement:
    def test_identical(self):
        T = blade_pose_from_edge([0, 0, 0], 0.0)
        assert check_movement(T, T)[0] is False

    def test_translation(self):
        T0 = blade_pose_from_edge([0, 0, 0], 0.0)
        T1 = blade_pose_from_edge([0.06 * math.cos(0.4), 0.06 * math.sin(0.4), 0], 0.0)
        update, t_hat, n_hat = check_movement(T0, T1, trans_min=0.05)
        assert update
        np.testing.assert_allclose(t_hat, [math.cos(0.4), math.sin(0.4), 0], atol=1e-12)
        np.testing.assert_allclose(n_hat, T0.normal)

    def test_pure_pitch(self):
        T0 = blade_pose_from_edge([0, 0, 0], 0.5, rake=math.pi / 2)
        T1 = BladePose(T0.p, blade_rotation(0.5, rake=math.pi / 2 - math.radians(3)))
        update, t_hat, _ = check_movement(T0, T1, trans_min=0.05, rot_min=math.radians(2))
        assert update
        np.testing.assert_allclose(t_hat, [math.cos(0.5), math.sin(0.5), 0], atol=1e-12)


class TestSweptVolume:
    def test_box_volume(self):
        T0 = blade_pose_from_edge([0, 0, 0], 0.0)
        T1 = blade_pose_from_edge([0.1, 0, 0], 0.0)
        sv = generate_swept_volume(T0, T1)
        assert sv.faces.shape == (12, 3)
        assert sv.volume() == pytest.approx(1.85 * 0.6 * 0.1, rel=1e-12)

    def test_coincident(self):
        T = blade_pose_from_edge([0, 0, 0], 0.0)
        with pytest.raises(DegenerateSweep):
            generate_swept_volume(T, T)

    def test_random_pose_pairs_closed(self):
        g = np.random.default_rng(7)
        for _ in range(1000):
            T0 = BladePose(g.normal(size=3), random_rotation(g), g.uniform(0.2, 1.5),
                           g.uniform(0.2, 1.0))
            T1 = BladePose(g.normal(size=3), random_rotation(g), T0.half_width, T0.height)
            sv = generate_swept_volume(T0, T1)
            assert mesh_is_closed(sv.faces)
            assert sv.volume() >= 0

    def test_open_mesh_detected(self):
        T0 = blade_pose_from_edge([0, 0, 0], 0.0)
        sv = generate_swept_volume(T0, blade_pose_from_edge([0.1, 0, 0], 0.0))
        assert not mesh_is_closed(sv.faces[:-1])


class TestIntersect:
    def test_hovering(self):
        m = new_map(60, 60, g=0.1)
        T0, T1 = box_sweep(m, depth=-0.5)
        res = intersect_heightmap(generate_swept_volume(T0, T1), m)
        assert res.empty and len(res.G) > 0

    def test_flat_cut(self):
        m = new_map(60, 60, g=0.1)
        T0, T1 = box_sweep(m, depth=0.1)
        res = intersect_heightmap(generate_swept_volume(T0, T1), m)
        assert len(res.A) > 0
        np.testing.assert_allclose(res.dH, 0.1, atol=1e-12)

    def test_cells_above_bottom(self, rng):
        m = new_map(60, 60, g=0.1)
        m.H[:] = rng.normal(scale=0.05, size=m.shape)
        T0, T1 = box_sweep(m, depth=0.05, rake=1.2)
        res = intersect_heightmap(generate_swept_volume(T0, T1), m)
        lookup = {tuple(c): h for c, h in zip(res.G, res.hG)}
        assert len(res.A) > 0
        for (i, j), dh in zip(res.A, res.dH):
            assert dh > 0
            assert m.H[i, j] > lookup[(i, j)]
            assert m.H[i, j] - dh == pytest.approx(lookup[(i, j)])

    def test_voxel_oracle(self):
        g = 0.05
        m = new_map(80, 80, g=g)
        ii, jj = np.meshgrid(np.arange(80), np.arange(80), indexing="ij")
        m.H[:] = 0.05 * (ii * g) + 0.02 * (jj * g)
        T0, T1 = box_sweep(m, x0=1.0, y=2.0, length=0.6, depth=0.15, heading=0.35,
                           surface=0.08)
        sv = generate_swept_volume(T0, T1)
        res = intersect_heightmap(sv, m)
        got = g * g * res.dH.sum()

        hull = Delaunay(sv.vertices)
        lo, hi = sv.vertices.min(axis=0), sv.vertices.max(axis=0)
        v = 0.01
        xs = np.arange(lo[0], hi[0], v) + v / 2
        ys = np.arange(lo[1], hi[1], v) + v / 2
        zs = np.arange(lo[2], hi[2], v) + v / 2
        X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
        ci = np.clip(np.floor(X / g + 0.5).astype(int), 0, 79)
        cj = np.clip(np.floor(Y / g + 0.5).astype(int), 0, 79)
        below = Z < m.H[ci, cj]
        pts = np.column_stack([X[below], Y[below], Z[below]])
        inside = hull.find_simplex(pts) >= 0
        want = inside.sum() * v ** 3
        assert got == pytest.approx(want, rel=0.02)


class TestSurfacePoints:
    def test_flat_collinear(self):
        m = new_map(80, 60, g=0.1, h0=0.0)
        T0, T1 = box_sweep(m, x0=2.0, y=3.0, depth=0.1)
        res = intersect_heightmap(generate_swept_volume(T0, T1), m)
        s = get_surface_points(res.A, m, [1, 0, 0], T0.normal, T0)
        assert s.slices
        for sl in s.slices:
            np.testing.assert_allclose(sl.z, 0.0)
            assert np.all(sl.x > 0)

    def test_loose_surcharge(self):
        m = new_map(80, 60, g=0.1)
        T0 = blade_pose_from_edge([2.0, 3.0, -0.1], 0.0, half_width=0.04)
        # One slice at j=30 walking +x from i=20; ten loose cells ahead of the edge.
        m.L[21:31, 30] = 0.05
        m.H[21:31, 30] = 0.05
        s = get_surface_points(np.array([[20, 30]]), m, [1, 0, 0], T0.normal, T0)
        assert len(s.slices) == 1
        assert s.VQ == pytest.approx(10 * 0.01 * 0.05)


class TestLineFit:
    def test_flat_vertical(self):
        x = np.linspace(0.05, 2.0, 20)
        alpha, rho, d, res = wls_line_fit_intersect(x, np.zeros_like(x), 2.0, -0.2,
                                                    [0, 0, 1], [1, 0, 0])
        assert alpha == pytest.approx(0.0, abs=1e-12)
        assert rho == pytest.approx(math.pi / 2)
        assert d == pytest.approx(0.2)
        assert res == pytest.approx(0.0, abs=1e-12)

    def test_slope(self):
        x = np.linspace(0.05, 2.0, 20)
        alpha = wls_line_fit_intersect(x, 0.1 * x, 2.0, -0.2, [0, 0, 1], [1, 0, 0])[0]
        assert alpha == pytest.approx(math.atan(0.1))

    def test_edge_above_line(self):
        x = np.linspace(0.05, 2.0, 20)
        assert wls_line_fit_intersect(x, np.zeros_like(x), 2.0, 0.3, [0, 0, 1], [1, 0, 0])[2] == 0

    def test_rank_deficient(self):
        with pytest.raises(RankDeficientFit):
            wls_line_fit_intersect([1.0, 1.0], [0.0, 1.0], 2.0, 0.0, [0, 0, 1], [1, 0, 0])

    def test_weighted_oracle(self, rng):
        x = np.linspace(0.05, 2.0, 40)
        # Locally steep near the blade, flattening further out.
        z = 0.3 * x - 0.1 * x ** 2 + rng.normal(scale=0.002, size=x.size)
        c_x = 2.0
        alpha = wls_line_fit_intersect(x, z, c_x, -1.0, [0, 0, 1], [1, 0, 0])[0]
        W = np.diag(np.exp(-c_x * x))
        X = np.column_stack([x, np.ones_like(x)])
        a_w = np.linalg.solve(X.T @ W @ X, X.T @ W @ z)[0]
        a_ols = np.linalg.solve(X.T @ X, X.T @ z)[0]
        assert math.tan(alpha) == pytest.approx(a_w, rel=1e-9)
        assert abs(a_w - 0.3) < abs(a_ols - 0.3)

    def test_rake_measured_from_surface(self):
        x = np.linspace(0.05, 2.0, 20)
        up = blade_rotation(0.0, rake=math.radians(70))[:, 2]
        rho = wls_line_fit_intersect(x, np.zeros_like(x), 2.0, -0.2, up, [1, 0, 0])[1]
        assert rho == pytest.approx(math.radians(70))


class TestExtract:
    def test_box_depth(self):
        m = new_map(80, 60, g=0.1)
        T0, T1 = box_sweep(m, x0=2.0, y=3.0, depth=0.15)
        res = intersect_heightmap(generate_swept_volume(T0, T1), m)
        ex = extract_fee_params(m, T0, res.A, res.dH, [1, 0, 0], T0.normal)
        assert ex.d == pytest.approx(0.15, abs=m.g / 2)
        assert ex.rho == pytest.approx(math.pi / 2, abs=1e-9)
        assert m.g <= ex.w <= 1.85
        assert ex.metrics["slices"] == len(ex.slice_d)

    def test_ramp_alpha(self):
        m = new_map(80, 60, g=0.1)
        ii = np.arange(80)[:, None] * 0.1
        m.H[:] = 0.15 * ii
        T0, T1 = box_sweep(m, x0=2.0, y=3.0, depth=0.1, surface=0.3)
        res = intersect_heightmap(generate_swept_volume(T0, T1), m)
        ex = extract_fee_params(m, T0, res.A, res.dH, [1, 0, 0], T0.normal)
        assert ex.alpha == pytest.approx(math.atan(0.15), abs=math.radians(1))

    def test_depth_weighting(self):
        d = np.array([0.1, 0.3])
        w = np.exp(5.0 * d)
        want = (math.exp(0.5) * 0.1 + math.exp(1.5) * 0.3) / (math.exp(0.5) + math.exp(1.5))
        assert (w @ d) / w.sum() == pytest.approx(want)
        # Same rule applied by extraction over two slices of different depth.
        m = new_map(80, 60, g=0.1)
        m.H[:, 30:] = 0.2
        T0 = blade_pose_from_edge([2.0, 3.0, -0.1], 0.0, half_width=0.1)
        T1 = blade_pose_from_edge([2.5, 3.0, -0.1], 0.0, half_width=0.1)
        res = intersect_heightmap(generate_swept_volume(T0, T1), m)
        ex = extract_fee_params(m, T0, res.A, res.dH, [1, 0, 0], T0.normal)
        wd = np.exp(5.0 * ex.slice_d)
        assert ex.d == pytest.approx((wd @ ex.slice_d) / wd.sum())
        assert ex.d > ex.slice_d.mean()

    def test_yaw_width(self):
        m = new_map(100, 100, g=0.1)
        yaw = math.radians(30)
        T0, T1 = box_sweep(m, x0=3.0, y=5.0, depth=0.1, yaw=yaw, length=0.5)
        res = intersect_heightmap(generate_swept_volume(T0, T1), m)
        ex = extract_fee_params(m, T0, res.A, res.dH, [1, 0, 0], T0.normal)
        assert ex.w == pytest.approx(math.cos(yaw) * 1.85, abs=m.g)

    def test_empty(self):
        m = new_map(10, 10)
        T0 = blade_pose_from_edge([0.5, 0.5, 0.0], 0.0)
        with pytest.raises(NoValidSlices):
            extract_fee_params(m, T0, np.zeros((0, 2), int), np.zeros(0), [1, 0, 0], T0.normal)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.03, 0.3), st.floats(0, 2 * math.pi))
    def test_flat_depth_property(self, depth, heading):
        m = new_map(80, 80, g=0.1)
        c = np.array([4.0, 4.0])
        start = c - 0.25 * np.array([math.cos(heading), math.sin(heading)])
        T0, T1 = box_sweep(m, x0=start[0], y=start[1], depth=depth, heading=heading)
        res = intersect_heightmap(generate_swept_volume(T0, T1), m)
        t_hat = [math.cos(heading), math.sin(heading), 0.0]
        ex = extract_fee_params(m, T0, res.A, res.dH, t_hat, T0.normal)
        assert ex.d == pytest.approx(depth, abs=m.g / 2)
        assert m.g <= ex.w <= 1.85


class TestInterpolate:
    def test_constant_surcharge(self):
        poses = [blade_pose_from_edge([k * 0.1, 0, 0], 0.0) for k in range(4)]
        s = interpolate_fee_params(0.0, 1.5, 0.2, poses, 0.02, 0.0, 15000.0)
        np.testing.assert_allclose(s.Q, 300.0)

    def test_linear_depth(self):
        poses = [blade_pose_from_edge([k * 0.1, 0, 0], 0.0) for k in range(5)]
        s = interpolate_fee_params(0.0, 1.5, 0.2, poses, 0.0, 0.01, 15000.0)
        np.testing.assert_allclose(s.d, [0, 0.05, 0.1, 0.15, 0.2])
        np.testing.assert_allclose(s.Q, 15000.0 * s.VQ)
        assert len(s.d) == len(s.VQ) == 5

    def test_short_history(self):
        with pytest.raises(ValueError):
            interpolate_fee_params(0, 1, 0.1, [blade_pose_from_edge([0, 0, 0], 0.0)], 0, 0, 1)
