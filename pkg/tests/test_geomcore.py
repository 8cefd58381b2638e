import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from uniperc.geomcore import (
    CameraIntrinsics, DegenerateInputError, Plane, RigidPose, ShapeError, axis_angle_to_matrix,
    compose_flows, fit_ground_plane, matrix_to_axis_angle, project, rigid_flow, signed_height_above,
    unproject, warp_synthesize,
)


def _rot_z(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


@pytest.fixture
def K():
    return CameraIntrinsics(fx=20.0, fy=22.0, cx=5.5, cy=3.5, width=12, height=8)


class TestIntrinsics:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(0.0, 1.0, 0.0, 0.0, 4, 4)
        with pytest.raises(ValueError):
            CameraIntrinsics(1.0, 1.0, 4.0, 0.0, 4, 4)

    def test_scaled_halves(self):
        K = CameraIntrinsics(10.0, 10.0, 7.0, 3.0, 15, 7)
        half = K.scaled(0.5)
        assert (half.width, half.height) == (8, 4)


class TestUnprojectProject:
    def test_origin_pixel(self):
        K = CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 2, 2)
        pts = unproject(torch.ones(1, 1, 2, 2), K)
        assert pts[0, :, 0, 0].tolist() == [0.0, 0.0, 1.0]

    def test_x_formula(self):
        K = CameraIntrinsics(2.0, 2.0, 3.0, 0.0, 8, 2)
        pts = unproject(torch.full((1, 1, 2, 8), 4.0), K)
        assert pts[0, 0, 0, 5].item() == pytest.approx(4.0)

    def test_dimension_mismatch(self, K):
        with pytest.raises(ShapeError):
            unproject(torch.ones(1, 1, 7, 12), K)

    def test_project_examples(self):
        K = CameraIntrinsics(10.0, 10.0, 5.0, 5.0, 20, 20)
        pts = torch.tensor([[2.0, 1.0, 2.0], [0.0, 0.0, 0.0]]).T.reshape(1, 3, 1, 2)
        coords, valid = project(pts, K)
        assert coords[0, :, 0, 0].tolist() == [15.0, 10.0]
        assert valid[0, 0, 0, 0] and not valid[0, 0, 0, 1]

        K1 = CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 2, 2)
        coords, valid = project(torch.tensor([0.0, 0.0, 1.0]).reshape(1, 3, 1, 1), K1)
        assert coords.flatten().tolist() == [0.0, 0.0] and valid.all()

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_round_trip(self, seed):
        K = CameraIntrinsics(30.0, 25.0, 6.0, 4.0, 12, 8)
        g = torch.Generator().manual_seed(seed)
        depth = torch.rand(2, 1, 8, 12, generator=g, dtype=torch.float64) * 50 + 0.1
        coords, valid = project(unproject(depth, K), K)
        v, u = torch.meshgrid(torch.arange(8.0), torch.arange(12.0), indexing="ij")
        assert valid.all()
        torch.testing.assert_close(coords, torch.stack([u, v])[None].expand(2, -1, -1, -1).double(),
                                   atol=1e-9, rtol=0)


class TestPose:
    def test_rodrigues_matches_explicit_rotation(self):
        R = axis_angle_to_matrix(torch.tensor([0.0, 0.0, math.pi / 2], dtype=torch.float64))
        np.testing.assert_allclose(R.numpy(), _rot_z(math.pi / 2), atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1.0, 1.0), min_size=6, max_size=6))
    def test_inverse_composition_is_identity(self, values):
        pose = RigidPose.from_vector(torch.tensor(values, dtype=torch.float64))
        ident = pose.compose(pose.inverse()).as_vector()
        assert ident.abs().max().item() < 1e-6

    def test_log_map_round_trip(self):
        r = torch.tensor([[0.3, -0.2, 1.1], [1e-6, 0.0, 0.0]], dtype=torch.float64)
        torch.testing.assert_close(matrix_to_axis_angle(axis_angle_to_matrix(r)), r, atol=1e-9, rtol=0)


class TestRigidFlow:
    def test_identity_pose_is_zero(self, K):
        depth = torch.rand(3, 1, 8, 12) * 10 + 0.5
        flow = rigid_flow(depth, RigidPose.identity(3), K)
        assert torch.count_nonzero(flow) == 0

    def test_pure_translation(self, K):
        pose = RigidPose(torch.zeros(1, 3), torch.tensor([[0.0, 0.0, 0.5]]))
        flow = rigid_flow(torch.rand(1, 1, 8, 12) + 1, pose, K)
        torch.testing.assert_close(flow, torch.tensor([0.0, 0.0, 0.5]).reshape(1, 3, 1, 1).expand_as(flow))

    def test_rotation_about_z(self):
        # pixel (1, 0) with fx=1, cx=0, depth 1 unprojects to (1, 0, 1)
        K = CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 2, 1)
        pose = RigidPose(torch.tensor([[0.0, 0.0, math.pi / 2]], dtype=torch.float64), torch.zeros(1, 3, dtype=torch.float64))
        flow = rigid_flow(torch.ones(1, 1, 1, 2, dtype=torch.float64), pose, K)
        expected = _rot_z(math.pi / 2) @ np.array([1.0, 0, 1]) - np.array([1.0, 0, 1])
        np.testing.assert_allclose(flow[0, :, 0, 1].numpy(), expected, atol=1e-12)
        np.testing.assert_allclose(expected, [-1, 1, 0], atol=1e-12)


class TestComposeFlows:
    def test_zero_and_one_masks(self):
        fr, fc = torch.randn(2, 3, 4, 5), torch.randn(2, 3, 4, 5)
        fi, ff = compose_flows(fr, fc, torch.zeros(2, 1, 4, 5))
        assert torch.count_nonzero(fi) == 0 and torch.equal(ff, fr)
        _, ff = compose_flows(fr, fc, torch.ones(2, 1, 4, 5))
        torch.testing.assert_close(ff, fc)

    def test_half_mask(self):
        fr = torch.zeros(1, 3, 1, 1)
        fc = torch.tensor([2.0, 0, 0]).reshape(1, 3, 1, 1)
        fi, _ = compose_flows(fr, fc, torch.full((1, 1, 1, 1), 0.5))
        assert fi.flatten().tolist() == [1.0, 0.0, 0.0]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            compose_flows(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5), torch.zeros(1, 1, 4, 4))
        with pytest.raises(ShapeError):
            compose_flows(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 4), torch.zeros(1, 1, 3, 4))


class TestWarp:
    def test_zero_flow_is_identity(self, K):
        img = torch.rand(2, 3, 8, 12)
        out, valid = warp_synthesize(img, torch.rand(2, 1, 8, 12) + 1, torch.zeros(2, 3, 8, 12), K)
        assert valid.all()
        torch.testing.assert_close(out, img, atol=1e-5, rtol=0)

    def test_constant_image(self, K):
        img = torch.full((1, 3, 8, 12), 0.3)
        out, valid = warp_synthesize(img, torch.rand(1, 1, 8, 12) + 1, torch.randn(1, 3, 8, 12) * 0.2, K)
        torch.testing.assert_close(out[valid.expand_as(out)], torch.full_like(out[valid.expand_as(out)], 0.3))

    def test_out_of_frame_flagged(self, K):
        flow = torch.zeros(1, 3, 8, 12)
        flow[:, 0] = 100.0
        _, valid = warp_synthesize(torch.rand(1, 1, 8, 12), torch.ones(1, 1, 8, 12), flow, K)
        assert not valid.any()

    def test_shape_error(self, K):
        with pytest.raises(ShapeError):
            warp_synthesize(torch.rand(1, 3, 8, 11), torch.ones(1, 1, 8, 12), torch.zeros(1, 3, 8, 12), K)

    def test_matches_manual_bilinear(self, K):
        g = torch.Generator().manual_seed(3)
        img = torch.rand(1, 1, 8, 12, generator=g, dtype=torch.float64)
        depth = torch.rand(1, 1, 8, 12, generator=g, dtype=torch.float64) + 2
        flow = torch.randn(1, 3, 8, 12, generator=g, dtype=torch.float64) * 0.05
        out, valid = warp_synthesize(img, depth, flow, K)
        arr = img[0, 0].numpy()
        for v in range(8):
            for u in range(12):
                d = depth[0, 0, v, u].item()
                p = np.array([(u - K.cx) / K.fx * d, (v - K.cy) / K.fy * d, d]) + flow[0, :, v, u].numpy()
                x, y = K.fx * p[0] / p[2] + K.cx, K.fy * p[1] / p[2] + K.cy
                inside = 0 <= x <= 11 and 0 <= y <= 7
                assert bool(valid[0, 0, v, u]) == inside
                if not inside:
                    continue
                x0, y0 = min(int(x), 10), min(int(y), 6)
                ax, ay = x - x0, y - y0
                ref = (arr[y0, x0] * (1 - ax) * (1 - ay) + arr[y0, x0 + 1] * ax * (1 - ay)
                       + arr[y0 + 1, x0] * (1 - ax) * ay + arr[y0 + 1, x0 + 1] * ax * ay)
                assert out[0, 0, v, u].item() == pytest.approx(ref, abs=1e-12)


class TestGroundPlane:
    def _plane_points(self, n, rng):
        xz = rng.uniform(-5, 5, size=(n, 2))
        xz[:, 1] += 10
        return np.column_stack([xz[:, 0], np.full(n, 1.5), xz[:, 1]])

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_exact_plane(self, seed):
        pts = self._plane_points(200, np.random.default_rng(seed))
        plane = fit_ground_plane(pts, rng=seed, up=(0, 1, 0))
        np.testing.assert_allclose(plane.normal, [0, 1, 0], atol=1e-6)
        assert plane.offset == pytest.approx(1.5, abs=1e-6)
        # default orientation for a y-down camera: the camera side is positive
        plane = fit_ground_plane(pts, rng=seed)
        np.testing.assert_allclose(plane.normal, [0, -1, 0], atol=1e-6)
        assert signed_height_above(np.zeros(3), plane) > 0

    def test_outliers(self):
        rng = np.random.default_rng(5)
        inliers = self._plane_points(140, rng)
        outliers = rng.uniform([-5, -3, 5], [5, 1.0, 15], size=(60, 3))
        plane = fit_ground_plane(np.vstack([inliers, outliers]), inlier_threshold=0.05, rng=1)
        assert np.abs(signed_height_above(inliers, plane)).max() <= 0.05

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(8)
        pts = np.vstack([self._plane_points(50, rng), rng.normal(size=(30, 3)) * 3])
        pts += rng.normal(size=pts.shape) * 0.01
        a, b = fit_ground_plane(pts, rng=4), fit_ground_plane(pts, rng=4)
        assert np.array_equal(a.normal, b.normal) and a.offset == b.offset

    def test_degenerate(self):
        with pytest.raises(DegenerateInputError):
            fit_ground_plane(np.zeros((2, 3)))
        with pytest.raises(DegenerateInputError):
            fit_ground_plane(np.outer(np.arange(10.0), [1, 2, 3]))

    def test_signed_height(self):
        plane = Plane(np.array([0.0, 1.0, 0.0]), 1.5)
        assert signed_height_above(np.array([3.0, 1.5, 2.0]), plane) == 0
        assert signed_height_above(np.array([3.0, 2.5, 2.0]), plane) == pytest.approx(1.0)
        below = np.array([[0, 1.0, 1], [2, -3.0, 4]])
        assert (signed_height_above(below, plane) < 0).all()

    def test_plane_rejects_non_unit(self):
        with pytest.raises(ValueError):
            Plane(np.array([0.0, 2.0, 0.0]), 0.0)
