import numpy as np
import pytest

from geoadapt import diffcore as dc
from geoadapt.diffcore import Tensor
from geoadapt.geometry import (
    Intrinsics,
    RigidTransform,
    euler6_to_transform,
    project,
    surface_normals,
    unproject,
    warp_image,
)

K = Intrinsics(fx=100.0, fy=100.0, cx=50.0, cy=40.0, width=100, height=80)
K8 = Intrinsics(fx=7.0, fy=7.0, cx=4.0, cy=4.0, width=8, height=8)


class TestIntrinsics:
    def test_validation(self):
        with pytest.raises(ValueError):
            Intrinsics(-1.0, 1.0, 5.0, 5.0, 10, 10)
        with pytest.raises(ValueError):
            Intrinsics(10.0, 10.0, 20.0, 5.0, 10, 10)

    def test_json_roundtrip(self, tmp_path):
        path = tmp_path / "intrinsics.json"
        K.save(path)
        back = Intrinsics.load(path)
        assert back == K

    def test_scaled_halves_everything(self):
        half = K.scaled(0.5)
        assert (half.fx, half.cx, half.width) == (50.0, 25.0, 50)


class TestRigidTransform:
    def test_orthonormality_enforced(self):
        with pytest.raises(ValueError):
            RigidTransform(np.eye(3) * 2.0, np.zeros(3))

    def test_euler_zero_is_identity(self):
        t = euler6_to_transform(np.zeros(6))
        assert np.allclose(t.matrix(), np.eye(4))

    def test_euler_pi_about_x(self):
        t = euler6_to_transform([0, 0, 0, np.pi, 0, 0])
        assert np.allclose(t.rotation, np.diag([1.0, -1.0, -1.0]), atol=1e-9)

    def test_compose_inverse_is_identity(self):
        t = euler6_to_transform([0.3, -0.2, 1.0, 0.2, -0.4, 0.1])
        assert np.allclose(t.compose(t.inverse()).matrix(), np.eye(4), atol=1e-9)

    def test_composition_associative(self):
        a = euler6_to_transform([0.1, 0, 0.5, 0.05, 0.1, -0.02])
        b = euler6_to_transform([-0.3, 0.2, 0.1, -0.1, 0.02, 0.2])
        c = euler6_to_transform([0.0, -0.1, 0.9, 0.2, -0.05, 0.07])
        m1 = a.compose(b).compose(c).matrix()
        m2 = a.compose(b.compose(c)).matrix()
        assert np.allclose(m1, m2, atol=1e-12)


class TestProjection:
    def test_optical_axis(self):
        assert np.allclose(unproject((K.cx, K.cy), 10.0, K), [0.0, 0.0, 10.0])

    def test_unproject_hand_value(self):
        assert np.allclose(unproject((K.cx + K.fx, K.cy), 2.0, K), [2.0, 0.0, 2.0])

    def test_project_hand_value(self):
        u, v, z, ok = project((1.0, 0.0, 1.0), K)
        assert ok and u == 150.0 and v == K.cy and z == 1.0

    def test_round_trips(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            px = (rng.uniform(0, K.width), rng.uniform(0, K.height))
            d = rng.uniform(0.5, 50.0)
            p = unproject(px, d, K)
            u, v, z, ok = project(p, K)
            assert ok
            assert abs(u - px[0]) < 1e-9 and abs(v - px[1]) < 1e-9 and abs(z - d) < 1e-9

    def test_behind_camera_flagged_without_nan(self):
        u, v, z, ok = project((1.0, 1.0, 0.0), K)
        assert not ok
        assert np.isfinite([u, v, z]).all()

    def test_unproject_needs_positive_depth(self):
        with pytest.raises(ValueError):
            unproject((1.0, 1.0), 0.0, K)


class TestWarpImage:
    def test_identity_pose_reproduces_image(self):
        rng = np.random.default_rng(1)
        img = dc.constant(rng.random((2, 3, 8, 8)))
        depth = dc.constant(rng.uniform(2.0, 30.0, size=(2, 1, 8, 8)))
        out, valid = warp_image(img, depth, RigidTransform.identity(), K8)
        assert valid.all()
        assert np.abs(out.data - img.data).max() < 1e-12

    def test_forward_translation_shrinks_valid_mask(self):
        rng = np.random.default_rng(2)
        img = dc.constant(rng.random((1, 3, 8, 8)))
        depth = dc.constant(np.full((1, 1, 8, 8), 5.0))
        fwd = euler6_to_transform([0, 0, -1.0, 0, 0, 0])  # camera advanced
        _, valid = warp_image(img, depth, [fwd], K8)
        assert 0 < valid.sum() < valid.size

    def test_differentiable_wrt_all_inputs(self):
        rng = np.random.default_rng(3)
        ref = Tensor(rng.random((1, 3, 8, 8)), requires_grad=True)
        depth = Tensor(rng.uniform(4, 8, size=(1, 1, 8, 8)), requires_grad=True)
        pose = Tensor(np.array([[0.02, -0.01, 0.05, 0.01, 0.0, -0.02]]), requires_grad=True)
        out, _ = warp_image(ref, depth, pose, K8)
        dc.tsum(out).backward()
        assert ref.grad is not None and depth.grad is not None and pose.grad is not None


class TestSurfaceNormals:
    def test_fronto_parallel_plane(self):
        D = dc.constant(np.full((1, 1, 10, 12), 7.0))
        n, deg = surface_normals(D, K)
        assert not deg.any()
        # constant-depth plane faces the camera along the z axis
        assert np.allclose(np.abs(n.data[0, 2]), 1.0, atol=1e-9)
        assert np.allclose(n.data[0, 0], 0.0, atol=1e-9)

    def test_tilted_plane_matches_analytic_normal(self):
        theta = 0.3
        m = np.array([0.0, np.sin(theta), -np.cos(theta)])
        z0 = 12.0
        us = (np.arange(K.width) - K.cx) / K.fx
        vs = (np.arange(K.height) - K.cy) / K.fy
        xn, yn = np.meshgrid(us, vs)
        depth = (m[2] * z0) / (m[0] * xn + m[1] * yn + m[2])
        n, deg = surface_normals(dc.constant(depth[None, None]), K)
        inner = n.data[0][:, :-1, :-1]
        unit = m / np.linalg.norm(m)
        err = np.minimum(
            np.linalg.norm(inner - unit.reshape(3, 1, 1), axis=0),
            np.linalg.norm(inner + unit.reshape(3, 1, 1), axis=0),
        )
        assert err.max() < 1e-5

    def test_unit_length_on_random_depth(self):
        rng = np.random.default_rng(4)
        depth = rng.uniform(2.0, 40.0, size=(1, 1, 9, 11))
        n, deg = surface_normals(dc.constant(depth), K8)
        norms = np.linalg.norm(n.data[0], axis=0)
        assert np.abs(norms[~deg[0, 0]] - 1.0).max() < 1e-6

    def test_border_replication(self):
        rng = np.random.default_rng(5)
        depth = rng.uniform(2.0, 10.0, size=(1, 1, 6, 7))
        n, _ = surface_normals(dc.constant(depth), K8)
        assert np.array_equal(n.data[0][:, :, -1], n.data[0][:, :, -2])
        assert np.array_equal(n.data[0][:, -1, :], n.data[0][:, -2, :])

    def test_differentiable(self):
        rng = np.random.default_rng(6)
        w = dc.constant(rng.normal(size=(1, 3, 8, 8)))
        rep = dc.grad_check(
            lambda t: dc.tsum(surface_normals(t, K8)[0] * w),
            Tensor(rng.uniform(3, 9, size=(1, 1, 8, 8))),
        )
        assert rep.passed
