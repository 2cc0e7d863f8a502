import numpy as np
import pytest

from kfvio.geometry import Transform, exp_so3
from kfvio.sensors import (KANNALA_BRANDT, PINHOLE_RADTAN, BehindCameraError,
                           CameraParams, ImuParams, NonPositiveDepthError,
                           anchored_point_in_target, calibrate_accel,
                           calibrate_gyro, feature_time, project,
                           project_jacobians, reproject_anchored,
                           reproject_world, state_epoch, unproject)


def naive_matvec(M, v):
    out = np.zeros(3)
    for i in range(3):
        for j in range(3):
            out[i] += M[i][j] * v[j]
    return out


def random_imu_params(rng):
    M_a = np.eye(3) + np.tril(rng.normal(scale=0.01, size=(3, 3)))
    M_a = np.tril(M_a)
    return ImuParams(b_g=rng.normal(scale=0.01, size=3),
                     b_a=rng.normal(scale=0.05, size=3),
                     M_g=np.eye(3) + rng.normal(scale=0.01, size=(3, 3)),
                     T_s=rng.normal(scale=0.002, size=(3, 3)),
                     M_a=M_a)


def radtan_cam(**kw):
    defaults = dict(T_BC=Transform.identity(), model=PINHOLE_RADTAN,
                    intrinsics=np.array([350.0, 360.0, 378.0, 238.0, 0.0, 0.0, 0.0, 0.0]))
    defaults.update(kw)
    return CameraParams(**defaults)


def kb_cam(**kw):
    defaults = dict(T_BC=Transform.identity(), model=KANNALA_BRANDT,
                    intrinsics=np.array([350.0, 360.0, 378.0, 238.0,
                                         -0.01, 0.005, -0.002, 0.001]))
    defaults.update(kw)
    return CameraParams(**defaults)


class TestImuCalibration:
    def test_accel_identity(self):
        p = ImuParams()
        assert np.allclose(calibrate_accel(np.array([0, 0, 9.81]), p), [0, 0, 9.81])

    def test_accel_hand_case(self):
        p = ImuParams(b_a=np.array([0.1, 0, 0]), M_a=np.diag([1.01, 1.0, 1.0]))
        assert np.allclose(calibrate_accel(np.array([1.1, 0, 0]), p), [1.01, 0, 0])

    def test_accel_against_naive_oracle(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            p = random_imu_params(rng)
            a_m = rng.normal(scale=5.0, size=3)
            expected = naive_matvec(p.M_a, a_m - p.b_a)
            assert np.allclose(calibrate_accel(a_m, p), expected, atol=1e-14)

    def test_gyro_identity(self):
        p = ImuParams()
        w = np.array([0.1, -0.2, 0.3])
        assert np.allclose(calibrate_gyro(w, np.array([0, 0, 9.8]), p), w)

    def test_gyro_g_sensitivity_hand_case(self):
        p = ImuParams(T_s=0.001 * np.eye(3))
        out = calibrate_gyro(np.zeros(3), np.array([10.0, 0, 0]), p)
        assert np.allclose(out, [-0.01, 0, 0], atol=1e-15)

    def test_gyro_against_naive_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            p = random_imu_params(rng)
            w_m = rng.normal(scale=1.0, size=3)
            a_m = rng.normal(scale=5.0, size=3)
            expected = (naive_matvec(p.M_g, w_m - p.b_g)
                        - naive_matvec(p.M_g, naive_matvec(p.T_s, a_m - p.b_a)))
            assert np.allclose(calibrate_gyro(w_m, a_m, p), expected, atol=1e-14)

    def test_ma_upper_triangle_rejected(self):
        M = np.eye(3)
        M[0, 1] = 1e-3
        with pytest.raises(ValueError):
            ImuParams(M_a=M)


class TestTiming:
    def test_state_epoch(self):
        assert state_epoch(10.0, 0.0) == 10.0
        assert state_epoch(10.0, 0.020) == pytest.approx(10.020)
        assert state_epoch(10.0, -0.005) == pytest.approx(9.995)

    def test_feature_time_central_row(self):
        assert feature_time(240.0, 480.0, 5.0, 0.02) == pytest.approx(5.0)

    def test_feature_time_first_and_last_row(self):
        assert feature_time(0.0, 480.0, 5.0, 0.020) == pytest.approx(5.0 - 0.010)
        assert feature_time(480.0, 480.0, 5.0, 0.020) == pytest.approx(5.0 + 0.010)

    def test_feature_time_affine_in_row(self):
        h, t_r, t_jk = 480.0, 0.02, 3.0
        rows = np.linspace(0, h, 7)
        ts = np.array([feature_time(v, h, t_jk, t_r) for v in rows])
        slopes = np.diff(ts) / np.diff(rows)
        assert np.allclose(slopes, t_r / h, atol=1e-15)


class TestProjection:
    def test_optical_axis(self):
        cam = radtan_cam()
        assert np.allclose(project(np.array([0, 0, 1.0]), cam), [378.0, 238.0])

    def test_hand_arithmetic(self):
        cam = radtan_cam()
        z = project(np.array([1.0, 0, 1.0]), cam)
        assert z[0] == pytest.approx(728.0)

    def test_full_distortion_matches_formula_reevaluation(self):
        # Second, independent evaluation of the distorted pinhole polynomial.
        rng = np.random.default_rng(12)
        intr = np.array([350.0, 360.0, 378.0, 238.0, -0.28, 0.07, 1e-4, -2e-4])
        cam = radtan_cam(intrinsics=intr)
        fx, fy, cx, cy, k1, k2, p1, p2 = intr
        for _ in range(200):
            p = np.array([rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), 1.0])
            p *= rng.uniform(0.5, 10.0)
            g1, g2 = p[0] / p[2], p[1] / p[2]
            r2 = g1**2 + g2**2
            u = fx * (g1 * (1 + k1 * r2 + k2 * r2**2) + 2 * p1 * g1 * g2
                      + p2 * (r2 + 2 * g1**2)) + cx
            v = fy * (g2 * (1 + k1 * r2 + k2 * r2**2) + p1 * (r2 + 2 * g2**2)
                      + 2 * p2 * g1 * g2) + cy
            assert np.allclose(project(p, cam), [u, v], atol=1e-10)

    def test_behind_camera(self):
        cam = radtan_cam()
        with pytest.raises(BehindCameraError):
            project(np.array([0.0, 0.0, -1.0]), cam)

    def test_kb_on_axis(self):
        cam = kb_cam()
        assert np.allclose(project(np.array([0, 0, 2.0]), cam), [378.0, 238.0])

    def test_kb_wide_angle_accepted(self):
        cam = kb_cam()
        p = np.array([np.sin(np.deg2rad(95.0)), 0.0, np.cos(np.deg2rad(95.0))])
        project(p, cam)
        with pytest.raises(BehindCameraError):
            project(np.array([np.sin(np.deg2rad(98.5)), 0, np.cos(np.deg2rad(98.5))]), cam)


class TestProjectionJacobians:
    @pytest.mark.parametrize("make_cam", [radtan_cam, kb_cam])
    def test_finite_differences(self, make_cam):
        rng = np.random.default_rng(13)
        if make_cam is radtan_cam:
            cam = make_cam(intrinsics=np.array([350.0, 360.0, 378.0, 238.0,
                                                -0.28, 0.07, 1e-4, -2e-4]))
        else:
            cam = make_cam()
        step = 1e-6
        checked = 0
        while checked < 1000:
            p = np.array([rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8), 1.0])
            p *= rng.uniform(0.5, 10.0)
            try:
                z0, dz_dp, dz_di = project_jacobians(p, cam)
            except BehindCameraError:
                continue
            for k in range(3):
                dp = np.zeros(3)
                dp[k] = step * max(1.0, abs(p[k]))
                num = (project(p + dp, cam) - project(p - dp, cam)) / (2 * dp[k])
                scale = max(1.0, np.abs(num).max())
                assert np.abs(dz_dp[:, k] - num).max() / scale < 1e-5
            for k in range(8):
                di = np.zeros(8)
                di[k] = step * max(1.0, abs(cam.intrinsics[k]))
                cam_p = CameraParams(T_BC=cam.T_BC, model=cam.model,
                                     intrinsics=cam.intrinsics + di)
                cam_m = CameraParams(T_BC=cam.T_BC, model=cam.model,
                                     intrinsics=cam.intrinsics - di)
                num = (project(p, cam_p) - project(p, cam_m)) / (2 * di[k])
                scale = max(1.0, np.abs(num).max())
                assert np.abs(dz_di[:, k] - num).max() / scale < 1e-5
            checked += 1

    def test_zero_distortion_du_dx(self):
        cam = radtan_cam()
        _, dz_dp, _ = project_jacobians(np.array([0, 0, 1.0]), cam)
        assert dz_dp[0, 0] == pytest.approx(350.0)

    def test_dz_dc_is_identity(self):
        rng = np.random.default_rng(14)
        for make in (radtan_cam, kb_cam):
            cam = make()
            for _ in range(20):
                p = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), 1.0])
                _, _, dz_di = project_jacobians(p, cam)
                assert np.allclose(dz_di[:, 2:4], np.eye(2), atol=1e-15)


class TestUnproject:
    @pytest.mark.parametrize("make_cam", [radtan_cam, kb_cam])
    def test_round_trip(self, make_cam):
        rng = np.random.default_rng(15)
        if make_cam is radtan_cam:
            cam = make_cam(intrinsics=np.array([350.0, 360.0, 378.0, 238.0,
                                                -0.28, 0.07, 1e-4, -2e-4]))
        else:
            cam = make_cam()
        n = 0
        while n < 300:
            g = np.array([rng.uniform(-0.7, 0.7), rng.uniform(-0.7, 0.7), 1.0])
            try:
                z = project(g, cam)
            except BehindCameraError:
                continue
            ray = unproject(z, cam)
            z2 = project(ray, cam)
            assert np.linalg.norm(z2 - z) < 1e-8
            n += 1


class TestReprojection:
    def test_world_identity_pose(self):
        cam = radtan_cam()
        z = reproject_world(np.array([0, 0, 1.0, 1.0]), Transform.identity(), cam)
        assert np.allclose(z, [378.0, 238.0])

    def test_world_translated_pose(self):
        cam = radtan_cam()
        T = Transform(np.eye(3), np.array([0, 0, -1.0]))
        z = reproject_world(np.array([0, 0, 1.0, 1.0]), T, cam)
        assert np.allclose(z, [378.0, 238.0])

    def test_anchored_same_frame(self):
        cam = radtan_cam()
        rng = np.random.default_rng(16)
        T = Transform(exp_so3(rng.normal(size=3) * 0.3), rng.normal(size=3))
        lm = np.array([0.2, -0.1, 0.5])
        z = reproject_anchored(lm, T, cam, T, cam)
        expected = project(np.array([lm[0], lm[1], 1.0]), cam)
        assert np.allclose(z, expected, atol=1e-12)

    def test_anchored_point_at_infinity(self):
        cam = radtan_cam()
        anchor = Transform.identity()
        target = Transform(exp_so3([0, 0.1, 0]), np.array([5.0, 0, 0]))
        lm = np.array([0.1, -0.2, 0.0])
        z = reproject_anchored(lm, anchor, cam, target, cam)
        direction = target.rotation.T @ np.array([0.1, -0.2, 1.0])
        assert np.allclose(z, project(direction, cam), atol=1e-12)

    def test_anchored_matches_world_conversion(self):
        rng = np.random.default_rng(17)
        cam_a = radtan_cam(T_BC=Transform(exp_so3([0.01, 0.02, -0.01]),
                                          np.array([0.05, -0.02, 0.01])))
        cam_t = radtan_cam(T_BC=Transform(exp_so3([-0.02, 0.01, 0.03]),
                                          np.array([-0.04, 0.06, 0.02])))
        n = 0
        while n < 100:
            Ta = Transform(exp_so3(rng.normal(size=3) * 0.2), rng.normal(size=3))
            Tt = Transform(exp_so3(rng.normal(size=3) * 0.2), rng.normal(size=3))
            lm = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4),
                           rng.uniform(0.1, 1.0)])
            p_cam_anchor = np.array([lm[0], lm[1], 1.0]) / lm[2]
            p_w = Ta.compose(cam_a.T_BC).apply(p_cam_anchor)
            try:
                z1 = reproject_anchored(lm, Ta, cam_a, Tt, cam_t)
                z2 = reproject_world(np.append(p_w, 1.0), Tt, cam_t)
            except BehindCameraError:
                continue
            assert np.linalg.norm(z1 - z2) < 1e-9
            n += 1

    def test_negative_inverse_depth_rejected_and_clamped(self):
        cam = radtan_cam()
        T = Transform.identity()
        target = Transform(np.eye(3), np.array([1.0, 0, 0]))
        with pytest.raises(NonPositiveDepthError):
            reproject_anchored(np.array([0.0, 0.0, -1e-3]), T, cam, target, cam)
        # Tiny negative rho is clamped to the point-at-infinity form.
        q = anchored_point_in_target(np.array([0.0, 0.0, -1e-7]), T, cam, target, cam)
        assert np.allclose(q, [0, 0, 1.0], atol=1e-12)
