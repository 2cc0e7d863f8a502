import numpy as np
import pytest

from kfvio.geometry import NavState, exp_so3, log_so3, retract, rotation_error
from kfvio.propagation import (ImuBuffer, ImuNoise, InsufficientImuDataError,
                               propagate, propagate_covariance,
                               rs_pose_jacobians)
from kfvio.sensors import ImuParams, calibrate_accel, calibrate_gyro

G = 9.80665


def static_buffer(t0, t1, rate=100.0, params=None):
    """Readings of an IMU at rest with identity orientation."""
    params = params or ImuParams()
    t = np.arange(t0, t1 + 1.0 / rate, 1.0 / rate)
    a = np.tile([0.0, 0.0, params.gravity], (t.size, 1))
    w = np.zeros((t.size, 3))
    return ImuBuffer(t, w, a)


def rotating_buffer(t0, t1, omega, rate=200.0):
    """Pure rotation at constant body rate, no specific force beyond gravity."""
    t = np.arange(t0, t1 + 1.0 / rate, 1.0 / rate)
    w = np.tile(omega, (t.size, 1))
    a = np.zeros((t.size, 3))
    for i, ti in enumerate(t):
        rot = exp_so3(np.asarray(omega) * (ti - t0))
        a[i] = rot.T @ np.array([0.0, 0.0, G])
    return ImuBuffer(t, w, a)


def random_motion_buffer(rng, t0, t1, rate=200.0):
    t = np.arange(t0, t1 + 1.0 / rate, 1.0 / rate)
    w = 0.5 * np.stack([np.sin(3.0 * t), np.cos(2.0 * t), np.sin(1.5 * t + 0.4)], axis=1)
    a = np.stack([2.0 * np.sin(2.2 * t), 1.5 * np.cos(1.7 * t),
                  G + 0.8 * np.sin(2.9 * t)], axis=1)
    w += rng.normal(scale=0.01, size=w.shape)
    a += rng.normal(scale=0.02, size=a.shape)
    return ImuBuffer(t, w, a)


def nav0():
    return NavState(p=np.zeros(3), rot=np.eye(3), v=np.zeros(3), t=0.0)


class TestPropagate:
    def test_free_fall(self):
        # Zero specific force: the platform is falling freely.
        t = np.arange(0.0, 1.01, 0.01)
        buf = ImuBuffer(t, np.zeros((t.size, 3)), np.zeros((t.size, 3)))
        res = propagate(nav0(), ImuParams(), buf, 0.0, 1.0)
        assert np.allclose(res.nav.v, [0, 0, -G], atol=1e-9)
        assert np.allclose(res.nav.rot, np.eye(3), atol=1e-12)
        assert np.allclose(res.nav.p, [0, 0, -G / 2], atol=1e-9)

    def test_static_stays_put(self):
        buf = static_buffer(0.0, 2.0)
        res = propagate(nav0(), ImuParams(), buf, 0.0, 2.0)
        assert np.allclose(res.nav.p, 0, atol=1e-10)
        assert np.allclose(res.nav.v, 0, atol=1e-10)

    def test_constant_yaw_rate(self):
        buf = rotating_buffer(0.0, 1.0, [0.0, 0.0, 1.0])
        res = propagate(nav0(), ImuParams(), buf, 0.0, 1.0)
        assert np.linalg.norm(log_so3(res.nav.rot) - [0, 0, 1.0]) < 1e-6
        assert np.linalg.norm(res.nav.v) < 1e-4

    def test_forward_backward_round_trip(self):
        rng = np.random.default_rng(20)
        for _ in range(100):
            buf = random_motion_buffer(rng, 0.0, 0.12)
            start = NavState(p=rng.normal(size=3), rot=exp_so3(rng.normal(size=3)),
                             v=rng.normal(size=3), t=0.0)
            t1 = rng.uniform(0.05, 0.1)
            fwd = propagate(start, ImuParams(), buf, 0.0, t1, need_jacobians=False)
            back = propagate(fwd.nav, ImuParams(), buf, t1, 0.0, need_jacobians=False)
            assert np.linalg.norm(back.nav.p - start.p) < 1e-9
            assert np.linalg.norm(back.nav.v - start.v) < 1e-9
            assert np.linalg.norm(rotation_error(back.nav.rot, start.rot)) < 1e-10

    def test_insufficient_buffer(self):
        buf = static_buffer(0.0, 0.5)
        with pytest.raises(InsufficientImuDataError):
            propagate(nav0(), ImuParams(), buf, 0.0, 1.0)

    def test_one_period_extrapolation_allowed(self):
        buf = static_buffer(0.0, 0.5, rate=100.0)
        propagate(nav0(), ImuParams(), buf, 0.0, 0.505)


def fd_phi(start, params, buf, t0, t1, eps=1e-6):
    """Finite-difference state transition over [dp, dtheta, dv, dbg, dba]."""
    phi = np.zeros((15, 15))
    base = propagate(start, params, buf, t0, t1, need_jacobians=False).nav

    def wrap(nav_pert, params_pert):
        res = propagate(nav_pert, params_pert, buf, t0, t1, need_jacobians=False).nav
        return np.concatenate([res.p - base.p, rotation_error(res.rot, base.rot),
                               res.v - base.v])

    for k in range(9):
        d = np.zeros(9)
        d[k] = eps
        plus = wrap(retract(start, d), params)
        minus = wrap(retract(start, -d), params)
        phi[0:9, k] = (plus - minus) / (2 * eps)
    for k in range(3):
        for sign_idx, s in enumerate((eps, -eps)):
            db = np.zeros(3)
            db[k] = s
            pp = ImuParams(b_g=params.b_g + db, b_a=params.b_a, M_g=params.M_g,
                           T_s=params.T_s, M_a=params.M_a, gravity=params.gravity)
            col = wrap(start, pp)
            phi[0:9, 9 + k] += col / (2 * eps if sign_idx == 0 else -2 * eps)
        for sign_idx, s in enumerate((eps, -eps)):
            db = np.zeros(3)
            db[k] = s
            pp = ImuParams(b_g=params.b_g, b_a=params.b_a + db, M_g=params.M_g,
                           T_s=params.T_s, M_a=params.M_a, gravity=params.gravity)
            col = wrap(start, pp)
            phi[0:9, 12 + k] += col / (2 * eps if sign_idx == 0 else -2 * eps)
    phi[9:15, 9:15] = np.eye(6)
    return phi


class TestJacobians:
    def test_phi_against_finite_differences(self):
        rng = np.random.default_rng(21)
        params = ImuParams(b_g=np.array([0.01, -0.02, 0.005]),
                           b_a=np.array([0.05, 0.02, -0.04]),
                           M_g=np.eye(3) + rng.normal(scale=0.01, size=(3, 3)),
                           T_s=rng.normal(scale=0.002, size=(3, 3)),
                           M_a=np.tril(np.eye(3) + rng.normal(scale=0.01, size=(3, 3))))
        for trial in range(5):
            buf = random_motion_buffer(rng, 0.0, 0.3)
            start = NavState(p=rng.normal(size=3), rot=exp_so3(rng.normal(size=3) * 0.5),
                             v=rng.normal(size=3), t=0.0)
            res = propagate(start, params, buf, 0.0, 0.25)
            num = fd_phi(start, params, buf, 0.0, 0.25)
            err = np.abs(res.phi - num).max() / max(1.0, np.abs(num).max())
            assert err < 1e-4

    def test_phi_composition(self):
        rng = np.random.default_rng(22)
        params = ImuParams()
        buf = random_motion_buffer(rng, 0.0, 0.4)
        start = nav0()
        full = propagate(start, params, buf, 0.0, 0.35)
        first = propagate(start, params, buf, 0.0, 0.2)
        second = propagate(first.nav, params, buf, 0.2, 0.35)
        composed = second.phi @ first.phi
        assert np.abs(full.phi - composed).max() / np.abs(full.phi).max() < 1e-8

    def test_param_sensitivity_against_finite_differences(self):
        rng = np.random.default_rng(23)
        params = ImuParams()
        buf = random_motion_buffer(rng, 0.0, 0.3)
        start = NavState(p=np.zeros(3), rot=exp_so3([0.2, -0.1, 0.3]),
                         v=np.array([0.5, -0.2, 0.1]), t=0.0)
        res = propagate(start, params, buf, 0.0, 0.25)
        base = res.nav
        eps = 1e-6
        num = np.zeros((9, 24))

        def run(pp):
            out = propagate(start, pp, buf, 0.0, 0.25, need_jacobians=False).nav
            return np.concatenate([out.p - base.p, rotation_error(out.rot, base.rot),
                                   out.v - base.v])

        col = 0
        for (mat, shape) in (("M_g", (3, 3)), ("T_s", (3, 3))):
            for i in range(3):
                for j in range(3):
                    for s in (eps, -eps):
                        m = getattr(params, mat).copy()
                        m[i, j] += s
                        kw = dict(b_g=params.b_g, b_a=params.b_a, M_g=params.M_g,
                                  T_s=params.T_s, M_a=params.M_a)
                        kw[mat] = m
                        num[:, col] += run(ImuParams(**kw)) / (2 * s)
                    col += 1
        for (i, j) in ((0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)):
            for s in (eps, -eps):
                m = params.M_a.copy()
                m[i, j] += s
                num[:, col] += run(ImuParams(b_g=params.b_g, b_a=params.b_a,
                                             M_g=params.M_g, T_s=params.T_s,
                                             M_a=m)) / (2 * s)
            col += 1
        err = np.abs(res.param_sensitivity - num).max() / max(1.0, np.abs(num).max())
        assert err < 1e-4


class TestCovariance:
    def test_identity_phi_zero_noise(self):
        rng = np.random.default_rng(24)
        P0 = rng.normal(size=(15, 15))
        P0 = P0 @ P0.T
        buf = static_buffer(0.0, 0.1)
        res = propagate(nav0(), ImuParams(), buf, 0.0, 0.0)
        assert np.allclose(res.phi, np.eye(15))
        assert np.allclose(propagate_covariance(P0, res), P0)

    def test_velocity_variance_random_walk_rate(self):
        noise = ImuNoise(sigma_g=0.0, sigma_a=8e-3, sigma_bg=0.0, sigma_ba=0.0)
        buf = static_buffer(0.0, 1.0)
        res = propagate(nav0(), ImuParams(), buf, 0.0, 1.0, noise=noise)
        P1 = propagate_covariance(np.zeros((15, 15)), res)
        grown = np.diag(P1)[6:9]
        assert np.all(np.abs(grown - 8e-3**2) / 8e-3**2 < 0.10)

    def test_zero_noise_is_pure_similarity(self):
        rng = np.random.default_rng(25)
        buf = random_motion_buffer(rng, 0.0, 0.3)
        P0 = rng.normal(size=(15, 15))
        P0 = P0 @ P0.T
        res = propagate(nav0(), ImuParams(), buf, 0.0, 0.25,
                        noise=ImuNoise(0.0, 0.0, 0.0, 0.0))
        P1 = propagate_covariance(P0, res)
        assert np.allclose(P1, 0.5 * ((res.phi @ P0 @ res.phi.T)
                                      + (res.phi @ P0 @ res.phi.T).T), atol=1e-12)

    def test_psd_preserved(self):
        rng = np.random.default_rng(26)
        noise = ImuNoise(1.2e-3, 8e-3, 2e-5, 5.5e-5)
        buf = random_motion_buffer(rng, 0.0, 0.5)
        P = np.eye(15) * 1e-4
        nav = nav0()
        t = 0.0
        for _ in range(10):
            res = propagate(nav, ImuParams(), buf, t, t + 0.045, noise=noise)
            P = propagate_covariance(P, res)
            nav = res.nav
            t += 0.045
        assert np.min(np.linalg.eigvalsh(P)) > -1e-12


class TestRsPoseJacobians:
    def test_zero_interval(self):
        rng = np.random.default_rng(27)
        buf = random_motion_buffer(rng, -0.1, 0.1)
        start = NavState(p=np.array([1.0, 2.0, 3.0]), rot=exp_so3([0.1, 0.2, 0.3]),
                         v=np.array([0.4, -0.5, 0.2]), t=0.0)
        rs = rs_pose_jacobians(start, ImuParams(), buf, 0.0, row_factor=0.25)
        assert np.allclose(rs.pose_jacobian[:, 0:6], np.eye(6))
        assert np.allclose(rs.pose_jacobian[:, 6:9], 0)
        # d pose / d t_d = [v; R omega] even at zero interval.
        assert np.allclose(rs.d_pose_d_td[0:3], start.v)

    def test_central_row_zero_tr_jacobian(self):
        rng = np.random.default_rng(28)
        buf = random_motion_buffer(rng, -0.1, 0.1)
        start = nav0()
        rs = rs_pose_jacobians(start, ImuParams(), buf, 0.01, row_factor=0.0)
        assert np.allclose(rs.d_pose_d_tr, 0.0)

    def test_time_jacobians_against_finite_differences(self):
        rng = np.random.default_rng(29)
        params = ImuParams()
        buf = random_motion_buffer(rng, -0.1, 0.2)
        start = NavState(p=np.array([0.3, -0.2, 0.1]), rot=exp_so3([0.2, 0.1, -0.3]),
                         v=np.array([1.0, 0.5, -0.2]), t=0.0)
        row_factor = 0.31
        t_feat = 0.035
        rs = rs_pose_jacobians(start, params, buf, t_feat, row_factor)
        eps = 1e-6
        plus = propagate(start, params, buf, 0.0, t_feat + eps, need_jacobians=False).nav
        minus = propagate(start, params, buf, 0.0, t_feat - eps, need_jacobians=False).nav
        dp = (plus.p - minus.p) / (2 * eps)
        dth = rotation_error(plus.rot, minus.rot) / (2 * eps)
        num = np.concatenate([dp, dth])
        assert np.abs(rs.d_pose_d_td - num).max() / max(1.0, np.abs(num).max()) < 1e-4
        assert np.allclose(rs.d_pose_d_tr, row_factor * rs.d_pose_d_td)

    def test_pose_block_against_finite_differences(self):
        rng = np.random.default_rng(30)
        params = ImuParams()
        buf = random_motion_buffer(rng, -0.1, 0.2)
        start = NavState(p=np.array([0.3, -0.2, 0.1]), rot=exp_so3([0.2, 0.1, -0.3]),
                         v=np.array([1.0, 0.5, -0.2]), t=0.0)
        t_feat = -0.04  # backward in time
        rs = rs_pose_jacobians(start, params, buf, t_feat, 0.1)
        base = propagate(start, params, buf, 0.0, t_feat, need_jacobians=False).nav
        eps = 1e-6
        num = np.zeros((6, 9))
        for k in range(9):
            d = np.zeros(9)
            d[k] = eps
            plus = propagate(retract(start, d), params, buf, 0.0, t_feat,
                             need_jacobians=False).nav
            minus = propagate(retract(start, -d), params, buf, 0.0, t_feat,
                              need_jacobians=False).nav
            num[0:3, k] = (plus.p - minus.p) / (2 * eps)
            num[3:6, k] = (rotation_error(plus.rot, base.rot)
                           - rotation_error(minus.rot, base.rot)) / (2 * eps)
        assert np.abs(rs.pose_jacobian - num).max() / max(1.0, np.abs(num).max()) < 1e-4
