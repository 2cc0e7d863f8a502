import numpy as np
import pytest

from kfvio.geometry import (NavState, Transform, exp_so3, log_so3, quat_to_rot,
                            retract, rot_to_quat, rotation_error, skew)


def random_rotvec(rng, max_angle=np.pi - 1e-3):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(1e-6, max_angle)


def test_exp_identity():
    assert np.allclose(exp_so3(np.zeros(3)), np.eye(3), atol=1e-15)


def test_exp_quarter_turn_about_x():
    R = exp_so3([np.pi / 2, 0, 0])
    assert np.allclose(R @ np.array([0, 1.0, 0]), [0, 0, 1.0], atol=1e-12)


def test_exp_log_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        w = random_rotvec(rng)
        assert np.allclose(log_so3(exp_so3(w)), w, atol=1e-10)


def test_log_identity_and_unit_z():
    assert np.allclose(log_so3(np.eye(3)), np.zeros(3), atol=1e-15)
    assert np.allclose(log_so3(exp_so3([0, 0, 1.0])), [0, 0, 1.0], atol=1e-10)


def test_log_branch_at_pi():
    w = log_so3(exp_so3([np.pi, 0, 0]))
    assert np.allclose(w, [np.pi, 0, 0], atol=1e-7)
    # Sign convention at the branch: first nonzero component nonnegative.
    w = log_so3(exp_so3([-np.pi + 1e-12, 0, 0]))
    assert w[0] > 0


def test_rotation_matrix_invariants():
    rng = np.random.default_rng(1)
    for _ in range(100):
        R = exp_so3(random_rotvec(rng))
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(R) - 1.0) < 1e-12
        q = rot_to_quat(R)
        assert abs(np.linalg.norm(q) - 1.0) < 1e-12
        assert q[0] >= 0
        assert np.allclose(quat_to_rot(q), R, atol=1e-12)


def test_transform_compose_invert():
    rng = np.random.default_rng(2)
    for _ in range(100):
        T = Transform(exp_so3(random_rotvec(rng)), rng.normal(size=3))
        TI = T.compose(T.inverse())
        assert np.allclose(TI.rotation, np.eye(3), atol=1e-12)
        assert np.allclose(TI.translation, 0, atol=1e-12)


def test_transform_compose_associative():
    rng = np.random.default_rng(3)
    for _ in range(100):
        a, b, c = (Transform(exp_so3(random_rotvec(rng)), rng.normal(size=3))
                   for _ in range(3))
        lhs = a.compose(b).compose(c)
        rhs = a.compose(b.compose(c))
        assert np.allclose(lhs.rotation, rhs.rotation, atol=1e-12)
        assert np.allclose(lhs.translation, rhs.translation, atol=1e-12)


def nav(rng):
    return NavState(p=rng.normal(size=3), rot=exp_so3(random_rotvec(rng)),
                    v=rng.normal(size=3), t=0.0)


def test_retract_zero_is_identity():
    rng = np.random.default_rng(4)
    x = nav(rng)
    y = retract(x, np.zeros(9))
    assert np.allclose(y.p, x.p) and np.allclose(y.rot, x.rot) and np.allclose(y.v, x.v)


def test_retract_pure_position():
    x = NavState(p=np.zeros(3), rot=np.eye(3), v=np.zeros(3))
    y = retract(x, np.array([1.0, 0, 0, 0, 0, 0, 0, 0, 0]))
    assert np.allclose(y.p, [1.0, 0, 0])


def test_retract_first_order_rotation():
    rng = np.random.default_rng(5)
    x = nav(rng)
    d = np.zeros(9)
    d[3] = 1e-6
    y = retract(x, d)
    approx = (np.eye(3) + skew(d[3:6])) @ x.rot
    assert np.linalg.norm(y.rot - approx) < 1e-11


def test_retract_approximately_composes_to_second_order():
    rng = np.random.default_rng(6)
    for _ in range(50):
        x = nav(rng)
        a = rng.uniform(-1e-4, 1e-4, size=9)
        b = rng.uniform(-1e-4, 1e-4, size=9)
        lhs = retract(x, a + b)
        rhs = retract(retract(x, a), b)
        assert np.linalg.norm(lhs.p - rhs.p) < 1e-7
        assert np.linalg.norm(lhs.rot - rhs.rot) < 1e-7
        assert np.linalg.norm(lhs.v - rhs.v) < 1e-7


def test_rotation_error_round_trip():
    rng = np.random.default_rng(7)
    for _ in range(100):
        ref = exp_so3(random_rotvec(rng))
        theta = rng.normal(size=3) * 0.1
        rot = exp_so3(theta) @ ref
        assert np.allclose(rotation_error(rot, ref), theta, atol=1e-10)
