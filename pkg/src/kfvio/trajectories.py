"""Continuous ground-truth trajectory models for the simulator.

Every model evaluates analytically to (pose T_WB, world velocity, body
angular rate, world acceleration); no finite differencing in the shipped
evaluation path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import make_interp_spline

from .geometry import Transform, exp_so3, log_so3, skew


class OutOfSpanError(ValueError):
    """Evaluation time outside the trajectory span."""


class DegenerateSamplesError(ValueError):
    """Pose samples unusable for spline fitting."""


@dataclass(frozen=True)
class TrajectorySample:
    pose: Transform
    v_w: np.ndarray        # m/s in {W}
    omega_b: np.ndarray    # rad/s in {B}
    a_w: np.ndarray        # m/s^2 in {W}, acceleration of the body origin


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


class WavyCircle:
    """Circular path with a vertical wave and oscillating attitude.

    With zero wave amplitudes this degenerates to a constant-rate level
    circle whose body-frame inputs are exactly constant.
    """

    def __init__(self, radius=5.0, wave_amplitude=1.0, wave_count=4,
                 angular_speed=0.22, height=1.5,
                 pitch_amplitude=0.25, pitch_rate=1.1,
                 roll_amplitude=0.2, roll_rate=0.7,
                 yaw_wave_amplitude=0.0, yaw_wave_rate=0.0,
                 base_yaw=np.pi / 2.0):
        self.radius = radius
        self.wave_amplitude = wave_amplitude
        self.wave_count = wave_count
        self.angular_speed = angular_speed
        self.height = height
        self.pitch_amplitude = pitch_amplitude
        self.pitch_rate = pitch_rate
        self.roll_amplitude = roll_amplitude
        self.roll_rate = roll_rate
        self.yaw_wave_amplitude = yaw_wave_amplitude
        self.yaw_wave_rate = yaw_wave_rate
        self.base_yaw = base_yaw

    @property
    def span(self):
        return (-np.inf, np.inf)

    def evaluate(self, t: float) -> TrajectorySample:
        w = self.angular_speed
        r = self.radius
        aw, n = self.wave_amplitude, self.wave_count
        p = np.array([r * np.cos(w * t), r * np.sin(w * t),
                      self.height + aw * np.sin(n * w * t)])
        v = np.array([-r * w * np.sin(w * t), r * w * np.cos(w * t),
                      aw * n * w * np.cos(n * w * t)])
        a = np.array([-r * w * w * np.cos(w * t), -r * w * w * np.sin(w * t),
                      -aw * (n * w) ** 2 * np.sin(n * w * t)])

        yaw = w * t + self.yaw_wave_amplitude * np.sin(self.yaw_wave_rate * t)
        dyaw = w + self.yaw_wave_amplitude * self.yaw_wave_rate * np.cos(self.yaw_wave_rate * t)
        pitch = self.pitch_amplitude * np.sin(self.pitch_rate * t)
        dpitch = self.pitch_amplitude * self.pitch_rate * np.cos(self.pitch_rate * t)
        roll = self.roll_amplitude * np.sin(self.roll_rate * t)
        droll = self.roll_amplitude * self.roll_rate * np.cos(self.roll_rate * t)

        base = _rz(self.base_yaw)
        rot = _rz(yaw) @ _ry(pitch) @ _rx(roll) @ base
        # Body rate of the euler chain: each rate expressed in the frame the
        # later rotations have already turned.
        omega_e = (_rx(roll).T @ (_ry(pitch).T @ np.array([0.0, 0.0, dyaw])
                                  + np.array([0.0, dpitch, 0.0]))
                   + np.array([droll, 0.0, 0.0]))
        omega_b = base.T @ omega_e
        return TrajectorySample(Transform(rot, p), v, omega_b, a)

    def evaluate_many(self, ts: np.ndarray):
        """Vectorized evaluation: (R (n,3,3), p, v, omega_b, a_w arrays)."""
        ts = np.asarray(ts, dtype=float)
        w, r = self.angular_speed, self.radius
        aw, n = self.wave_amplitude, self.wave_count
        p = np.stack([r * np.cos(w * ts), r * np.sin(w * ts),
                      self.height + aw * np.sin(n * w * ts)], axis=1)
        v = np.stack([-r * w * np.sin(w * ts), r * w * np.cos(w * ts),
                      aw * n * w * np.cos(n * w * ts)], axis=1)
        a = np.stack([-r * w * w * np.cos(w * ts), -r * w * w * np.sin(w * ts),
                      -aw * (n * w) ** 2 * np.sin(n * w * ts)], axis=1)

        yaw = w * ts + self.yaw_wave_amplitude * np.sin(self.yaw_wave_rate * ts)
        dyaw = w + self.yaw_wave_amplitude * self.yaw_wave_rate * np.cos(self.yaw_wave_rate * ts)
        pitch = self.pitch_amplitude * np.sin(self.pitch_rate * ts)
        dpitch = self.pitch_amplitude * self.pitch_rate * np.cos(self.pitch_rate * ts)
        roll = self.roll_amplitude * np.sin(self.roll_rate * ts)
        droll = self.roll_amplitude * self.roll_rate * np.cos(self.roll_rate * ts)

        cy, sy = np.cos(yaw), np.sin(yaw)
        cp, sp = np.cos(pitch), np.sin(pitch)
        cr, sr = np.cos(roll), np.sin(roll)
        euler = np.empty((ts.size, 3, 3))
        euler[:, 0, 0] = cy * cp
        euler[:, 0, 1] = cy * sp * sr - sy * cr
        euler[:, 0, 2] = cy * sp * cr + sy * sr
        euler[:, 1, 0] = sy * cp
        euler[:, 1, 1] = sy * sp * sr + cy * cr
        euler[:, 1, 2] = sy * sp * cr - cy * sr
        euler[:, 2, 0] = -sp
        euler[:, 2, 1] = cp * sr
        euler[:, 2, 2] = cp * cr
        base = _rz(self.base_yaw)
        rot = euler @ base

        u1, u2 = dpitch, cp * dyaw
        omega_e = np.stack([-sp * dyaw + droll * np.ones_like(ts),
                            cr * u1 + sr * u2,
                            -sr * u1 + cr * u2], axis=1)
        omega_b = omega_e @ base  # base.T @ w per row
        return rot, p, v, omega_b, a


class _SmoothSpeedProfile:
    """Piecewise speed factor s(t) in [0, 1] with quintic-smoothstep blends."""

    def __init__(self, segments):
        # segments: list of (duration, s_start, s_end)
        self.durations = np.array([d for d, _, _ in segments])
        self.starts = np.array([a for _, a, _ in segments])
        self.ends = np.array([b for _, _, b in segments])
        self.t_edges = np.concatenate([[0.0], np.cumsum(self.durations)])
        taus = [0.0]
        for k, (d, a, b) in enumerate(segments):
            taus.append(taus[-1] + self._seg_integral(k, d))
        self.tau_edges = np.array(taus)

    @staticmethod
    def _q(x):
        return x**3 * (10.0 + x * (-15.0 + 6.0 * x))

    @staticmethod
    def _dq(x):
        return x**2 * (30.0 + x * (-60.0 + 30.0 * x))

    @staticmethod
    def _iq(x):
        # integral of _q from 0 to x
        return x**4 * (2.5 + x * (-3.0 + x))

    def _seg_integral(self, k, u):
        d, a, b = self.durations[k], self.starts[k], self.ends[k]
        if a == b:
            return a * u
        return a * u + (b - a) * d * self._iq(u / d)

    def _segments_of(self, t):
        t = np.asarray(t, dtype=float)
        k = np.clip(np.searchsorted(self.t_edges, t, side="right") - 1,
                    0, len(self.durations) - 1)
        u = np.clip(t - self.t_edges[k], 0.0, self.durations[k])
        return k, u

    def value(self, t):
        t = np.asarray(t, dtype=float)
        k, u = self._segments_of(t)
        a, b, d = self.starts[k], self.ends[k], self.durations[k]
        out = np.where(a == b, a, a + (b - a) * self._q(u / d))
        out = np.where(t <= 0.0, self.starts[0], out)
        out = np.where(t >= self.t_edges[-1], self.ends[-1], out)
        return out if out.ndim else float(out)

    def rate(self, t):
        t = np.asarray(t, dtype=float)
        k, u = self._segments_of(t)
        a, b, d = self.starts[k], self.ends[k], self.durations[k]
        out = np.where(a == b, 0.0, (b - a) * self._dq(u / d) / d)
        out = np.where((t <= 0.0) | (t >= self.t_edges[-1]), 0.0, out)
        return out if out.ndim else float(out)

    def integral(self, t):
        t = np.asarray(t, dtype=float)
        k, u = self._segments_of(t)
        a, b, d = self.starts[k], self.ends[k], self.durations[k]
        seg = np.where(a == b, a * u, a * u + (b - a) * d * self._iq(u / d))
        out = self.tau_edges[k] + seg
        out = np.where(t <= 0.0, self.starts[0] * t, out)
        out = np.where(t >= self.t_edges[-1],
                       self.tau_edges[-1] + self.ends[-1] * (t - self.t_edges[-1]), out)
        return out if out.ndim else float(out)


class Standstill:
    """Base trajectory driven through a smooth time warp: motion, a complete
    rest segment, then motion again.  During rest, velocity and body rate are
    exactly zero and the pose is constant."""

    def __init__(self, base=None, motion_s=60.0, rest_s=30.0, blend_s=4.0,
                 tail_motion_s=30.0):
        self.base = base if base is not None else WavyCircle()
        self.rest_start = motion_s
        self.rest_end = motion_s + rest_s
        self.profile = _SmoothSpeedProfile([
            (motion_s - blend_s, 1.0, 1.0),
            (blend_s, 1.0, 0.0),
            (rest_s, 0.0, 0.0),
            (blend_s, 0.0, 1.0),
            (max(tail_motion_s - blend_s, 1.0), 1.0, 1.0),
        ])

    @property
    def span(self):
        return (-np.inf, np.inf)

    def evaluate(self, t: float) -> TrajectorySample:
        tau = self.profile.integral(t)
        s = self.profile.value(t)
        sdot = self.profile.rate(t)
        b = self.base.evaluate(tau)
        return TrajectorySample(pose=b.pose,
                                v_w=b.v_w * s,
                                omega_b=b.omega_b * s,
                                a_w=b.a_w * s * s + b.v_w * sdot)

    def evaluate_many(self, ts: np.ndarray):
        ts = np.asarray(ts, dtype=float)
        tau = self.profile.integral(ts)
        s = self.profile.value(ts)
        sdot = self.profile.rate(ts)
        rot, p, v, w, a = self.base.evaluate_many(tau)
        return (rot, p, v * s[:, None], w * s[:, None],
                a * (s * s)[:, None] + v * sdot[:, None])


# ---------------------------------------------------------------------------
# B-spline pose model


def _basis_and_derivative(knots, degree, i, t):
    """Nonzero B-spline basis values and first derivatives at t.

    i is the knot interval with knots[i] <= t < knots[i+1]; returns values for
    controls i-degree .. i (Cox-de Boor, NURBS-book style).
    """
    left = np.empty(degree + 1)
    right = np.empty(degree + 1)
    ndu = np.zeros((degree + 1, degree + 1))
    ndu[0, 0] = 1.0
    for j in range(1, degree + 1):
        left[j] = t - knots[i + 1 - j]
        right[j] = knots[i + j] - t
        saved = 0.0
        for r in range(j):
            denom = right[r + 1] + left[j - r]
            temp = ndu[r, j - 1] / denom
            ndu[r, j] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        ndu[j, j] = saved
    values = ndu[:, degree].copy()
    deriv = np.zeros(degree + 1)
    for r in range(degree + 1):
        # first derivative from the degree-1 basis
        d = 0.0
        if r > 0:
            d += ndu[r - 1, degree - 1] / (knots[i + r] - knots[i + r - degree])
        if r < degree:
            d -= ndu[r, degree - 1] / (knots[i + r + 1] - knots[i + r + 1 - degree])
        deriv[r] = degree * d
    return values, deriv


class So3CumulativeSpline:
    """Cumulative B-spline on SO(3): R(t) = Q_{j0} prod_j exp(Btilde_j O_j)."""

    def __init__(self, knots, controls, degree):
        self.knots = np.asarray(knots, dtype=float)
        self.controls = list(controls)
        self.degree = degree
        self._omegas = [log_so3(self.controls[j - 1].T @ self.controls[j])
                        for j in range(1, len(self.controls))]

    def refresh_increments(self):
        self._omegas = [log_so3(self.controls[j - 1].T @ self.controls[j])
                        for j in range(1, len(self.controls))]

    def _interval(self, t):
        d = self.degree
        i = int(np.searchsorted(self.knots, t, side="right")) - 1
        return int(np.clip(i, d, len(self.knots) - d - 2))

    def evaluate(self, t):
        """(R_WB, omega_B) at t."""
        d = self.degree
        i = self._interval(t)
        b, db = _basis_and_derivative(self.knots, d, i, t)
        j0 = i - d
        # cumulative basis over active controls j0..j0+d
        btil = np.cumsum(b[::-1])[::-1]
        dbtil = np.cumsum(db[::-1])[::-1]
        rot = self.controls[j0].copy()
        factors = []
        for m in range(1, d + 1):
            j = j0 + m
            fac = exp_so3(btil[m] * self._omegas[j - 1])
            factors.append(fac)
            rot = rot @ fac
        omega = np.zeros(3)
        suffix = np.eye(3)
        for m in range(d, 0, -1):
            suffix = factors[m - 1] @ suffix
            omega += dbtil[m] * (suffix.T @ self._omegas[j0 + m - 1])
        return rot, omega


class SplinePose:
    """Degree-5 B-spline position plus a cumulative degree-5 SO(3) spline."""

    def __init__(self, pos_spline, rot_spline, t0, t1):
        self.pos = pos_spline
        self.vel = pos_spline.derivative(1)
        self.acc = pos_spline.derivative(2)
        self.rot = rot_spline
        self.t0 = t0
        self.t1 = t1

    @property
    def span(self):
        return (self.t0, self.t1)

    def evaluate(self, t: float) -> TrajectorySample:
        if t < self.t0 - 1e-9 or t > self.t1 + 1e-9:
            raise OutOfSpanError(f"t={t} outside spline span [{self.t0}, {self.t1}]")
        t = float(np.clip(t, self.t0, self.t1))
        rot, omega = self.rot.evaluate(t)
        return TrajectorySample(pose=Transform(rot, self.pos(t)),
                                v_w=self.vel(t), omega_b=omega, a_w=self.acc(t))

    def evaluate_many(self, ts: np.ndarray):
        ts = np.asarray(ts, dtype=float)
        if ts.size and (ts.min() < self.t0 - 1e-9 or ts.max() > self.t1 + 1e-9):
            raise OutOfSpanError(f"times outside spline span [{self.t0}, {self.t1}]")
        tc = np.clip(ts, self.t0, self.t1)
        rot = np.empty((ts.size, 3, 3))
        omega = np.empty((ts.size, 3))
        for i, t in enumerate(tc):
            rot[i], omega[i] = self.rot.evaluate(t)
        return rot, self.pos(tc), self.vel(tc), omega, self.acc(tc)


def _interpolation_knots(times, degree):
    """De Boor averaging knot vector for interpolation at the sample times."""
    n = len(times)
    interior = [np.mean(times[j + 1:j + degree + 1]) for j in range(n - degree - 1)]
    return np.concatenate([[times[0]] * (degree + 1), interior,
                           [times[-1]] * (degree + 1)])


def _greville(knots, degree, n):
    return np.array([np.mean(knots[j + 1:j + degree + 1]) for j in range(n)])


def _slerp_at(times, rotations, t):
    i = int(np.clip(np.searchsorted(times, t) - 1, 0, len(times) - 2))
    h = (t - times[i]) / (times[i + 1] - times[i])
    h = float(np.clip(h, 0.0, 1.0))
    delta = log_so3(rotations[i].T @ rotations[i + 1])
    return rotations[i] @ exp_so3(h * delta)


def fit_spline(times, poses, degree=5, max_iter=60, tol_rad=1e-10):
    """Fit position and cumulative-rotation degree-5 B-splines to pose samples.

    The rotation controls are refined by fixed-point residual feedback until
    the spline interpolates the sample rotations.
    """
    times = np.asarray(times, dtype=float)
    if times.size < degree + 1:
        raise DegenerateSamplesError(f"need at least {degree + 1} samples, got {times.size}")
    if np.any(np.diff(times) <= 0):
        raise DegenerateSamplesError("sample times must be strictly increasing")

    positions = np.array([p.translation for p in poses])
    rotations = [p.rotation for p in poses]
    pos_spline = make_interp_spline(times, positions, k=degree)

    knots = _interpolation_knots(times, degree)
    n_controls = len(knots) - degree - 1
    greville = _greville(knots, degree, n_controls)
    controls = [_slerp_at(times, rotations, g) for g in greville]
    rot_spline = So3CumulativeSpline(knots, controls, degree)

    for _ in range(max_iter):
        residuals = np.array([log_so3(rot_spline.evaluate(t)[0].T @ r)
                              for t, r in zip(times, rotations)])
        worst = np.linalg.norm(residuals, axis=1).max()
        if worst < tol_rad:
            break
        for j in range(n_controls):
            g = greville[j]
            i = int(np.clip(np.searchsorted(times, g) - 1, 0, len(times) - 2))
            h = float(np.clip((g - times[i]) / (times[i + 1] - times[i]), 0.0, 1.0))
            corr = (1 - h) * residuals[i] + h * residuals[i + 1]
            rot_spline.controls[j] = rot_spline.controls[j] @ exp_so3(corr)
        rot_spline.refresh_increments()

    return SplinePose(pos_spline, rot_spline, times[0], times[-1])


def figure_eight_samples(duration=60.0, rate=10.0, half_span=6.0, height=1.5,
                         z_amplitude=0.6, cycle_s=24.0,
                         pitch_amplitude=0.15, roll_amplitude=0.12):
    """Pose samples tracing a figure-8 with heading along the path."""
    ts = np.arange(0.0, duration + 1e-9, 1.0 / rate)
    poses = []
    w = 2.0 * np.pi / cycle_s
    for t in ts:
        u = w * t
        p = np.array([half_span * np.sin(u),
                      half_span * np.sin(u) * np.cos(u),
                      height + z_amplitude * np.sin(2.0 * u + 0.3)])
        vx = half_span * w * np.cos(u)
        vy = half_span * w * np.cos(2.0 * u)
        yaw = np.arctan2(vy, vx)
        rot = (_rz(yaw) @ _ry(pitch_amplitude * np.sin(0.9 * u))
               @ _rx(roll_amplitude * np.sin(1.3 * u + 0.5)) @ _rz(np.pi / 2.0))
        poses.append(Transform(rot, p))
    return ts, poses
