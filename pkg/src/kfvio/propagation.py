"""IMU strapdown propagation of navigation state and covariance, forward and
backward in time, with the Jacobians the filter and rolling-shutter
reprojection need.

Error-state order used by every Jacobian here: [dp, dtheta, dv, db_g, db_a]
(15 dims).  Sensitivities of the propagated navigation error to the IMU
intrinsic matrices (M_g 9, T_s 9, M_a lower-triangular 6) are returned as a
separate 9x24 block so the filter can couple them into the joint covariance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .geometry import NavState, exp_so3, right_jacobian_so3, skew
from .sensors import ImuParams, calibrate_accel, calibrate_gyro

PARAM_SENS_DIM = 24  # vec(M_g) 9 + vec(T_s) 9 + lower(M_a) 6


class InsufficientImuDataError(ValueError):
    """IMU buffer does not cover the requested interval."""


@dataclass(frozen=True)
class ImuReading:
    t: float
    omega_m: np.ndarray   # rad/s
    a_m: np.ndarray       # m/s^2


class ImuBuffer:
    """Time-sorted IMU samples with interpolation at arbitrary epochs.

    Linear interpolation at interval endpoints; extrapolation allowed up to
    one nominal sample period past either end.
    """

    def __init__(self, t: np.ndarray, omega: np.ndarray, accel: np.ndarray):
        self.t = np.asarray(t, dtype=float)
        self.omega = np.asarray(omega, dtype=float)
        self.accel = np.asarray(accel, dtype=float)
        if self.t.size >= 2:
            if np.any(np.diff(self.t) <= 0):
                raise ValueError("IMU timestamps must be strictly increasing")
            self.period = float(np.median(np.diff(self.t)))
        else:
            self.period = 0.0

    @classmethod
    def from_readings(cls, readings) -> "ImuBuffer":
        return cls(np.array([r.t for r in readings]),
                   np.array([r.omega_m for r in readings]),
                   np.array([r.a_m for r in readings]))

    def __len__(self):
        return self.t.size

    def sample(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Raw (omega_m, a_m) at time t; clamped extrapolation within one period."""
        if self.t.size == 0:
            raise InsufficientImuDataError("empty IMU buffer")
        if t < self.t[0] - self.period - 1e-9 or t > self.t[-1] + self.period + 1e-9:
            raise InsufficientImuDataError(
                f"time {t} outside buffer [{self.t[0]}, {self.t[-1]}] + one period")
        i = np.searchsorted(self.t, t)
        if i == 0:
            return self.omega[0].copy(), self.accel[0].copy()
        if i == self.t.size:
            return self.omega[-1].copy(), self.accel[-1].copy()
        w = (t - self.t[i - 1]) / (self.t[i] - self.t[i - 1])
        return ((1 - w) * self.omega[i - 1] + w * self.omega[i],
                (1 - w) * self.accel[i - 1] + w * self.accel[i])

    def knots(self, t0: float, t1: float) -> np.ndarray:
        """Integration knots from t0 to t1 (either direction): endpoints plus
        the sample times strictly inside the interval."""
        lo, hi = (t0, t1) if t0 <= t1 else (t1, t0)
        if self.t.size == 0:
            raise InsufficientImuDataError("empty IMU buffer")
        if lo < self.t[0] - self.period - 1e-9 or hi > self.t[-1] + self.period + 1e-9:
            raise InsufficientImuDataError(
                f"interval [{lo}, {hi}] not covered by buffer "
                f"[{self.t[0]}, {self.t[-1]}] + one period")
        inner = self.t[(self.t > lo + 1e-12) & (self.t < hi - 1e-12)]
        ts = np.concatenate(([lo], inner, [hi]))
        if t0 > t1:
            ts = ts[::-1]
        return ts


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time noise densities (Table-style units: x/sqrt(Hz))."""

    sigma_g: float = 0.0    # rad/s/sqrt(Hz)
    sigma_a: float = 0.0    # m/s^2/sqrt(Hz)
    sigma_bg: float = 0.0   # rad/s^2/sqrt(Hz)
    sigma_ba: float = 0.0   # m/s^3/sqrt(Hz)


@dataclass
class PropagationResult:
    nav: NavState
    phi: np.ndarray                 # 15x15 over [dp, dtheta, dv, db_g, db_a]
    Q_d: np.ndarray                 # 15x15 discrete process noise
    pose_vel_jacobian: np.ndarray   # 9x9 block d(p,theta,v at t1)/d(p,theta,v at t0)
    param_sensitivity: np.ndarray = field(
        default_factory=lambda: np.zeros((9, PARAM_SENS_DIM)))


def _dmat_rows(u: np.ndarray) -> np.ndarray:
    """d(M @ u)/d(vec M) for row-major vec of a full 3x3 M."""
    d = np.zeros((3, 9))
    d[0, 0:3] = u
    d[1, 3:6] = u
    d[2, 6:9] = u
    return d


def _dmat_lower(u: np.ndarray) -> np.ndarray:
    """d(M @ u)/d(lower entries [m11, m21, m22, m31, m32, m33]) for lower-tri M."""
    d = np.zeros((3, 6))
    d[0, 0] = u[0]
    d[1, 1] = u[0]
    d[1, 2] = u[1]
    d[2, 3] = u[0]
    d[2, 4] = u[1]
    d[2, 5] = u[2]
    return d


def propagate(nav0: NavState, params: ImuParams, buffer: ImuBuffer,
              t0: float, t1: float, noise: ImuNoise | None = None,
              need_jacobians: bool = True,
              need_param_sensitivity: bool = True) -> PropagationResult:
    """Trapezoidal strapdown integration of the IMU kinematics from t0 to t1.

    t1 < t0 integrates backward.  Gravity is [0, 0, -g] in {W}.  The
    orientation is renormalized every step by construction (exp map).
    """
    ts = buffer.knots(t0, t1)
    g_w = params.gravity_w()

    p, rot, v = nav0.p.copy(), nav0.rot.copy(), nav0.v.copy()
    phi = np.eye(15)
    Q = np.zeros((15, 15))
    n_sens = np.zeros((9, PARAM_SENS_DIM))

    w_raw0, a_raw0 = buffer.sample(ts[0])
    w0 = calibrate_gyro(w_raw0, a_raw0, params)
    a0 = calibrate_accel(a_raw0, params)

    for k in range(len(ts) - 1):
        dt = ts[k + 1] - ts[k]
        if dt == 0.0:
            continue
        w_raw1, a_raw1 = buffer.sample(ts[k + 1])
        w1 = calibrate_gyro(w_raw1, a_raw1, params)
        a1 = calibrate_accel(a_raw1, params)

        w_bar = 0.5 * (w0 + w1)
        rot1 = rot @ exp_so3(w_bar * dt)
        v1 = v + 0.5 * dt * (rot @ a0 + rot1 @ a1) + g_w * dt
        p1 = p + 0.5 * dt * (v + v1)

        if need_jacobians:
            amat = rot1 @ right_jacobian_so3(w_bar * dt) * dt
            s0 = skew(rot @ a0)
            s1 = skew(rot1 @ a1)
            r_sum = rot + rot1

            step = np.eye(15)
            phi_t_bg = -amat @ params.M_g
            phi_t_ba = amat @ params.M_g @ params.T_s
            step[3:6, 9:12] = phi_t_bg
            step[3:6, 12:15] = phi_t_ba
            step[6:9, 3:6] = -0.5 * dt * (s0 + s1)
            step[6:9, 9:12] = -0.5 * dt * s1 @ phi_t_bg
            step[6:9, 12:15] = -0.5 * dt * s1 @ phi_t_ba - 0.5 * dt * r_sum @ params.M_a
            step[0:3, 3:6] = 0.5 * dt * step[6:9, 3:6]
            step[0:3, 6:9] = dt * np.eye(3)
            step[0:3, 9:12] = 0.5 * dt * step[6:9, 9:12]
            step[0:3, 12:15] = 0.5 * dt * step[6:9, 12:15]

            if need_param_sensitivity:
                w_raw_bar = 0.5 * (w_raw0 + w_raw1)
                a_raw_bar = 0.5 * (a_raw0 + a_raw1)
                acc_lever = a_raw_bar - params.b_a
                u_g = (w_raw_bar - params.b_g) - params.T_s @ acc_lever
                dw_dmg = _dmat_rows(u_g)
                dw_dts = -params.M_g @ _dmat_rows(acc_lever)
                step_n = np.zeros((9, PARAM_SENS_DIM))
                step_n[3:6, 0:9] = amat @ dw_dmg
                step_n[3:6, 9:18] = amat @ dw_dts
                da0 = _dmat_lower(a_raw0 - params.b_a)
                da1 = _dmat_lower(a_raw1 - params.b_a)
                step_n[6:9, 18:24] = 0.5 * dt * (rot @ da0 + rot1 @ da1)
                step_n[6:9, 0:9] = -0.5 * dt * s1 @ step_n[3:6, 0:9]
                step_n[6:9, 9:18] = -0.5 * dt * s1 @ step_n[3:6, 9:18]
                step_n[0:3] = 0.5 * dt * step_n[6:9]
                n_sens = step[0:9, 0:9] @ n_sens + step_n

            if noise is not None:
                q = np.zeros((15, 15))
                adt = abs(dt)
                am_g = amat @ params.M_g
                am_gts = am_g @ params.T_s
                cm = 0.5 * r_sum @ params.M_a
                q_tt = (noise.sigma_g**2 / adt) * (am_g @ am_g.T) \
                    + (noise.sigma_a**2 / adt) * (am_gts @ am_gts.T)
                q_vv = noise.sigma_a**2 * adt * (cm @ cm.T)
                q_tv = -(noise.sigma_a**2 / adt) * dt * (am_gts @ cm.T)
                q[3:6, 3:6] = q_tt
                q[6:9, 6:9] = q_vv
                q[3:6, 6:9] = q_tv
                q[6:9, 3:6] = q_tv.T
                q[0:3, 0:3] = 0.25 * dt * dt * q_vv
                q[0:3, 6:9] = 0.5 * dt * q_vv
                q[6:9, 0:3] = q[0:3, 6:9].T
                q[0:3, 3:6] = 0.5 * dt * q_tv.T
                q[3:6, 0:3] = q[0:3, 3:6].T
                q[9:12, 9:12] = noise.sigma_bg**2 * adt * np.eye(3)
                q[12:15, 12:15] = noise.sigma_ba**2 * adt * np.eye(3)
                Q = step @ Q @ step.T + q

            phi = step @ phi

        p, rot, v = p1, rot1, v1
        w0, a0 = w1, a1
        w_raw0, a_raw0 = w_raw1, a_raw1

    nav1 = NavState(p=p, rot=rot, v=v, t=t1)
    return PropagationResult(nav=nav1, phi=phi, Q_d=Q,
                             pose_vel_jacobian=phi[0:9, 0:9].copy(),
                             param_sensitivity=n_sens)


def propagate_covariance(P0: np.ndarray, result: PropagationResult) -> np.ndarray:
    """Phi P Phi^T + Q_d, symmetrized."""
    P1 = result.phi @ P0 @ result.phi.T + result.Q_d
    return 0.5 * (P1 + P1.T)


@dataclass
class RsPoseJacobians:
    nav: NavState                    # at the feature time
    pose_jacobian: np.ndarray        # 6x9: d(p, theta at t_feat)/d(p, theta, v at t_j)
    d_pose_d_td: np.ndarray          # 6: [dp/dt, dtheta/dt] at t_feat
    d_pose_d_tr: np.ndarray          # 6: same scaled by the row factor of the readout map
    omega_body: np.ndarray           # fitted angular rate at t_feat


def rs_pose_sequence(nav0: NavState, params: ImuParams, buffer: ImuBuffer,
                     targets) -> list:
    """Incremental propagation from nav0.t through monotone target times (all
    on one side of nav0.t); returns (nav, 9x9 pose/velocity Jacobian w.r.t.
    nav0, calibrated angular rate) per target, sharing the integration work
    between nearby targets.

    Bias/intrinsic sensitivities over these short spans are ignored (their
    first-order terms are bounded by the readout interval), so only the
    9x9 pose/velocity block is accumulated.
    """
    targets = np.asarray(targets, dtype=float)
    if targets.size == 0:
        return []
    t0 = nav0.t
    backward = targets[-1] < t0
    lo = min(t0, targets.min())
    hi = max(t0, targets.max())
    if buffer.t.size == 0:
        raise InsufficientImuDataError("empty IMU buffer")
    if lo < buffer.t[0] - buffer.period - 1e-9 or hi > buffer.t[-1] + buffer.period + 1e-9:
        raise InsufficientImuDataError(
            f"interval [{lo}, {hi}] not covered by buffer")
    i0 = int(np.searchsorted(buffer.t, lo, side="right"))
    i1 = int(np.searchsorted(buffer.t, hi, side="left"))
    inner = buffer.t[i0:i1]
    knots = np.unique(np.concatenate([[lo, hi], inner, targets, [t0]]))
    if backward:
        knots = knots[::-1]
    # raw readings at every knot (local linear interpolation), then calibrated
    lo_idx = max(min(i0 - 1, buffer.t.size - 2), 0)
    hi_idx = min(max(i1 + 1, lo_idx + 2), buffer.t.size)
    seg_t = buffer.t[lo_idx:hi_idx]
    idx = np.clip(np.searchsorted(seg_t, knots) - 1, 0, seg_t.size - 2)
    denom = seg_t[idx + 1] - seg_t[idx]
    frac = np.clip((knots - seg_t[idx]) / denom, 0.0, 1.0)[:, None]
    w_raw = (1.0 - frac) * buffer.omega[lo_idx + idx] + frac * buffer.omega[lo_idx + idx + 1]
    a_raw = (1.0 - frac) * buffer.accel[lo_idx + idx] + frac * buffer.accel[lo_idx + idx + 1]
    mg_ts = params.M_g @ params.T_s
    w_cal = (w_raw - params.b_g) @ params.M_g.T - (a_raw - params.b_a) @ mg_ts.T
    a_cal = (a_raw - params.b_a) @ params.M_a.T
    g_w = params.gravity_w()

    start = int(np.nonzero(np.isclose(knots, t0, rtol=0.0, atol=1e-12))[0][0])
    target_set = {float(t) for t in targets}
    is_target = np.array([float(t) in target_set for t in knots])
    ps, rots, vs, phis = _sweep_kernel(knots, w_cal, a_cal, g_w,
                                       nav0.p, nav0.rot, nav0.v, start, is_target)
    out = []
    i = 0
    for k in range(start, len(knots)):
        if is_target[k]:
            out.append((NavState(ps[i], rots[i], vs[i], float(knots[k])),
                        phis[i], w_cal[k]))
            i += 1
    return out


@njit(cache=True)
def _sweep_kernel(knots, w_cal, a_cal, g_w, p0, rot0, v0, start, is_target):
    n_out = int(np.sum(is_target[start:]))
    ps = np.empty((n_out, 3))
    rots = np.empty((n_out, 3, 3))
    vs = np.empty((n_out, 3))
    phis = np.empty((n_out, 9, 9))
    p = p0.copy()
    rot = rot0.copy()
    v = v0.copy()
    phi = np.eye(9)
    i = 0
    if is_target[start]:
        ps[i] = p
        rots[i] = rot
        vs[i] = v
        phis[i] = phi
        i += 1
    for k in range(start, len(knots) - 1):
        dt = knots[k + 1] - knots[k]
        w_bar = 0.5 * dt * (w_cal[k] + w_cal[k + 1])
        # Rodrigues with small-angle series
        angle2 = w_bar[0]**2 + w_bar[1]**2 + w_bar[2]**2
        kmat = np.array([[0.0, -w_bar[2], w_bar[1]],
                         [w_bar[2], 0.0, -w_bar[0]],
                         [-w_bar[1], w_bar[0], 0.0]])
        if angle2 < 1e-14:
            e = np.eye(3) + (1.0 - angle2 / 6.0) * kmat \
                + (0.5 - angle2 / 24.0) * (kmat @ kmat)
        else:
            angle = np.sqrt(angle2)
            e = np.eye(3) + (np.sin(angle) / angle) * kmat \
                + ((1.0 - np.cos(angle)) / angle2) * (kmat @ kmat)
        rot1 = rot @ e
        ra0 = rot @ a_cal[k]
        ra1 = rot1 @ a_cal[k + 1]
        v1 = v + 0.5 * dt * (ra0 + ra1) + g_w * dt
        p1 = p + 0.5 * dt * (v + v1)

        step = np.eye(9)
        ra = ra0 + ra1
        svt = -0.5 * dt * np.array([[0.0, -ra[2], ra[1]],
                                    [ra[2], 0.0, -ra[0]],
                                    [-ra[1], ra[0], 0.0]])
        step[6:9, 3:6] = svt
        step[0:3, 3:6] = 0.5 * dt * svt
        step[0, 6] = dt
        step[1, 7] = dt
        step[2, 8] = dt
        phi = step @ phi
        p, rot, v = p1, rot1, v1
        if is_target[k + 1]:
            ps[i] = p
            rots[i] = rot
            vs[i] = v
            phis[i] = phi
            i += 1
    return ps, rots, vs, phis


def rs_pose_jacobians(nav_j: NavState, params: ImuParams, buffer: ImuBuffer,
                      t_feat: float, row_factor: float) -> RsPoseJacobians:
    """Pose at the feature time plus its Jacobians for rolling-shutter updates.

    row_factor is (v/h - 1/2) from the readout timing map, so d/dt_r carries
    it while d/dt_d does not.  Time Jacobians use the propagated velocity and
    the fitted (interpolated, calibrated) angular rate at t_feat.
    """
    res = propagate(nav_j, params, buffer, nav_j.t, t_feat,
                    noise=None, need_jacobians=True, need_param_sensitivity=False)
    w_raw, a_raw = buffer.sample(t_feat)
    omega_body = calibrate_gyro(w_raw, a_raw, params)
    d_td = np.concatenate([res.nav.v, res.nav.rot @ omega_body])
    return RsPoseJacobians(nav=res.nav,
                           pose_jacobian=res.pose_vel_jacobian[0:6, :].copy(),
                           d_pose_d_td=d_td,
                           d_pose_d_tr=row_factor * d_td,
                           omega_body=omega_body)
