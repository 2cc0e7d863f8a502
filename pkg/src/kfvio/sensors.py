"""IMU intrinsic model, camera projection models, and timing relations.

Camera intrinsic vectors are model-tagged:
  pinhole_radtan : [fx, fy, cx, cy, k1, k2, p1, p2]
  kannala_brandt : [fx, fy, cx, cy, k1, k2, k3, k4]
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Transform

PINHOLE_RADTAN = "pinhole_radtan"
KANNALA_BRANDT = "kannala_brandt"

# Depth below which pinhole projection is rejected; KB accepts rays up to
# ~97.5 degrees off axis.
EPS_DEPTH = 1e-3
KB_MAX_THETA = np.deg2rad(97.5)

# Inverse-depth values in (-RHO_CLAMP, 0] are treated as points at infinity.
RHO_CLAMP = 1e-6


class BehindCameraError(ValueError):
    """Point does not satisfy the projection precondition."""


class NonPositiveDepthError(ValueError):
    """Anchored landmark has inverse depth below the near-infinity tolerance."""


@dataclass(frozen=True)
class ImuParams:
    """Calibratable IMU parameters of the measurement maps.

    M_a is lower triangular (scale + misalignment of the accelerometer);
    M_g and T_s are full 3x3 for generality.
    """

    b_g: np.ndarray = field(default_factory=lambda: np.zeros(3))      # rad/s
    b_a: np.ndarray = field(default_factory=lambda: np.zeros(3))      # m/s^2
    M_g: np.ndarray = field(default_factory=lambda: np.eye(3))
    T_s: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))  # rad/s per m/s^2
    M_a: np.ndarray = field(default_factory=lambda: np.eye(3))         # lower triangular
    gravity: float = 9.80665                                           # m/s^2

    def __post_init__(self):
        upper = np.triu(self.M_a, k=1)
        if np.any(upper != 0.0):
            raise ValueError("M_a must be lower triangular (upper entries exactly 0)")

    def gravity_w(self) -> np.ndarray:
        return np.array([0.0, 0.0, -self.gravity])


@dataclass(frozen=True)
class CameraParams:
    """One camera: extrinsics, intrinsics, timing, geometry of the sensor."""

    T_BC: Transform
    model: str = PINHOLE_RADTAN
    intrinsics: np.ndarray = field(default_factory=lambda: np.array(
        [350.0, 360.0, 378.0, 238.0, 0.0, 0.0, 0.0, 0.0]))
    t_d: float = 0.0          # s, camera clock offset to the IMU clock
    t_r: float = 0.0          # s, first-to-last-row readout interval
    width: int = 752
    height: int = 480
    sigma_px: float = 1.0

    def __post_init__(self):
        if self.model not in (PINHOLE_RADTAN, KANNALA_BRANDT):
            raise ValueError(f"unknown camera model {self.model!r}")
        if self.intrinsics[0] <= 0 or self.intrinsics[1] <= 0:
            raise ValueError("focal lengths must be positive")
        if self.t_r < 0:
            raise ValueError("readout time must be nonnegative")


@dataclass(frozen=True)
class PixelObservation:
    z: np.ndarray            # [u, v] px
    cam: int                 # camera index within the bundle
    bundle: int              # frame bundle index
    sigma: float = 1.0       # px

    @property
    def row(self) -> float:
        return float(self.z[1])


def calibrate_accel(a_m: np.ndarray, params: ImuParams) -> np.ndarray:
    """Specific force in {B} from a raw accelerometer reading."""
    return params.M_a @ (a_m - params.b_a)


def calibrate_gyro(omega_m: np.ndarray, a_m: np.ndarray, params: ImuParams) -> np.ndarray:
    """Angular rate of {B} from raw gyro and accel readings (g-sensitivity corrected)."""
    return params.M_g @ (omega_m - params.b_g) - params.M_g @ (params.T_s @ (a_m - params.b_a))


def state_epoch(t_raw: float, t_d_estimate: float) -> float:
    """IMU-clock epoch assigned to a bundle; frozen at clone time."""
    return t_raw + t_d_estimate


def feature_time(v: float, h: float, t_jk: float, t_r: float) -> float:
    """Observation time of an image row, with the central row as reference epoch."""
    return t_jk + (v / h - 0.5) * t_r


# ---------------------------------------------------------------------------
# projection


def _radtan_distort(g1: float, g2: float, k1, k2, p1, p2):
    r2 = g1 * g1 + g2 * g2
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    x = g1 * radial + 2.0 * p1 * g1 * g2 + p2 * (r2 + 2.0 * g1 * g1)
    y = g2 * radial + p1 * (r2 + 2.0 * g2 * g2) + 2.0 * p2 * g1 * g2
    return x, y, r2, radial


def project(p_c: np.ndarray, params: CameraParams) -> np.ndarray:
    """Pixel coordinates of a camera-frame point (scale invariant in p_c)."""
    fx, fy, cx, cy = params.intrinsics[:4]
    x, y, z = p_c
    if params.model == PINHOLE_RADTAN:
        if z <= EPS_DEPTH * max(1.0, abs(x), abs(y)):
            raise BehindCameraError(f"depth {z} behind pinhole camera")
        k1, k2, p1, p2 = params.intrinsics[4:]
        dx, dy, _, _ = _radtan_distort(x / z, y / z, k1, k2, p1, p2)
        return np.array([fx * dx + cx, fy * dy + cy])
    # Kannala-Brandt
    rho = np.hypot(x, y)
    theta = np.arctan2(rho, z)
    if theta > KB_MAX_THETA:
        raise BehindCameraError(f"ray angle {np.degrees(theta):.1f} deg beyond fisheye limit")
    k1, k2, k3, k4 = params.intrinsics[4:]
    t2 = theta * theta
    r_d = theta * (1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4))))
    if rho < 1e-12:
        return np.array([cx, cy])
    s = r_d / rho
    return np.array([fx * s * x + cx, fy * s * y + cy])


def project_jacobians(p_c: np.ndarray, params: CameraParams):
    """(z, dz/dp_c 2x3, dz/dintrinsics 2x8) with analytic derivatives."""
    fx, fy, cx, cy = params.intrinsics[:4]
    x, y, z = p_c
    if params.model == PINHOLE_RADTAN:
        if z <= EPS_DEPTH * max(1.0, abs(x), abs(y)):
            raise BehindCameraError(f"depth {z} behind pinhole camera")
        k1, k2, p1, p2 = params.intrinsics[4:]
        g1, g2 = x / z, y / z
        dx, dy, r2, radial = _radtan_distort(g1, g2, k1, k2, p1, p2)
        zpx = np.array([fx * dx + cx, fy * dy + cy])

        dr = k1 + 2.0 * k2 * r2  # d(radial)/d(r2)
        ddx_dg1 = radial + 2.0 * g1 * g1 * dr + 2.0 * p1 * g2 + 6.0 * p2 * g1
        ddx_dg2 = 2.0 * g1 * g2 * dr + 2.0 * p1 * g1 + 2.0 * p2 * g2
        ddy_dg1 = ddx_dg2
        ddy_dg2 = radial + 2.0 * g2 * g2 * dr + 6.0 * p1 * g2 + 2.0 * p2 * g1
        d_dist = np.array([[fx * ddx_dg1, fx * ddx_dg2],
                           [fy * ddy_dg1, fy * ddy_dg2]])
        dg_dp = np.array([[1.0 / z, 0.0, -x / (z * z)],
                          [0.0, 1.0 / z, -y / (z * z)]])
        dz_dp = d_dist @ dg_dp

        r4 = r2 * r2
        dz_di = np.array([
            [dx, 0.0, 1.0, 0.0, fx * g1 * r2, fx * g1 * r4,
             fx * 2.0 * g1 * g2, fx * (r2 + 2.0 * g1 * g1)],
            [0.0, dy, 0.0, 1.0, fy * g2 * r2, fy * g2 * r4,
             fy * (r2 + 2.0 * g2 * g2), fy * 2.0 * g1 * g2],
        ])
        return zpx, dz_dp, dz_di

    # Kannala-Brandt
    k1, k2, k3, k4 = params.intrinsics[4:]
    rho = np.hypot(x, y)
    theta = np.arctan2(rho, z)
    if theta > KB_MAX_THETA:
        raise BehindCameraError(f"ray angle {np.degrees(theta):.1f} deg beyond fisheye limit")
    t2 = theta * theta
    r_d = theta * (1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4))))
    r_dp = 1.0 + t2 * (3.0 * k1 + t2 * (5.0 * k2 + t2 * (7.0 * k3 + t2 * 9.0 * k4)))
    if rho < 1e-9:
        # On-axis limit: s -> 1/z, behaves like an undistorted pinhole.
        zpx = np.array([fx * x / z + cx, fy * y / z + cy])
        dz_dp = np.array([[fx / z, 0.0, -fx * x / (z * z)],
                          [0.0, fy / z, -fy * y / (z * z)]])
        dz_di = np.zeros((2, 8))
        dz_di[0, 0] = x / z
        dz_di[1, 1] = y / z
        dz_di[0, 2] = 1.0
        dz_di[1, 3] = 1.0
        return zpx, dz_dp, dz_di

    n2 = rho * rho + z * z
    s = r_d / rho
    zpx = np.array([fx * s * x + cx, fy * s * y + cy])

    dtheta_drho = z / n2
    dtheta_dz = -rho / n2
    ds_drho = (r_dp * dtheta_drho - s) / rho
    ds_dz = r_dp * dtheta_dz / rho
    drho = np.array([x / rho, y / rho])
    dz_dp = np.array([
        [fx * (s + x * ds_drho * drho[0]), fx * x * ds_drho * drho[1], fx * x * ds_dz],
        [fy * y * ds_drho * drho[0], fy * (s + y * ds_drho * drho[1]), fy * y * ds_dz],
    ])

    t3 = t2 * theta
    powers = np.array([t3, t3 * t2, t3 * t2 * t2, t3 * t2 * t2 * t2]) / rho
    dz_di = np.zeros((2, 8))
    dz_di[0, 0] = s * x
    dz_di[1, 1] = s * y
    dz_di[0, 2] = 1.0
    dz_di[1, 3] = 1.0
    dz_di[0, 4:] = fx * x * powers
    dz_di[1, 4:] = fy * y * powers
    return zpx, dz_dp, dz_di


def unproject(z: np.ndarray, params: CameraParams,
              max_iter: int = 50, tol_px: float = 1e-10) -> np.ndarray:
    """Normalized ray [g1, g2, 1] whose projection is z, via iterative undistortion."""
    fx, fy, cx, cy = params.intrinsics[:4]
    m = np.array([(z[0] - cx) / fx, (z[1] - cy) / fy])
    if params.model == PINHOLE_RADTAN:
        k1, k2, p1, p2 = params.intrinsics[4:]
        g = m.copy()
        f_scale = max(fx, fy)
        for _ in range(max_iter):
            dx, dy, r2, radial = _radtan_distort(g[0], g[1], k1, k2, p1, p2)
            delta = np.array([dx, dy]) - g * radial
            g_new = (m - delta) / radial
            if np.linalg.norm(g_new - g) * f_scale < tol_px:
                g = g_new
                break
            g = g_new
        return np.array([g[0], g[1], 1.0])
    # Kannala-Brandt: invert the odd polynomial r_d(theta) by Newton.
    k1, k2, k3, k4 = params.intrinsics[4:]
    r_d = np.linalg.norm(m)
    if r_d < 1e-12:
        return np.array([0.0, 0.0, 1.0])
    theta = r_d
    for _ in range(max_iter):
        t2 = theta * theta
        f = theta * (1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4)))) - r_d
        fp = 1.0 + t2 * (3.0 * k1 + t2 * (5.0 * k2 + t2 * (7.0 * k3 + t2 * 9.0 * k4)))
        step = f / fp
        theta -= step
        if abs(step) < 1e-14:
            break
    direction = m / r_d
    tan_theta = np.tan(theta)
    return np.array([direction[0] * tan_theta, direction[1] * tan_theta, 1.0])


# ---------------------------------------------------------------------------
# reprojection


def reproject_world(p_w_h: np.ndarray, T_WB: Transform, cam: CameraParams) -> np.ndarray:
    """Project a homogeneous world point [x, y, z, w] at the given body pose."""
    p_w_h = np.asarray(p_w_h, dtype=float)
    T_CW = cam.T_BC.inverse().compose(T_WB.inverse())
    p_c = T_CW.rotation @ p_w_h[:3] + p_w_h[3] * T_CW.translation
    return project(p_c, cam)


def anchored_point_in_target(lm: np.ndarray, T_WB_anchor: Transform, cam_anchor: CameraParams,
                             T_WB_target: Transform, cam_target: CameraParams) -> np.ndarray:
    """Camera-frame direction of an anchored landmark [alpha, beta, rho].

    Uses the homogeneous form [alpha, beta, 1, rho], so rho -> 0 (infinity)
    stays finite; the result is the true point scaled by rho.
    """
    alpha, beta, rho = lm
    if rho < -RHO_CLAMP:
        raise NonPositiveDepthError(f"inverse depth {rho} below near-infinity tolerance")
    rho = max(rho, 0.0)
    chain = (cam_target.T_BC.inverse()
             .compose(T_WB_target.inverse())
             .compose(T_WB_anchor)
             .compose(cam_anchor.T_BC))
    return chain.rotation @ np.array([alpha, beta, 1.0]) + rho * chain.translation


def reproject_anchored(lm: np.ndarray, T_WB_anchor: Transform, cam_anchor: CameraParams,
                       T_WB_target: Transform, cam_target: CameraParams) -> np.ndarray:
    """Project an anchored inverse-depth landmark into the target camera."""
    return project(anchored_point_in_target(lm, T_WB_anchor, cam_anchor,
                                            T_WB_target, cam_target), cam_target)


# ---------------------------------------------------------------------------
# flat parameter naming, shared by truth files, estimate output and evaluation

MA_LOWER_INDEX = [(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)]

INTRINSIC_NAMES = ["fx", "fy", "cx", "cy", "d1", "d2", "d3", "d4"]


def imu_param_items(imu: ImuParams) -> list[tuple[str, float]]:
    items = [(f"bg_{ax}", imu.b_g[i]) for i, ax in enumerate("xyz")]
    items += [(f"ba_{ax}", imu.b_a[i]) for i, ax in enumerate("xyz")]
    items += [(f"Mg_{i + 1}{j + 1}", imu.M_g[i, j]) for i in range(3) for j in range(3)]
    items += [(f"Ts_{i + 1}{j + 1}", imu.T_s[i, j]) for i in range(3) for j in range(3)]
    items += [(f"Ma_{i + 1}{j + 1}", imu.M_a[i, j]) for i, j in MA_LOWER_INDEX]
    return [(n, float(v)) for n, v in items]


def cam_param_items(k: int, cam: CameraParams) -> list[tuple[str, float]]:
    from .geometry import rot_to_quat
    items = [(f"cam{k}_p_{ax}", cam.T_BC.translation[i]) for i, ax in enumerate("xyz")]
    q = rot_to_quat(cam.T_BC.rotation)
    items += [(f"cam{k}_q_{ax}", q[i]) for i, ax in enumerate("wxyz")]
    items += [(f"cam{k}_{n}", cam.intrinsics[i]) for i, n in enumerate(INTRINSIC_NAMES)]
    items += [(f"cam{k}_td", cam.t_d), (f"cam{k}_tr", cam.t_r)]
    return [(n, float(v)) for n, v in items]


def imu_error_names() -> list[str]:
    """Error-state scalar names of the IMU parameter block (24 entries)."""
    names = [f"bg_{ax}" for ax in "xyz"] + [f"ba_{ax}" for ax in "xyz"]
    names += [f"Mg_{i + 1}{j + 1}" for i in range(3) for j in range(3)]
    names += [f"Ts_{i + 1}{j + 1}" for i in range(3) for j in range(3)]
    names += [f"Ma_{i + 1}{j + 1}" for i, j in MA_LOWER_INDEX]
    return names


def cam_error_names(k: int) -> list[str]:
    """Error-state scalar names of one camera block (16 entries)."""
    names = [f"cam{k}_p_{ax}" for ax in "xyz"] + [f"cam{k}_theta_{ax}" for ax in "xyz"]
    names += [f"cam{k}_{n}" for n in INTRINSIC_NAMES]
    names += [f"cam{k}_td", f"cam{k}_tr"]
    return names
