"""Keyframe-based sliding-window filter backend with full self-calibration.

Error-state layout (column order of the joint covariance):

    0:9      current navigation [dp, dtheta, dv]
    9:15     IMU biases [db_g, db_a]
    15:39    IMU intrinsics [vec M_g (9), vec T_s (9), lower M_a (6)]
    39+16k   camera k block [dp_BC, dtheta_BC, intrinsics (8), t_d, t_r]
    then     9 per window clone [dp, dtheta, dv], in window order
    then     3 per in-state landmark [alpha, beta, rho]

Clones keep their first (propagated) position/velocity estimates; those are
the linearization points of all position/velocity Jacobian blocks, while
every other block is linearized at the latest estimates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from numba import njit
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import chi2 as chi2_dist

from .geometry import NavState, Transform, exp_so3, skew
from .propagation import (ImuBuffer, ImuNoise, PropagationResult, RsPoseJacobians,
                          propagate, rs_pose_jacobians, rs_pose_sequence)
from .sensors import (MA_LOWER_INDEX, BehindCameraError, CameraParams,
                      ImuParams, calibrate_gyro, feature_time,
                      project_jacobians, state_epoch, unproject)

logger = logging.getLogger(__name__)

NAV_DIM = 9
IMU_BLOCK_END = 39
CAM_BLOCK = 16


class NoImuDataError(ValueError):
    pass


class TriangulationFailure(RuntimeError):
    pass


@lru_cache(maxsize=None)
def _chi2_threshold(confidence: float, dof: int) -> float:
    return float(chi2_dist.ppf(confidence, dof))


@dataclass
class CalibrationFlags:
    extrinsics: bool = True
    intrinsics: bool = True
    td: bool = True
    tr: bool = True
    imu_intrinsics: bool = True
    biases: bool = True


@dataclass
class PriorSigmas:
    """Initial standard deviations of the error state (Table-style defaults)."""

    nav_position: float = 0.05
    nav_attitude: float = 0.05
    nav_velocity: float = 0.05
    bg: float = np.deg2rad(0.57)
    ba: float = 0.02
    mg: float = 0.005
    ts: float = 0.005
    ma: float = 0.005
    extrinsic_rot: float = np.deg2rad(0.57)
    extrinsic_trans: float = 0.02
    focal: float = 2.0
    center: float = 2.0
    distortion: float = 0.01
    td: float = 0.005
    tr: float = 0.005


@dataclass
class FilterConfig:
    n_keyframes: int = 5
    n_temporal: int = 5
    landmark_cap: int = 50
    min_track_length: int = 6
    max_landmark_misses: int = 3
    chi2_confidence: float = 0.95
    min_redundant: int = 0              # 0 -> 3 mono, 2 stereo
    min_parallax_rad: float = 1e-3
    allow_far_points: bool = True
    param_process_noise: float = 0.0
    pixel_sigma_px: float = 0.0         # 0 -> each camera's own value (floored)
    noise: ImuNoise = field(default_factory=ImuNoise)
    priors: PriorSigmas = field(default_factory=PriorSigmas)
    calibrate: CalibrationFlags = field(default_factory=CalibrationFlags)


@dataclass
class CloneEntry:
    nav: NavState
    keyframe: bool
    first_p: np.ndarray
    first_v: np.ndarray
    t_raw: list


@dataclass
class LandmarkEntry:
    abr: np.ndarray
    anchor_bundle: int
    anchor_cam: int
    track_id: int
    misses: int = 0


@dataclass
class ObservationJacobian:
    residual: np.ndarray           # (2,), whitened
    h_clone: np.ndarray            # (2, 9) observing clone [dp, dtheta, dv]
    h_anchor: np.ndarray           # (2, 6) anchor clone [dp, dtheta]
    h_cams: dict                   # cam index -> (2, 16) camera block
    h_landmark: np.ndarray         # (2, 3) [alpha, beta, rho]
    clone_bundle: int
    anchor_bundle: int


@njit(cache=True)
def _observation_blocks(rho, gamma, ray_w, r_b, p_b, r_a, p_a_j, r_e, p_e,
                        r_f, p_f_j, v_f_j, pose_jac, omega_body, row_factor):
    """(3, 32) block [clone pose/vel 9 | anchor 6 | landmark 3 |
    target extrinsics 6 | anchor extrinsics 6 | t_d | t_r] of the anchored
    reprojection chain."""
    u_j = ray_w + rho * p_a_j - rho * p_f_j
    ref_rot = r_e.T @ r_f.T
    chain_a = ref_rot @ r_a
    dq = np.empty((3, 32))
    dq_dpose_f = np.empty((3, 6))
    dq_dpose_f[:, 0:3] = -rho * ref_rot
    sk_u = np.array([[0.0, -u_j[2], u_j[1]],
                     [u_j[2], 0.0, -u_j[0]],
                     [-u_j[1], u_j[0], 0.0]])
    dq_dpose_f[:, 3:6] = ref_rot @ sk_u
    dq[:, 0:9] = dq_dpose_f @ pose_jac
    dq[:, 9:12] = rho * ref_rot
    sk_ray = np.array([[0.0, -ray_w[2], ray_w[1]],
                       [ray_w[2], 0.0, -ray_w[0]],
                       [-ray_w[1], ray_w[0], 0.0]])
    dq[:, 12:15] = -ref_rot @ sk_ray
    chain_rot = chain_a @ r_b
    dq[:, 15] = chain_rot[:, 0]
    dq[:, 16] = chain_rot[:, 1]
    dq[:, 17] = r_e.T @ (r_f.T @ (r_a @ p_b + p_a_j - p_f_j) - p_e)
    dq[:, 18:21] = -rho * r_e.T
    s_e = r_f.T @ u_j - rho * p_e
    sk_se = np.array([[0.0, -s_e[2], s_e[1]],
                      [s_e[2], 0.0, -s_e[0]],
                      [-s_e[1], s_e[0], 0.0]])
    dq[:, 21:24] = r_e.T @ sk_se
    dq[:, 24:27] = rho * chain_a
    rbg = r_b @ gamma
    sk_rbg = np.array([[0.0, -rbg[2], rbg[1]],
                       [rbg[2], 0.0, -rbg[0]],
                       [-rbg[1], rbg[0], 0.0]])
    dq[:, 27:30] = -chain_a @ sk_rbg
    d_pose_dt = np.empty(6)
    d_pose_dt[0:3] = v_f_j
    d_pose_dt[3:6] = r_f @ omega_body
    dq[:, 30] = dq_dpose_f @ d_pose_dt
    dq[:, 31] = row_factor * dq[:, 30]
    return dq


def gravity_align_orientation(mean_accel: np.ndarray) -> np.ndarray:
    """Roll/pitch from the mean accelerometer direction, yaw = 0."""
    a = np.asarray(mean_accel, dtype=float)
    norm = np.linalg.norm(a)
    if norm < 1e-9:
        raise NoImuDataError("mean accelerometer signal is zero")
    a = a / norm
    target = np.array([0.0, 0.0, 1.0])
    axis = np.cross(a, target)
    s = np.linalg.norm(axis)
    c = float(np.dot(a, target))
    if s < 1e-12:
        return np.eye(3) if c > 0 else exp_so3([np.pi, 0.0, 0.0])
    angle = np.arctan2(s, c)
    return exp_so3(axis / s * angle)


def initialize_static(accel_samples: np.ndarray, gyro_samples: np.ndarray,
                      gravity: float, static_gyro_threshold: float = 0.02):
    """Zero position/velocity start: orientation aligns gravity; biases from
    averaged readings when the platform looks static, zero otherwise."""
    if accel_samples.size == 0:
        raise NoImuDataError("no accelerometer samples")
    mean_a = accel_samples.mean(axis=0)
    mean_g = gyro_samples.mean(axis=0) if gyro_samples.size else np.zeros(3)
    rot = gravity_align_orientation(mean_a)
    nav = NavState(p=np.zeros(3), rot=rot, v=np.zeros(3), t=0.0)
    if np.linalg.norm(mean_g) < static_gyro_threshold:
        b_g = mean_g.copy()
        b_a = mean_a - rot.T @ np.array([0.0, 0.0, gravity])
    else:
        b_g = np.zeros(3)
        b_a = np.zeros(3)
    return nav, b_g, b_a


def triangulate(observations, anchor_pose: Transform, anchor_cam: CameraParams,
                min_parallax_rad: float = 1e-3, allow_far: bool = True,
                gn_iters: int = 5) -> np.ndarray:
    """Anchored inverse-depth point [alpha, beta, rho] from multiple views.

    observations: list of (T_WB at feature time, CameraParams, pixel).
    Linear midpoint solve over the normalized rays, then Gauss-Newton on the
    reprojection error.  Raises TriangulationFailure on degenerate geometry
    unless the far-point form (rho = 0) is allowed.
    """
    if len(observations) < 2:
        raise TriangulationFailure("need at least two observations")
    origins, dirs = [], []
    for T_WB, cam, z in observations:
        ray_c = unproject(np.asarray(z, dtype=float), cam)
        T_WC = T_WB.compose(cam.T_BC)
        d = T_WC.rotation @ ray_c
        d = d / np.linalg.norm(d)
        origins.append(T_WC.translation)
        dirs.append(d)
    dirs = np.array(dirs)
    origins = np.array(origins)

    cosmax = -1.0
    for i in range(len(dirs)):
        for j in range(i + 1, len(dirs)):
            cosmax = max(cosmax, 1.0 - abs(float(dirs[i] @ dirs[j])))
    parallax = np.sqrt(max(2.0 * cosmax, 0.0))  # ~angle for small angles

    T_CW_anchor = anchor_cam.T_BC.inverse().compose(anchor_pose.inverse())
    if parallax < min_parallax_rad:
        if not allow_far:
            raise TriangulationFailure(f"parallax {parallax:.2e} below threshold")
        d_anchor = T_CW_anchor.rotation @ dirs[0]
        if d_anchor[2] <= 1e-9:
            raise TriangulationFailure("far point behind the anchor camera")
        return np.array([d_anchor[0] / d_anchor[2], d_anchor[1] / d_anchor[2], 0.0])

    a_mat = np.zeros((3, 3))
    b_vec = np.zeros(3)
    for p, d in zip(origins, dirs):
        m = np.eye(3) - np.outer(d, d)
        a_mat += m
        b_vec += m @ p
    try:
        x_w = np.linalg.solve(a_mat, b_vec)
    except np.linalg.LinAlgError:
        raise TriangulationFailure("singular midpoint system")

    p_anchor = T_CW_anchor.apply(x_w)
    if p_anchor[2] <= 1e-6:
        raise TriangulationFailure("triangulated point behind the anchor camera")
    abr = np.array([p_anchor[0] / p_anchor[2], p_anchor[1] / p_anchor[2],
                    1.0 / p_anchor[2]])

    # Gauss-Newton on the anchored reprojection error with poses fixed.
    chains = []
    for T_WB, cam, z in observations:
        chain = (cam.T_BC.inverse().compose(T_WB.inverse())
                 .compose(anchor_pose).compose(anchor_cam.T_BC))
        h = np.column_stack([chain.rotation[:, 0], chain.rotation[:, 1],
                             chain.translation])
        chains.append((chain, h, cam, np.asarray(z, dtype=float)))
    for _ in range(gn_iters):
        ata = np.zeros((3, 3))
        atb = np.zeros(3)
        for chain, h, cam, z in chains:
            q = chain.rotation @ np.array([abr[0], abr[1], 1.0]) + abr[2] * chain.translation
            try:
                zp, dz_dq, _ = project_jacobians(q, cam)
            except BehindCameraError:
                continue
            jac = dz_dq @ h
            res = z - zp
            ata += jac.T @ jac
            atb += jac.T @ res
        try:
            step = np.linalg.solve(ata + 1e-12 * np.eye(3), atb)
        except np.linalg.LinAlgError:
            break
        abr = abr + step
        if np.linalg.norm(step) < 1e-10:
            break
    if abr[2] < 0.0:
        if allow_far and abr[2] > -1e-4:
            abr[2] = 0.0
        else:
            raise TriangulationFailure("refined inverse depth negative")
    return abr


class KeyframeFilter:
    """Single-threaded estimation backend driven bundle by bundle."""

    def __init__(self, config: FilterConfig, nav0: NavState, imu0: ImuParams,
                 cams0: list[CameraParams]):
        self.cfg = config
        self.nav = nav0
        self.imu = imu0
        self.cams = list(cams0)
        self.window: dict[int, CloneEntry] = {}
        self.landmarks: dict[int, LandmarkEntry] = {}
        self.track_to_landmark: dict[int, int] = {}
        self.tracks: dict[int, list] = {}          # live pending observations
        self.track_total: dict[int, int] = {}
        self.stats = {"gated": 0, "used_tracks": 0, "triangulation_failures": 0,
                      "behind_camera": 0}
        self._rs_cache: dict = {}
        self.P = self._initial_covariance()

    # ------------------------------------------------------------------ layout

    @property
    def n_cams(self) -> int:
        return len(self.cams)

    @property
    def clone_start(self) -> int:
        return IMU_BLOCK_END + CAM_BLOCK * self.n_cams

    def cam_block(self, k: int) -> int:
        return IMU_BLOCK_END + CAM_BLOCK * k

    def clone_block(self, bundle_id: int) -> int:
        return self.clone_start + 9 * list(self.window).index(bundle_id)

    def landmark_block(self, track_id: int) -> int:
        return (self.clone_start + 9 * len(self.window)
                + 3 * list(self.landmarks).index(track_id))

    def dim(self) -> int:
        return (self.clone_start + 9 * len(self.window) + 3 * len(self.landmarks))

    def _initial_covariance(self) -> np.ndarray:
        pr, cal = self.cfg.priors, self.cfg.calibrate
        diag = np.zeros(self.clone_start)
        diag[0:3] = pr.nav_position**2
        diag[3:6] = pr.nav_attitude**2
        diag[6:9] = pr.nav_velocity**2
        if cal.biases:
            diag[9:12] = pr.bg**2
            diag[12:15] = pr.ba**2
        if cal.imu_intrinsics:
            diag[15:24] = pr.mg**2
            diag[24:33] = pr.ts**2
            diag[33:39] = pr.ma**2
        for k in range(self.n_cams):
            i = self.cam_block(k)
            if cal.extrinsics:
                diag[i:i + 3] = pr.extrinsic_trans**2
                diag[i + 3:i + 6] = pr.extrinsic_rot**2
            if cal.intrinsics:
                diag[i + 6:i + 8] = pr.focal**2
                diag[i + 8:i + 10] = pr.center**2
                diag[i + 10:i + 14] = pr.distortion**2
            if cal.td:
                diag[i + 14] = pr.td**2
            if cal.tr:
                diag[i + 15] = pr.tr**2
        return np.diag(diag)

    # -------------------------------------------------------------- propagation

    def _propagate_full(self, buffer: ImuBuffer, t1: float) -> PropagationResult:
        res = propagate(self.nav, self.imu, buffer, self.nav.t, t1,
                        noise=self.cfg.noise, need_param_sensitivity=True)
        # F differs from identity only in the first 15 rows; apply blockwise.
        P = self.P.copy()
        P[0:15, :] = res.phi @ P[0:15, :]
        P[0:9, :] += res.param_sensitivity @ P[15:39, :]
        P[:, 0:15] = P[:, 0:15] @ res.phi.T
        P[:, 0:9] += P[:, 15:39] @ res.param_sensitivity.T
        P[0:15, 0:15] += res.Q_d
        if self.cfg.param_process_noise > 0.0:
            dt = abs(t1 - self.nav.t)
            var = self.cfg.param_process_noise**2 * dt
            active = np.diag(self.P)[15:self.clone_start] > 0
            P[15:self.clone_start, 15:self.clone_start][np.diag_indices(active.size)] += \
                np.where(active, var, 0.0)
        self.P = 0.5 * (P + P.T)
        self.nav = res.nav
        return res

    def clone_and_augment(self, bundle_id: int, t_raw: list, keyframe: bool,
                          buffer: ImuBuffer) -> None:
        """Propagate to the bundle epoch and append the cloned state."""
        t_j = state_epoch(t_raw[0], self.cams[0].t_d)
        self._propagate_full(buffer, t_j)
        s = self.clone_start + 9 * len(self.window)   # insertion point
        n = self.P.shape[0]
        P = np.empty((n + 9, n + 9))
        P[:s, :s] = self.P[:s, :s]
        P[:s, s + 9:] = self.P[:s, s:]
        P[s + 9:, :s] = self.P[s:, :s]
        P[s + 9:, s + 9:] = self.P[s:, s:]
        rows = self.P[0:9, :]
        P[s:s + 9, :s] = rows[:, :s]
        P[s:s + 9, s + 9:] = rows[:, s:]
        P[:s, s:s + 9] = rows[:, :s].T
        P[s + 9:, s:s + 9] = rows[:, s:].T
        P[s:s + 9, s:s + 9] = self.P[0:9, 0:9]
        self.P = P
        self.window[bundle_id] = CloneEntry(
            nav=replace(self.nav, t=t_j), keyframe=keyframe,
            first_p=self.nav.p.copy(), first_v=self.nav.v.copy(),
            t_raw=list(t_raw))

    # ------------------------------------------------------------- measurement

    def _feature_epoch(self, clone: CloneEntry, cam_id: int, row: float):
        cam = self.cams[cam_id]
        t_k = state_epoch(clone.t_raw[cam_id], cam.t_d)
        t_feat = feature_time(row, cam.height, t_k, cam.t_r)
        row_factor = row / cam.height - 0.5
        return t_feat, row_factor

    def _prepare_rs(self, obs_iter, buffer: ImuBuffer) -> None:
        """Precompute rolling-shutter poses/Jacobians for a batch of
        (bundle, cam, row) queries, sweeping each image's rows in time order
        so nearby rows share the integration work."""
        self._rs_cache = {}
        by_image = {}
        for bundle_id, cam_id, row in obs_iter:
            if bundle_id in self.window:
                by_image.setdefault((bundle_id, cam_id), set()).add(float(row))
        for (bundle_id, cam_id), rows in by_image.items():
            clone = self.window[bundle_id]
            entries = []
            for row in rows:
                t_feat, rf = self._feature_epoch(clone, cam_id, row)
                entries.append((t_feat, rf, row))
            entries.sort()
            t_j = clone.nav.t
            forward = [e for e in entries if e[0] >= t_j]
            backward = [e for e in entries if e[0] < t_j][::-1]
            for group in (forward, backward):
                if not group:
                    continue
                seq = rs_pose_sequence(clone.nav, self.imu, buffer,
                                       [e[0] for e in group])
                for (t_feat, rf, row), (nav_f, phi9, omega) in zip(group, seq):
                    d_td = np.concatenate([nav_f.v, nav_f.rot @ omega])
                    self._rs_cache[(bundle_id, cam_id, row)] = RsPoseJacobians(
                        nav=nav_f, pose_jacobian=phi9[0:6].copy(),
                        d_pose_d_td=d_td, d_pose_d_tr=rf * d_td,
                        omega_body=omega)

    def _rs_fetch(self, bundle_id: int, cam_id: int, row: float,
                  buffer: ImuBuffer) -> RsPoseJacobians:
        hit = self._rs_cache.get((bundle_id, cam_id, float(row)))
        if hit is not None:
            return hit
        clone = self.window[bundle_id]
        t_feat, rf = self._feature_epoch(clone, cam_id, row)
        (nav_f, phi9, omega), = rs_pose_sequence(clone.nav, self.imu, buffer, [t_feat])
        d_td = np.concatenate([nav_f.v, nav_f.rot @ omega])
        return RsPoseJacobians(nav=nav_f, pose_jacobian=phi9[0:6].copy(),
                               d_pose_d_td=d_td, d_pose_d_tr=rf * d_td,
                               omega_body=omega)

    def predict_observation(self, bundle_id: int, cam_id: int, z: np.ndarray,
                            abr: np.ndarray, anchor_bundle: int, anchor_cam: int,
                            buffer: ImuBuffer, first_estimates: bool = True):
        """Residual and Jacobian blocks of one anchored observation.

        Returns None when the prediction falls behind the camera.  Position
        and velocity entries of the Jacobians use the first estimates of the
        involved clones; everything else uses the latest estimates.
        """
        clone = self.window[bundle_id]
        anchor = self.window[anchor_bundle]
        cam = self.cams[cam_id]
        acam = self.cams[anchor_cam]
        t_feat, row_factor = self._feature_epoch(clone, cam_id, float(z[1]))

        rs = self._rs_fetch(bundle_id, cam_id, float(z[1]), buffer)
        r_f, p_f, v_f = rs.nav.rot, rs.nav.p, rs.nav.v

        gamma = np.array([abr[0], abr[1], 1.0])
        rho = max(float(abr[2]), 0.0)
        r_b, p_b = acam.T_BC.rotation, acam.T_BC.translation
        r_a, p_a = anchor.nav.rot, anchor.nav.p
        r_e, p_e = cam.T_BC.rotation, cam.T_BC.translation

        y_m = r_b @ gamma + rho * p_b
        ray_w = r_a @ y_m
        w_m = ray_w + rho * p_a
        c_m = r_f.T @ (w_m - rho * p_f)
        q = r_e.T @ (c_m - rho * p_e)
        try:
            z_pred, dz_dq, dz_di = project_jacobians(q, cam)
        except BehindCameraError:
            return None
        residual = np.asarray(z, dtype=float) - z_pred

        if first_estimates:
            dt = t_feat - clone.nav.t
            p_f_j = p_f + (clone.first_p - clone.nav.p) + dt * (clone.first_v - clone.nav.v)
            v_f_j = v_f + (clone.first_v - clone.nav.v)
            p_a_j = anchor.first_p
        else:
            p_f_j, v_f_j, p_a_j = p_f, v_f, p_a

        sigma = self.cfg.pixel_sigma_px or max(cam.sigma_px, 1e-3)
        w = 1.0 / sigma
        dq = _observation_blocks(rho, gamma, ray_w, r_b, p_b, r_a, p_a_j,
                                 r_e, p_e, r_f, p_f_j, v_f_j,
                                 rs.pose_jacobian, rs.omega_body, row_factor)
        hz = (w * dz_dq) @ dq

        cam_jac = np.zeros((2, CAM_BLOCK))
        cam_jac[:, 0:6] = hz[:, 18:24]
        cam_jac[:, 6:14] = w * dz_di
        cam_jac[:, 14] = hz[:, 30]
        cam_jac[:, 15] = hz[:, 31]
        h_cams = {}
        if cam_id == anchor_cam:
            cam_jac[:, 0:6] += hz[:, 24:30]
            h_cams[cam_id] = cam_jac
        else:
            h_cams[cam_id] = cam_jac
            anchor_jac = np.zeros((2, CAM_BLOCK))
            anchor_jac[:, 0:6] = hz[:, 24:30]
            h_cams[anchor_cam] = anchor_jac

        return ObservationJacobian(
            residual=w * residual,
            h_clone=hz[:, 0:9],
            h_anchor=hz[:, 9:15],
            h_cams=h_cams,
            h_landmark=hz[:, 15:18],
            clone_bundle=bundle_id,
            anchor_bundle=anchor_bundle)

    def _scatter_rows(self, jacobians, with_landmark_cols: int | None = None):
        """Stack per-observation blocks into dense whitened (H, r)."""
        n = self.dim()
        m = 2 * len(jacobians)
        extra = 3 if with_landmark_cols is None else 0
        H = np.zeros((m, n + extra))
        r = np.empty(m)
        cal = self.cfg.calibrate
        for i, ob in enumerate(jacobians):
            sl = slice(2 * i, 2 * i + 2)
            r[sl] = ob.residual
            H[sl, self.clone_block(ob.clone_bundle):][:, :9] = ob.h_clone
            a0 = self.clone_block(ob.anchor_bundle)
            H[sl, a0:a0 + 6] += ob.h_anchor
            for k, blk in ob.h_cams.items():
                c0 = self.cam_block(k)
                H[sl, c0:c0 + CAM_BLOCK] += blk
            if with_landmark_cols is None:
                H[sl, n:n + 3] = ob.h_landmark
            else:
                H[sl, with_landmark_cols:with_landmark_cols + 3] = ob.h_landmark
        return H, r

    # ---------------------------------------------------------------- updates

    def _apply_correction(self, delta: np.ndarray) -> None:
        self._rs_cache = {}
        self.nav = NavState(p=self.nav.p + delta[0:3],
                            rot=exp_so3(delta[3:6]) @ self.nav.rot,
                            v=self.nav.v + delta[6:9], t=self.nav.t)
        b_g = self.imu.b_g + delta[9:12]
        b_a = self.imu.b_a + delta[12:15]
        m_g = self.imu.M_g + delta[15:24].reshape(3, 3)
        t_s = self.imu.T_s + delta[24:33].reshape(3, 3)
        m_a = self.imu.M_a.copy()
        for idx, (i, j) in enumerate(MA_LOWER_INDEX):
            m_a[i, j] += delta[33 + idx]
        self.imu = ImuParams(b_g=b_g, b_a=b_a, M_g=m_g, T_s=t_s, M_a=m_a,
                             gravity=self.imu.gravity)
        for k in range(self.n_cams):
            c0 = self.cam_block(k)
            d = delta[c0:c0 + CAM_BLOCK]
            cam = self.cams[k]
            self.cams[k] = CameraParams(
                T_BC=Transform(exp_so3(d[3:6]) @ cam.T_BC.rotation,
                               cam.T_BC.translation + d[0:3]),
                model=cam.model,
                intrinsics=cam.intrinsics + d[6:14],
                t_d=cam.t_d + float(d[14]), t_r=cam.t_r + float(d[15]),
                width=cam.width, height=cam.height, sigma_px=cam.sigma_px)
        for ordinal, (bid, entry) in enumerate(self.window.items()):
            s = self.clone_start + 9 * ordinal
            d = delta[s:s + 9]
            entry.nav = NavState(p=entry.nav.p + d[0:3],
                                 rot=exp_so3(d[3:6]) @ entry.nav.rot,
                                 v=entry.nav.v + d[6:9], t=entry.nav.t)
        lm_start = self.clone_start + 9 * len(self.window)
        for ordinal, entry in enumerate(self.landmarks.values()):
            s = lm_start + 3 * ordinal
            entry.abr = entry.abr + delta[s:s + 3]

    def _joint_update(self, H: np.ndarray, r: np.ndarray) -> None:
        """EKF update with unit-whitened rows, Joseph-stabilized (expanded
        form, avoids the dense n^3 products)."""
        if H.shape[0] == 0:
            return
        n = self.P.shape[0]
        if H.shape[0] > n + 1:
            _, rr = np.linalg.qr(np.column_stack([H, r]))
            H, r = rr[:, :n], rr[:, n]
        hp = H @ self.P
        S = hp @ H.T + np.eye(H.shape[0])
        factor = cho_factor(0.5 * (S + S.T), lower=True)
        K = cho_solve(factor, hp).T
        delta = K @ r
        # Joseph: P - K(HP) - (HP)^T K^T + K S K^T
        khp = K @ hp
        P = self.P - khp - khp.T + K @ S @ K.T
        self.P = 0.5 * (P + P.T)
        self._apply_correction(delta)

    def _gate(self, H: np.ndarray, r: np.ndarray) -> bool:
        dof = r.size
        if dof == 0:
            return False
        S = H @ self.P @ H.T + np.eye(dof)
        try:
            gamma = float(r @ np.linalg.solve(S, r))
        except np.linalg.LinAlgError:
            return False
        return gamma <= _chi2_threshold(self.cfg.chi2_confidence, dof)

    def _collect_track_rows(self, obs_list, abr, anchor_bundle, anchor_cam, buffer):
        jacs = []
        for bundle_id, cam_id, u, v in obs_list:
            if bundle_id not in self.window:
                continue
            ob = self.predict_observation(bundle_id, cam_id, np.array([u, v]),
                                          abr, anchor_bundle, anchor_cam, buffer)
            if ob is None:
                self.stats["behind_camera"] += 1
                continue
            jacs.append(ob)
        return jacs

    def _rs_pose_at(self, bundle_id: int, cam_id: int, row: float,
                    buffer: ImuBuffer) -> Transform:
        return self._rs_fetch(bundle_id, cam_id, row, buffer).nav.pose()

    def _triangulate_track(self, obs_list, anchor_bundle, anchor_cam, buffer):
        views = []
        for bundle_id, cam_id, u, v in obs_list:
            if bundle_id not in self.window:
                continue
            pose = self._rs_pose_at(bundle_id, cam_id, v, buffer)
            views.append((pose, self.cams[cam_id], np.array([u, v])))
        if len(views) < 2:
            raise TriangulationFailure("not enough usable views")
        anchor_pose = self.window[anchor_bundle].nav.pose()
        return triangulate(views, anchor_pose, self.cams[anchor_cam],
                           self.cfg.min_parallax_rad, self.cfg.allow_far_points)

    @staticmethod
    def _usable(obs_list, window) -> list:
        return [o for o in obs_list if o[0] in window]

    def _anchor_for(self, usable, prefer_keyframe: bool):
        """(bundle, cam) of the anchor: latest usable bundle, or the latest
        usable keyframe bundle; main camera when it observed the track there."""
        candidates = sorted({b for b, _, _, _ in usable})
        if prefer_keyframe:
            kf = [b for b in candidates if self.window[b].keyframe]
            if not kf:
                return None
            bundle = kf[-1]
        else:
            bundle = candidates[-1]
        cams_here = sorted({c for b, c, _, _ in usable if b == bundle})
        return bundle, cams_here[0]

    def update_disappeared(self, dead_tracks, buffer: ImuBuffer) -> int:
        """Structureless update over tracks that just ended (nullspace
        projection of the landmark Jacobian, rank-aware)."""
        stacked_h, stacked_r = [], []
        used = 0
        queries = []
        for track_id in dead_tracks:
            for b, c, _u, v in self.tracks.get(track_id, []):
                queries.append((b, c, v))
        self._prepare_rs(queries, buffer)
        for track_id in dead_tracks:
            obs_list = self.tracks.pop(track_id, [])
            self.track_total.pop(track_id, None)
            usable = self._usable(obs_list, self.window)
            if len(usable) < 3 or len({b for b, _, _, _ in usable}) < 2:
                continue
            anchor = self._anchor_for(usable, prefer_keyframe=False)
            if anchor is None:
                continue
            anchor_bundle, anchor_cam = anchor
            try:
                abr = self._triangulate_track(usable, anchor_bundle, anchor_cam, buffer)
            except TriangulationFailure:
                self.stats["triangulation_failures"] += 1
                continue
            jacs = self._collect_track_rows(usable, abr, anchor_bundle,
                                            anchor_cam, buffer)
            if len(jacs) < 2:
                continue
            H, r = self._scatter_rows(jacs)
            n = self.dim()
            h_x, h_l = H[:, :n], H[:, n:]
            u_svd, s_svd, _ = np.linalg.svd(h_l, full_matrices=True)
            rank = int(np.sum(s_svd > max(s_svd[0] if s_svd.size else 0.0, 1e-12) * 1e-8))
            if H.shape[0] - rank < 1:
                continue
            u2 = u_svd[:, rank:]
            h_proj = u2.T @ h_x
            r_proj = u2.T @ r
            if not self._gate(h_proj, r_proj):
                self.stats["gated"] += 1
                continue
            stacked_h.append(h_proj)
            stacked_r.append(r_proj)
            used += 1
        if stacked_h:
            self._joint_update(np.vstack(stacked_h), np.concatenate(stacked_r))
        self.stats["used_tracks"] += used
        return used

    def update_in_state(self, observations, buffer: ImuBuffer) -> int:
        """EKF update with this bundle's observations of in-state landmarks."""
        by_track = {}
        for track_id, bundle_id, cam_id, u, v in observations:
            by_track.setdefault(track_id, []).append((bundle_id, cam_id, u, v))
        self._prepare_rs(((b, c, v) for obs in by_track.values()
                          for b, c, _u, v in obs), buffer)
        blocks = []
        for track_id, obs_list in by_track.items():
            entry = self.landmarks.get(self.track_to_landmark[track_id])
            if entry is None:
                continue
            if entry.anchor_bundle not in self.window:
                continue
            jacs = self._collect_track_rows(obs_list, entry.abr,
                                            entry.anchor_bundle, entry.anchor_cam,
                                            buffer)
            if not jacs:
                continue
            H, r = self._scatter_rows(
                jacs, with_landmark_cols=self.landmark_block(
                    self.track_to_landmark[track_id]))
            blocks.append((H, r))
        if not blocks:
            return 0
        # gate each track, sharing one H P H^T evaluation across the batch
        h_all = np.vstack([h for h, _ in blocks])
        hp_all = h_all @ self.P
        used, keep_rows = 0, []
        row = 0
        for H, r in blocks:
            m = H.shape[0]
            S = hp_all[row:row + m] @ H.T + np.eye(m)
            try:
                gamma = float(r @ np.linalg.solve(S, r))
            except np.linalg.LinAlgError:
                gamma = np.inf
            if gamma <= _chi2_threshold(self.cfg.chi2_confidence, m):
                keep_rows.extend(range(row, row + m))
                used += 1
            else:
                self.stats["gated"] += 1
            row += m
        if keep_rows:
            self._joint_update(h_all[keep_rows],
                               np.concatenate([r for _, r in blocks])[keep_rows])
        return used

    def add_landmarks(self, candidate_tracks, buffer: ImuBuffer) -> int:
        """Triangulate mature tracks into the state.  Delayed initialization:
        per track the landmark-range rows seed the new covariance block and
        the landmark-nullspace rows are collected into one joint update run
        afterwards (the two row sets carry independent noise, so the order is
        statistically exact)."""
        budget = self.cfg.landmark_cap - len(self.landmarks)
        if budget <= 0 or not candidate_tracks:
            return 0
        self._prepare_rs(((b, c, v) for tid in candidate_tracks
                          for b, c, _u, v in self.tracks.get(tid, [])), buffer)
        stacked = []
        added = 0
        for track_id in candidate_tracks:
            if added >= budget:
                break
            usable = self._usable(self.tracks.get(track_id, []), self.window)
            if len(usable) < 3:
                continue
            anchor = self._anchor_for(usable, prefer_keyframe=True)
            if anchor is None:
                continue
            anchor_bundle, anchor_cam = anchor
            try:
                abr = self._triangulate_track(usable, anchor_bundle, anchor_cam, buffer)
            except TriangulationFailure:
                self.stats["triangulation_failures"] += 1
                continue
            if abr[2] <= 1e-6:
                continue   # far points stay structureless
            jacs = self._collect_track_rows(usable, abr, anchor_bundle,
                                            anchor_cam, buffer)
            if len(jacs) < 2:
                continue
            H, r = self._scatter_rows(jacs)
            n = self.dim()
            h_x, h_l = H[:, :n], H[:, n:]
            u_svd, s_svd, vt_svd = np.linalg.svd(h_l, full_matrices=True)
            if s_svd.size < 3 or s_svd[2] < 1e-8 * s_svd[0]:
                continue   # ill-conditioned depth, keep structureless
            u2 = u_svd[:, 3:]
            h_proj, r_proj = u2.T @ h_x, u2.T @ r
            if not self._gate(h_proj, r_proj):
                self.stats["gated"] += 1
                continue

            r_l = np.diag(s_svd[:3]) @ vt_svd[:3]   # == u1.T @ h_l
            h_x1 = u_svd[:, :3].T @ h_x
            r_l_inv = np.linalg.inv(r_l)
            hx1_p = h_x1 @ self.P
            p_lx = -r_l_inv @ hx1_p
            p_ll = r_l_inv @ (hx1_p @ h_x1.T + np.eye(3)) @ r_l_inv.T

            m = self.P.shape[0]
            P = np.empty((m + 3, m + 3))
            P[:m, :m] = self.P
            P[m:, :m] = p_lx
            P[:m, m:] = p_lx.T
            P[m:, m:] = 0.5 * (p_ll + p_ll.T)
            self.P = P
            self.landmarks[track_id] = LandmarkEntry(
                abr=abr.copy(), anchor_bundle=anchor_bundle,
                anchor_cam=anchor_cam, track_id=track_id)
            self.track_to_landmark[track_id] = track_id
            self.tracks[track_id] = []      # consumed; future obs update in state
            stacked.append((h_proj, r_proj))
            added += 1
        if stacked:
            n = self.dim()
            H = np.zeros((sum(h.shape[0] for h, _ in stacked), n))
            r = np.concatenate([ri for _, ri in stacked])
            row = 0
            for h, _ in stacked:
                H[row:row + h.shape[0], :h.shape[1]] = h
                row += h.shape[0]
            self._joint_update(H, r)
        return added

    # ---------------------------------------------------------- marginalization

    def select_redundant(self) -> list:
        """Bundle ids to marginalize: oldest unprotected non-keyframes first,
        then oldest keyframes, until the minimum redundancy count is met."""
        n_r = self.cfg.min_redundant or (3 if self.n_cams == 1 else 2)
        order = list(self.window)
        protected = set(order[-self.cfg.n_temporal:])
        chosen = [b for b in order
                  if not self.window[b].keyframe and b not in protected]
        if len(chosen) >= n_r:
            chosen = chosen[:n_r]
        else:
            for b in order:
                if len(chosen) >= n_r:
                    break
                if self.window[b].keyframe and b not in chosen:
                    chosen.append(b)
        return sorted(chosen, key=order.index)

    def _reanchor_landmark(self, lm_id: int, new_bundle: int, new_cam: int) -> bool:
        """Re-anchor a landmark to a surviving bundle, transforming the
        covariance by the re-anchoring Jacobian.  False when the geometry
        degenerates (caller drops the landmark)."""
        entry = self.landmarks[lm_id]
        old = self.window[entry.anchor_bundle]
        new = self.window[new_bundle]
        ocam = self.cams[entry.anchor_cam]
        ncam = self.cams[new_cam]
        alpha, beta, rho = entry.abr
        gamma = np.array([alpha, beta, 1.0])

        r_b, p_b = ocam.T_BC.rotation, ocam.T_BC.translation
        r_a, p_a = old.nav.rot, old.first_p
        r_n, p_n = new.nav.rot, new.first_p
        r_c, p_c = ncam.T_BC.rotation, ncam.T_BC.translation

        y_m = r_b @ gamma + rho * p_b
        ray_w = r_a @ y_m
        u = ray_w + rho * (p_a - p_n)
        c_m = r_n.T @ u
        q = r_c.T @ (c_m - rho * p_c)
        if q[2] <= 1e-9:
            return False
        new_abr = np.array([q[0] / q[2], q[1] / q[2], rho / q[2]])

        # d(new_abr)/dq and /drho_direct
        dn_dq = np.array([[1.0 / q[2], 0.0, -q[0] / q[2]**2],
                          [0.0, 1.0 / q[2], -q[1] / q[2]**2],
                          [0.0, 0.0, -rho / q[2]**2]])
        dn_drho_direct = np.array([0.0, 0.0, 1.0 / q[2]])

        chain = r_c.T @ r_n.T
        dq_dlm = np.column_stack([
            chain @ r_a @ r_b[:, 0], chain @ r_a @ r_b[:, 1],
            chain @ (r_a @ p_b + p_a - p_n) - r_c.T @ p_c])
        dq_dold = np.empty((3, 6))
        dq_dold[:, 0:3] = rho * chain
        dq_dold[:, 3:6] = -chain @ skew(ray_w)
        dq_dnew = np.empty((3, 6))
        dq_dnew[:, 0:3] = -rho * chain
        dq_dnew[:, 3:6] = r_c.T @ r_n.T @ skew(u)

        n = self.P.shape[0]
        jac = np.eye(n)
        li = self.landmark_block(lm_id)
        jac[li:li + 3, :] = 0.0
        jac[li:li + 3, li:li + 3] = dn_dq @ dq_dlm
        jac[li:li + 3, li + 2] += dn_drho_direct
        ob = self.clone_block(entry.anchor_bundle)
        nb = self.clone_block(new_bundle)
        jac[li:li + 3, ob:ob + 6] = dn_dq @ dq_dold
        jac[li:li + 3, nb:nb + 6] = dn_dq @ dq_dnew
        self.P = jac @ self.P @ jac.T
        self.P = 0.5 * (self.P + self.P.T)
        entry.abr = new_abr
        entry.anchor_bundle = new_bundle
        entry.anchor_cam = new_cam
        return True

    def marginalize(self, redundant: list, buffer: ImuBuffer) -> None:
        """Use leftover observations of the redundant bundles for a final
        structureless update, then remove the clones (and re-anchor or drop
        affected landmarks)."""
        redundant_set = set(redundant)
        stacked_h, stacked_r = [], []
        marg_queries = []
        for track_id, obs_list in self.tracks.items():
            if track_id in self.track_to_landmark:
                continue
            if sum(1 for o in obs_list if o[0] in redundant_set) > 2:
                marg_queries.extend((b, c, v) for b, c, _u, v in obs_list
                                    if b in self.window)
        self._prepare_rs(marg_queries, buffer)
        for track_id, obs_list in list(self.tracks.items()):
            if track_id in self.track_to_landmark:
                continue
            in_red = [o for o in obs_list if o[0] in redundant_set]
            if len(in_red) <= 2:
                self.tracks[track_id] = [o for o in obs_list
                                         if o[0] not in redundant_set]
                continue
            usable_all = self._usable(obs_list, self.window)
            anchor = self._anchor_for(in_red, prefer_keyframe=False)
            keep = [o for o in obs_list if o[0] not in redundant_set]
            self.tracks[track_id] = keep
            if anchor is None:
                continue
            anchor_bundle, anchor_cam = anchor
            try:
                abr = self._triangulate_track(usable_all, anchor_bundle,
                                              anchor_cam, buffer)
            except TriangulationFailure:
                self.stats["triangulation_failures"] += 1
                continue
            jacs = self._collect_track_rows(in_red, abr, anchor_bundle,
                                            anchor_cam, buffer)
            if len(jacs) < 2:
                continue
            H, r = self._scatter_rows(jacs)
            n = self.dim()
            h_x, h_l = H[:, :n], H[:, n:]
            u_svd, s_svd, _ = np.linalg.svd(h_l, full_matrices=True)
            rank = int(np.sum(s_svd > max(s_svd[0] if s_svd.size else 0.0, 1e-12) * 1e-8))
            if H.shape[0] - rank < 1:
                continue
            u2 = u_svd[:, rank:]
            h_proj, r_proj = u2.T @ h_x, u2.T @ r
            if not self._gate(h_proj, r_proj):
                self.stats["gated"] += 1
                continue
            stacked_h.append(h_proj)
            stacked_r.append(r_proj)
        if stacked_h:
            self._joint_update(np.vstack(stacked_h), np.concatenate(stacked_r))

        # re-anchor landmarks whose anchor clone is leaving
        surviving_kf = [b for b in self.window
                        if b not in redundant_set and self.window[b].keyframe]
        for lm_id in list(self.landmarks):
            entry = self.landmarks[lm_id]
            if entry.anchor_bundle not in redundant_set:
                continue
            ok = False
            if surviving_kf:
                ok = self._reanchor_landmark(lm_id, surviving_kf[0], 0)
            if not ok:
                self._remove_landmarks([lm_id])

        # drop the clone rows/columns
        keep = np.ones(self.P.shape[0], dtype=bool)
        for bid in redundant:
            s = self.clone_block(bid)
            keep[s:s + 9] = False
        self.P = self.P[np.ix_(keep, keep)]
        for bid in redundant:
            del self.window[bid]
        for track_id, obs_list in self.tracks.items():
            self.tracks[track_id] = [o for o in obs_list if o[0] in self.window]

    def _remove_landmarks(self, lm_ids) -> None:
        keep = np.ones(self.P.shape[0], dtype=bool)
        for lm_id in lm_ids:
            s = self.landmark_block(lm_id)
            keep[s:s + 3] = False
        self.P = self.P[np.ix_(keep, keep)]
        for lm_id in lm_ids:
            entry = self.landmarks.pop(lm_id)
            self.track_to_landmark.pop(entry.track_id, None)
            self.tracks.pop(entry.track_id, None)
            self.track_total.pop(entry.track_id, None)

    # ------------------------------------------------------------------ driver

    def process_bundle(self, assoc, buffer: ImuBuffer) -> dict:
        """One full Algorithm-style iteration for an arriving frame bundle."""
        self.clone_and_augment(assoc.bundle_id, assoc.t_raw, assoc.is_keyframe,
                               buffer)

        in_state_obs = []
        observed_tracks = set()
        for track_id, cam_id, u, v in assoc.observations:
            observed_tracks.add(track_id)
            if track_id in self.track_to_landmark:
                in_state_obs.append((track_id, assoc.bundle_id, cam_id, u, v))
            else:
                self.tracks.setdefault(track_id, []).append(
                    (assoc.bundle_id, cam_id, u, v))
                self.track_total[track_id] = self.track_total.get(track_id, 0) + 1

        dead = [t.track_id for t in assoc.disappeared
                if t.track_id not in self.track_to_landmark]
        n_dead = self.update_disappeared(dead, buffer)
        n_in_state = self.update_in_state(in_state_obs, buffer)

        candidates = [tid for tid, total in self.track_total.items()
                      if total >= self.cfg.min_track_length
                      and tid not in self.track_to_landmark
                      and self.tracks.get(tid)]
        added = self.add_landmarks(candidates, buffer)

        # landmark housekeeping: drop landmarks eluding too many bundles
        stale = []
        for lm_id, entry in self.landmarks.items():
            if entry.track_id in observed_tracks:
                entry.misses = 0
            else:
                entry.misses += 1
                if entry.misses >= self.cfg.max_landmark_misses:
                    stale.append(lm_id)
        if stale:
            self._remove_landmarks(stale)

        n_marg = 0
        if len(self.window) > self.cfg.n_keyframes + self.cfg.n_temporal:
            redundant = self.select_redundant()
            self.marginalize(redundant, buffer)
            n_marg = len(redundant)

        return {"t": self.nav.t, "disappeared_used": n_dead,
                "in_state_used": n_in_state, "landmarks_added": added,
                "marginalized": n_marg, "window": len(self.window),
                "landmarks": len(self.landmarks)}

    # ------------------------------------------------------------------ output

    def sigmas(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.P), 0.0, None))
