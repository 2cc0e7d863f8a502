"""Deterministic generation of ground-truth trajectories, landmark scenes,
IMU readings, and rolling-shutter pixel observations.

All randomness flows from one master seed through named substreams (scene,
imu, pixel, perturb), so each stage is independently reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import BundleObservations, SimDataset
from .geometry import Transform, exp_so3, rot_to_quat
from .propagation import ImuBuffer, ImuNoise
from .sensors import (KANNALA_BRANDT, PINHOLE_RADTAN, CameraParams, ImuParams,
                      cam_param_items, imu_param_items)
from .trajectories import (Standstill, WavyCircle, figure_eight_samples,
                           fit_spline)

_STREAMS = {"scene": 0, "imu": 1, "pixel": 2, "perturb": 3, "init": 4}


class NoConvergenceError(RuntimeError):
    """Rolling-shutter observation-time solve did not converge."""


def substream(master_seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=int(master_seed),
                               spawn_key=(_STREAMS[name],) + tuple(int(e) for e in extra)))


# ---------------------------------------------------------------------------
# scene


@dataclass(frozen=True)
class Scene:
    points: np.ndarray      # (n, 3) world coordinates
    ids: np.ndarray         # (n,) unique landmark ids


def make_scene_four_walls(half_extent: float, per_wall: int,
                          z_low: float, z_high: float, rng) -> Scene:
    """Seeded uniform scatter on four vertical planes x,y = +-half_extent."""
    pts = []
    for wall in range(4):
        u = rng.uniform(-half_extent, half_extent, size=per_wall)
        z = rng.uniform(z_low, z_high, size=per_wall)
        fixed = np.full(per_wall, half_extent if wall % 2 == 0 else -half_extent)
        if wall < 2:
            pts.append(np.stack([fixed, u, z], axis=1))
        else:
            pts.append(np.stack([u, fixed, z], axis=1))
    points = np.concatenate(pts, axis=0) if per_wall > 0 else np.zeros((0, 3))
    return Scene(points=points, ids=np.arange(points.shape[0]))


# ---------------------------------------------------------------------------
# IMU synthesis


def synthesize_imu(traj, params: ImuParams, noise: ImuNoise, rate: float,
                   t0: float, t1: float, rng, bias_walk: bool = True):
    """Raw IMU readings inverting the calibration maps on the true kinematics.

    Returns (buffer, true_bg, true_ba) where the bias arrays carry the walked
    true biases at each sample.
    """
    ts = t0 + np.arange(int(round((t1 - t0) * rate)) + 1) / rate
    n = ts.size
    g_w = np.array([0.0, 0.0, params.gravity])
    ma_inv = np.linalg.inv(params.M_a)
    mg_inv = np.linalg.inv(params.M_g)

    rots, _, _, w_b, a_w = traj.evaluate_many(ts)
    a_s = np.einsum("nji,nj->ni", rots, a_w + g_w)

    dt = 1.0 / rate
    bg = np.empty((n, 3))
    ba = np.empty((n, 3))
    bg[0] = params.b_g
    ba[0] = params.b_a
    if bias_walk and (noise.sigma_bg > 0 or noise.sigma_ba > 0):
        steps_g = rng.normal(scale=noise.sigma_bg * np.sqrt(dt), size=(n - 1, 3))
        steps_a = rng.normal(scale=noise.sigma_ba * np.sqrt(dt), size=(n - 1, 3))
        bg[1:] = params.b_g + np.cumsum(steps_g, axis=0)
        ba[1:] = params.b_a + np.cumsum(steps_a, axis=0)
    else:
        bg[1:] = params.b_g
        ba[1:] = params.b_a

    nu_a = rng.normal(scale=noise.sigma_a * np.sqrt(rate), size=(n, 3)) \
        if noise.sigma_a > 0 else np.zeros((n, 3))
    nu_g = rng.normal(scale=noise.sigma_g * np.sqrt(rate), size=(n, 3)) \
        if noise.sigma_g > 0 else np.zeros((n, 3))

    a_m = a_s @ ma_inv.T + ba + nu_a
    w_m = w_b @ mg_inv.T + bg + a_s @ (params.T_s @ ma_inv).T + nu_g
    return ImuBuffer(ts, w_m, a_m), bg, ba


# ---------------------------------------------------------------------------
# camera synthesis


def _project_batch(p_c: np.ndarray, cam: CameraParams):
    """Vectorized projection of (n, 3) camera-frame points; returns (z, ok)."""
    fx, fy, cx, cy = cam.intrinsics[:4]
    x, y, z = p_c[:, 0], p_c[:, 1], p_c[:, 2]
    if cam.model == PINHOLE_RADTAN:
        ok = z > 1e-3
        zs = np.where(ok, z, 1.0)
        g1, g2 = x / zs, y / zs
        k1, k2, p1, p2 = cam.intrinsics[4:]
        r2 = g1 * g1 + g2 * g2
        radial = 1.0 + k1 * r2 + k2 * r2 * r2
        dx = g1 * radial + 2 * p1 * g1 * g2 + p2 * (r2 + 2 * g1 * g1)
        dy = g2 * radial + p1 * (r2 + 2 * g2 * g2) + 2 * p2 * g1 * g2
        return np.stack([fx * dx + cx, fy * dy + cy], axis=1), ok
    k1, k2, k3, k4 = cam.intrinsics[4:]
    rho = np.hypot(x, y)
    theta = np.arctan2(rho, z)
    ok = theta <= np.deg2rad(97.5)
    t2 = theta * theta
    r_d = theta * (1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4))))
    s = np.where(rho > 1e-12, r_d / np.maximum(rho, 1e-12), 1.0 / np.maximum(z, 1e-12))
    return np.stack([fx * s * x + cx, fy * s * y + cy], axis=1), ok


def _camera_frame_points(traj, t: float, cam: CameraParams, points: np.ndarray):
    s = traj.evaluate(t)
    T_CW = cam.T_BC.inverse().compose(s.pose.inverse())
    return points @ T_CW.rotation.T + T_CW.translation


def _rs_solve_batch(traj, points: np.ndarray, cam: CameraParams, t_raw: float,
                    max_iter: int = 10, tol_s: float = 1e-9):
    """Vectorized fixed-point solve of the observation time for many
    landmarks at once.  Returns (z (n,2), valid mask, converged mask)."""
    n = points.shape[0]
    t_mid = t_raw + cam.t_d
    ts = np.full(n, t_mid)
    r_cb = cam.T_BC.rotation.T
    p_bc = cam.T_BC.translation
    z = np.zeros((n, 2))
    valid = np.ones(n, dtype=bool)
    converged = np.zeros(n, dtype=bool)
    if cam.t_r == 0.0:
        max_iter = 1
    for _ in range(max_iter):
        rot, p, _, _, _ = traj.evaluate_many(ts)
        body = np.einsum("nji,nj->ni", rot, points - p)
        p_c = (body - p_bc) @ r_cb.T
        z_new, ok = _project_batch(p_c, cam)
        valid &= ok
        z = np.where(valid[:, None], z_new, z)
        t_new = t_mid + (z[:, 1] / cam.height - 0.5) * cam.t_r
        converged = np.abs(t_new - ts) < tol_s
        ts = np.where(valid, t_new, ts)
        if np.all(converged | ~valid):
            break
    return z, valid, converged | ~valid


def synthesize_rs_observation(traj, p_w: np.ndarray, cam: CameraParams,
                              t_raw: float, rng=None, max_iter: int = 10,
                              tol_s: float = 1e-9):
    """Pixel observation of one landmark in a rolling-shutter image, solving
    the observation time as the root of the row-timing map.  Returns the
    noisy pixel or None when out of view; raises NoConvergenceError if the
    fixed point does not settle."""
    z, valid, converged = _rs_solve_batch(traj, np.asarray(p_w, dtype=float)[None, :],
                                          cam, t_raw, max_iter, tol_s)
    if not converged[0]:
        raise NoConvergenceError(f"RS time solve did not converge at t_raw={t_raw}")
    if not valid[0]:
        return None
    z = z[0]
    if not (0.0 <= z[0] < cam.width and 0.0 <= z[1] < cam.height):
        return None
    if rng is not None and cam.sigma_px > 0:
        z = z + rng.normal(scale=cam.sigma_px, size=2)
        if not (0.0 <= z[0] < cam.width and 0.0 <= z[1] < cam.height):
            return None
    return z


def _bundle_observations(traj, scene: Scene, cam: CameraParams, t_raw: float,
                         rng, grid_cell=(32, 24)):
    """All landmark observations of one image, with grid-based suppression
    keeping only the closest landmark per cell."""
    t_mid = t_raw + cam.t_d
    p_c = _camera_frame_points(traj, t_mid, cam, scene.points)
    z_mid, ok = _project_batch(p_c, cam)
    margin = 40.0  # px, kept for RS/noise shifts near borders
    in_view = (ok & (z_mid[:, 0] > -margin) & (z_mid[:, 0] < cam.width + margin)
               & (z_mid[:, 1] > -margin) & (z_mid[:, 1] < cam.height + margin))
    idx = np.nonzero(in_view)[0]
    if idx.size == 0:
        return np.zeros((0, 3))

    z, valid, converged = _rs_solve_batch(traj, scene.points[idx], cam, t_raw)
    keep = valid & converged & (z[:, 0] >= 0.0) & (z[:, 0] < cam.width) \
        & (z[:, 1] >= 0.0) & (z[:, 1] < cam.height)
    if rng is not None and cam.sigma_px > 0:
        # one draw per candidate keeps the stream layout stable
        z = z + rng.normal(scale=cam.sigma_px, size=z.shape)
        keep &= (z[:, 0] >= 0.0) & (z[:, 0] < cam.width) \
            & (z[:, 1] >= 0.0) & (z[:, 1] < cam.height)

    rows = []
    depths = np.linalg.norm(p_c[idx], axis=1)
    for sel in np.nonzero(keep)[0]:
        rows.append((scene.ids[idx[sel]], z[sel, 0], z[sel, 1], depths[sel]))
    if not rows:
        return np.zeros((0, 3))
    best = {}
    for lm, u, v, depth in rows:
        cell = (int(u // grid_cell[0]), int(v // grid_cell[1]))
        if cell not in best or depth < best[cell][3]:
            best[cell] = (lm, u, v, depth)
    out = np.array([(lm, u, v) for lm, u, v, _ in best.values()])
    return out[np.argsort(out[:, 0])]


# ---------------------------------------------------------------------------
# parameter perturbation (initial estimates for the filter)


@dataclass(frozen=True)
class PerturbSigmas:
    """Per-dimension standard deviations used to draw initial estimates."""

    bg: float = np.deg2rad(0.57)      # rad/s
    ba: float = 0.02                  # m/s^2
    mg: float = 0.005
    ts: float = 0.005
    ma: float = 0.005
    extrinsic_rot: float = np.deg2rad(0.57)   # rad
    extrinsic_trans: float = 0.02     # m
    focal: float = 2.0                # px
    center: float = 2.0               # px
    distortion: float = 0.01
    td: float = 0.005                 # s
    tr: float = 0.005                 # s
    scale: float = 1.0                # global multiplier (0 disables perturbation)


def perturb_parameters(imu: ImuParams, cams: list[CameraParams],
                       sig: PerturbSigmas, rng):
    """Initial estimates drawn around the true parameters; t_r >= 0 enforced
    by resampling."""
    s = sig.scale
    m_a = imu.M_a + s * np.tril(rng.normal(scale=sig.ma, size=(3, 3)))
    imu0 = ImuParams(
        b_g=imu.b_g + s * rng.normal(scale=sig.bg, size=3),
        b_a=imu.b_a + s * rng.normal(scale=sig.ba, size=3),
        M_g=imu.M_g + s * rng.normal(scale=sig.mg, size=(3, 3)),
        T_s=imu.T_s + s * rng.normal(scale=sig.ts, size=(3, 3)),
        M_a=np.tril(m_a),
        gravity=imu.gravity,
    )
    cams0 = []
    for cam in cams:
        intr = cam.intrinsics.copy()
        intr[:2] += s * rng.normal(scale=sig.focal, size=2)
        intr[2:4] += s * rng.normal(scale=sig.center, size=2)
        intr[4:] += s * rng.normal(scale=sig.distortion, size=4)
        t_r = cam.t_r + s * rng.normal(scale=sig.tr)
        while t_r < 0.0:
            t_r = cam.t_r + s * rng.normal(scale=sig.tr)
        cams0.append(CameraParams(
            T_BC=Transform(exp_so3(s * rng.normal(scale=sig.extrinsic_rot, size=3))
                           @ cam.T_BC.rotation,
                           cam.T_BC.translation
                           + s * rng.normal(scale=sig.extrinsic_trans, size=3)),
            model=cam.model,
            intrinsics=intr,
            t_d=cam.t_d + s * rng.normal(scale=sig.td),
            t_r=t_r,
            width=cam.width, height=cam.height, sigma_px=cam.sigma_px))
    return imu0, cams0


# ---------------------------------------------------------------------------
# scenario runner


def build_trajectory(scenario: dict):
    kind = scenario["kind"]
    if kind == "wavy_circle":
        w = scenario.get("wavy", {})
        return WavyCircle(**w)
    if kind == "constant_circle":
        w = dict(scenario.get("wavy", {}))
        w.update(wave_amplitude=0.0, pitch_amplitude=0.0, roll_amplitude=0.0,
                 yaw_wave_amplitude=0.0)
        return WavyCircle(**w)
    if kind == "standstill":
        st = dict(scenario.get("standstill", {}))
        base = WavyCircle(**scenario.get("wavy", {}))
        return Standstill(base=base, **st)
    if kind == "rest":
        base = WavyCircle(**scenario.get("wavy", {}))
        return Standstill(base=base, motion_s=6.0, blend_s=3.0,
                          rest_s=scenario.get("duration_s", 60.0) + 60.0,
                          tail_motion_s=1.0)
    if kind == "spline_figure8":
        ts, poses = figure_eight_samples(**scenario.get("figure8", {}))
        return fit_spline(ts, poses)
    raise ValueError(f"unknown scenario kind {kind!r}")


def run_scenario(cfg: dict, master_seed: int) -> SimDataset:
    """Deterministic dataset for one scenario configuration."""
    scenario = cfg["scenario"]
    traj = build_trajectory(scenario)
    duration = scenario["duration_s"]
    cam_rate = scenario["camera_rate_hz"]
    imu_rate = scenario["imu_rate_hz"]

    imu_true = _imu_params_from_cfg(cfg["sensors"]["imu"])
    cams_true = [_camera_params_from_cfg(c) for c in cfg["sensors"]["cameras"]]
    noise = ImuNoise(**cfg["sensors"]["imu_noise"])

    scene_cfg = cfg["scene"]
    scene = make_scene_four_walls(scene_cfg["half_extent_m"],
                                  scene_cfg["landmarks_per_wall"],
                                  scene_cfg["z_low_m"], scene_cfg["z_high_m"],
                                  substream(master_seed, "scene"))

    margin = 0.6
    imu_buf, bg_true, ba_true = synthesize_imu(
        traj, imu_true, noise, imu_rate, -margin, duration + margin,
        substream(master_seed, "imu"))

    pixel_rng = substream(master_seed, "pixel")
    grid = tuple(scene_cfg.get("grid_cell_px", (32, 24)))
    bundles = []
    n_bundles = int(np.floor(duration * cam_rate)) + 1
    for j in range(n_bundles):
        t_raw = j / cam_rate
        obs = [_bundle_observations(traj, scene, cam, t_raw, pixel_rng, grid)
               for cam in cams_true]
        bundles.append(BundleObservations(j, [t_raw] * len(cams_true), obs))

    # truth states at IMU rate over the same span as the IMU buffer
    rots, ps, vs, _, _ = traj.evaluate_many(imu_buf.t)
    quats = np.array([rot_to_quat(r) for r in rots])
    truth = {"t": imu_buf.t.copy(),
             "px": ps[:, 0], "py": ps[:, 1], "pz": ps[:, 2],
             "qw": quats[:, 0], "qx": quats[:, 1], "qy": quats[:, 2], "qz": quats[:, 3],
             "vx": vs[:, 0], "vy": vs[:, 1], "vz": vs[:, 2],
             "bgx": bg_true[:, 0], "bgy": bg_true[:, 1], "bgz": bg_true[:, 2],
             "bax": ba_true[:, 0], "bay": ba_true[:, 1], "baz": ba_true[:, 2]}

    truth_params = dict(imu_param_items(imu_true))
    for k, cam in enumerate(cams_true):
        truth_params.update(dict(cam_param_items(k, cam)))

    return SimDataset(imu=imu_buf, bundles=bundles, truth_states=truth,
                      truth_params=truth_params, n_cameras=len(cams_true))


def _imu_params_from_cfg(c: dict) -> ImuParams:
    return ImuParams(b_g=np.asarray(c["b_g"], dtype=float),
                     b_a=np.asarray(c["b_a"], dtype=float),
                     M_g=np.asarray(c["M_g"], dtype=float).reshape(3, 3),
                     T_s=np.asarray(c["T_s"], dtype=float).reshape(3, 3),
                     M_a=np.asarray(c["M_a"], dtype=float).reshape(3, 3),
                     gravity=c["gravity"])


def _camera_params_from_cfg(c: dict) -> CameraParams:
    return CameraParams(
        T_BC=Transform(np.asarray(c["R_BC"], dtype=float).reshape(3, 3),
                       np.asarray(c["p_BC"], dtype=float)),
        model=c.get("model", PINHOLE_RADTAN),
        intrinsics=np.asarray(c["intrinsics"], dtype=float),
        t_d=c["td_s"], t_r=c["tr_s"],
        width=int(c["width"]), height=int(c["height"]),
        sigma_px=c["pixel_noise_px"])
