"""Drives the frontend + filter over a dataset and produces the estimate
table written to estimate.csv (one row per frame bundle)."""

from __future__ import annotations

import numpy as np

from .dataset import SimDataset, write_csv
from .filter import (CalibrationFlags, FilterConfig, KeyframeFilter,
                     PriorSigmas)
from .frontend import Frontend
from .geometry import NavState, exp_so3, quat_to_rot, rot_to_quat
from .propagation import ImuNoise
from .sensors import cam_error_names, cam_param_items, imu_error_names, imu_param_items
from .simulator import (PerturbSigmas, _camera_params_from_cfg,
                        _imu_params_from_cfg, perturb_parameters, substream)

_COV_BLOCKS = (("p", 0), ("theta", 3), ("v", 6))
_TRIU = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]


def estimate_columns(n_cams: int) -> list[str]:
    from .sensors import INTRINSIC_NAMES
    cols = ["t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz"]
    for name, _ in _COV_BLOCKS:
        cols += [f"cov_{name}_{i}{j}" for i, j in _TRIU]
    names = imu_error_names()
    cols += names
    for k in range(n_cams):
        cols += [f"cam{k}_p_{ax}" for ax in "xyz"]
        cols += [f"cam{k}_q_{ax}" for ax in "wxyz"]
        cols += [f"cam{k}_{n}" for n in INTRINSIC_NAMES]
        cols += [f"cam{k}_td", f"cam{k}_tr"]
    cols += [f"sigma_{n}" for n in names]
    for k in range(n_cams):
        cols += [f"sigma_{n}" for n in cam_error_names(k)]
    return cols


def perturb_sigmas_from_cfg(pert: dict) -> PerturbSigmas:
    return PerturbSigmas(
        bg=np.deg2rad(pert["bg_deg_s"]), ba=pert["ba"], mg=pert["mg"],
        ts=pert["ts"], ma=pert["ma"],
        extrinsic_rot=np.deg2rad(pert["extrinsic_rot_deg"]),
        extrinsic_trans=pert["extrinsic_trans_m"],
        focal=pert["focal_px"], center=pert["center_px"],
        distortion=pert["distortion"], td=pert["td_s"], tr=pert["tr_s"],
        scale=pert["scale"])


def filter_config_from_cfg(cfg: dict) -> FilterConfig:
    f = cfg["filter"]
    pert = cfg["perturbation"]
    noise = ImuNoise(**cfg["sensors"]["imu_noise"])
    priors = PriorSigmas(
        nav_position=max(pert["nav_position_m"], 1e-4),
        nav_attitude=max(pert["nav_attitude_rad"], 1e-4),
        nav_velocity=max(pert["nav_velocity_m_s"], 1e-4),
        bg=np.deg2rad(pert["bg_deg_s"]), ba=pert["ba"], mg=pert["mg"],
        ts=pert["ts"], ma=pert["ma"],
        extrinsic_rot=np.deg2rad(pert["extrinsic_rot_deg"]),
        extrinsic_trans=pert["extrinsic_trans_m"],
        focal=pert["focal_px"], center=pert["center_px"],
        distortion=pert["distortion"], td=pert["td_s"], tr=pert["tr_s"])
    return FilterConfig(
        n_keyframes=f["n_keyframes"], n_temporal=f["n_temporal"],
        landmark_cap=f["landmark_cap"], min_track_length=f["min_track_length"],
        max_landmark_misses=f["max_landmark_misses"],
        chi2_confidence=f["chi2_confidence"], min_redundant=f["min_redundant"],
        min_parallax_rad=f["min_parallax_rad"],
        allow_far_points=f["allow_far_points"],
        param_process_noise=f["param_process_noise"],
        pixel_sigma_px=f["pixel_sigma_px"],
        noise=noise, priors=priors,
        calibrate=CalibrationFlags(**f["calibrate"]))


def _truth_nav_at(truth: dict, t: float) -> NavState:
    ts = truth["t"]
    i = int(np.clip(np.searchsorted(ts, t), 1, ts.size - 1))
    h = (t - ts[i - 1]) / (ts[i] - ts[i - 1])
    p = np.array([np.interp(t, ts, truth[c]) for c in ("px", "py", "pz")])
    v = np.array([np.interp(t, ts, truth[c]) for c in ("vx", "vy", "vz")])
    q0 = np.array([truth[c][i - 1] for c in ("qw", "qx", "qy", "qz")])
    q1 = np.array([truth[c][i] for c in ("qw", "qx", "qy", "qz")])
    r0, r1 = quat_to_rot(q0), quat_to_rot(q1)
    from .geometry import log_so3
    rot = r0 @ exp_so3(h * log_so3(r0.T @ r1))
    return NavState(p=p, rot=rot, v=v, t=t)


def initial_state(dataset: SimDataset, cfg: dict, master_seed: int):
    """Truth at t=0 perturbed per the configured noise (paper-style start)."""
    pert = cfg["perturbation"]
    scale = pert["scale"]
    rng = substream(master_seed, "init")
    nav = _truth_nav_at(dataset.truth_states, 0.0)
    d_p = scale * rng.normal(scale=pert["nav_position_m"], size=3)
    d_th = scale * rng.normal(scale=pert["nav_attitude_rad"], size=3)
    d_v = scale * rng.normal(scale=pert["nav_velocity_m_s"], size=3)
    return NavState(p=nav.p + d_p, rot=exp_so3(d_th) @ nav.rot,
                    v=nav.v + d_v, t=nav.t)


def run_filter(dataset: SimDataset, cfg: dict, master_seed: int):
    """Run the full pipeline over a dataset; returns (columns dict, filter)."""
    imu_true = _imu_params_from_cfg(cfg["sensors"]["imu"])
    cams_true = [_camera_params_from_cfg(c) for c in cfg["sensors"]["cameras"]]
    imu0, cams0 = perturb_parameters(
        imu_true, cams_true, perturb_sigmas_from_cfg(cfg["perturbation"]),
        substream(master_seed, "perturb"))
    nav0 = initial_state(dataset, cfg, master_seed)
    fcfg = filter_config_from_cfg(cfg)
    filt = KeyframeFilter(fcfg, nav0, imu0, cams0)
    fe = Frontend(retained_keyframes=fcfg.n_keyframes,
                  overlap_threshold=cfg["filter"]["overlap_threshold"],
                  ratio_threshold=cfg["filter"]["ratio_threshold"],
                  matching=cfg["filter"]["matching"])

    cols = estimate_columns(len(cams0))
    rows = []
    for bundle in dataset.bundles:
        assoc = fe.process(bundle)
        filt.process_bundle(assoc, dataset.imu)
        rows.append(_record_row(filt))
    table = {c: np.array([r[i] for r in rows]) for i, c in enumerate(cols)}
    return table, filt


def _record_row(filt: KeyframeFilter) -> list:
    nav = filt.nav
    q = rot_to_quat(nav.rot)
    row = [nav.t, *nav.p, *q, *nav.v]
    for _, off in _COV_BLOCKS:
        for i, j in _TRIU:
            row.append(filt.P[off + i, off + j])
    for _, value in imu_param_items(filt.imu):
        row.append(value)
    for k, cam in enumerate(filt.cams):
        for _, value in cam_param_items(k, cam):
            row.append(value)
    sig = filt.sigmas()
    row.extend(sig[9:39])
    for k in range(len(filt.cams)):
        c0 = filt.cam_block(k)
        row.extend(sig[c0:c0 + 16])
    return row


def write_estimate(path: str, table: dict) -> None:
    cols = list(table.keys())
    write_csv(path, cols, zip(*[table[c] for c in cols]))
