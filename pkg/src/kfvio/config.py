"""Run configuration: YAML key-value tree merged over defaults, with strict
schema validation (missing required keys and unknown keys are both errors,
reported by key path)."""

from __future__ import annotations

import copy

import yaml


class ConfigError(ValueError):
    pass


_IDENTITY3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
_ZERO3 = [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]

DEFAULT_CAMERA = {
    "model": "pinhole_radtan",
    "R_BC": [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]],
    "p_BC": [0.0, 0.0, 0.0],
    "intrinsics": [350.0, 360.0, 378.0, 238.0, 0.0, 0.0, 0.0, 0.0],
    "td_s": 0.020,
    "tr_s": 0.020,
    "width": 752,
    "height": 480,
    "pixel_noise_px": 1.0,
}

DEFAULTS = {
    "seed": 42,
    "scenario": {
        "kind": "wavy_circle",
        "duration_s": 300.0,
        "camera_rate_hz": 10.0,
        "imu_rate_hz": 100.0,
        "wavy": {},
        "standstill": {},
        "figure8": {},
    },
    "scene": {
        "half_extent_m": 10.0,
        "landmarks_per_wall": 180,
        "z_low_m": -2.5,
        "z_high_m": 5.5,
        "grid_cell_px": [32, 24],
    },
    "sensors": {
        "imu": {
            "b_g": [0.0, 0.0, 0.0],
            "b_a": [0.0, 0.0, 0.0],
            "M_g": _IDENTITY3,
            "T_s": _ZERO3,
            "M_a": _IDENTITY3,
            "gravity": 9.80665,
        },
        "imu_noise": {
            "sigma_g": 1.2e-3,
            "sigma_a": 8e-3,
            "sigma_bg": 2e-5,
            "sigma_ba": 5.5e-5,
        },
        "cameras": [DEFAULT_CAMERA],
    },
    "perturbation": {
        "scale": 1.0,
        "bg_deg_s": 0.57,
        "ba": 0.02,
        "mg": 0.005,
        "ts": 0.005,
        "ma": 0.005,
        "extrinsic_rot_deg": 0.57,
        "extrinsic_trans_m": 0.02,
        "focal_px": 2.0,
        "center_px": 2.0,
        "distortion": 0.01,
        "td_s": 0.005,
        "tr_s": 0.005,
        "nav_position_m": 0.05,
        "nav_velocity_m_s": 0.05,
        "nav_attitude_rad": 0.05,
    },
    "filter": {
        "n_keyframes": 5,
        "n_temporal": 5,
        "landmark_cap": 50,
        "min_track_length": 6,
        "max_landmark_misses": 3,
        "chi2_confidence": 0.95,
        "overlap_threshold": 0.60,
        "ratio_threshold": 0.20,
        "matching": "keyframe",
        "min_redundant": 0,           # 0 -> 3 for mono, 2 for stereo
        "min_parallax_rad": 1e-3,
        "allow_far_points": True,
        "param_process_noise": 0.0,
        "pixel_sigma_px": 0.0,
        "calibrate": {
            "extrinsics": True,
            "intrinsics": True,
            "td": True,
            "tr": True,
            "imu_intrinsics": True,
            "biases": True,
        },
    },
    "observability": {
        "points": 5,
        "max_order": 3,
        "seed": 12345,
    },
}

# keys whose dict value is free-form (validated by the consumer)
_PASSTHROUGH = {("scenario", "wavy"), ("scenario", "standstill"),
                ("scenario", "figure8")}


def _validate(user, default, path):
    if not isinstance(user, dict):
        raise ConfigError(f"expected a mapping at '{'.'.join(path) or '<root>'}'")
    for key in user:
        if key not in default:
            raise ConfigError(f"unknown config key '{'.'.join(path + (key,))}'")
    merged = {}
    for key, dval in default.items():
        kpath = path + (key,)
        if key not in user:
            merged[key] = copy.deepcopy(dval)
        elif kpath in _PASSTHROUGH:
            merged[key] = copy.deepcopy(user[key])
        elif isinstance(dval, dict):
            merged[key] = _validate(user[key], dval, kpath)
        elif key == "cameras":
            cams = user[key]
            if not isinstance(cams, list) or not 1 <= len(cams) <= 2:
                raise ConfigError("sensors.cameras must list 1 or 2 cameras")
            merged[key] = [_validate(c, DEFAULT_CAMERA, kpath + (str(i),))
                           for i, c in enumerate(cams)]
        else:
            merged[key] = copy.deepcopy(user[key])
    return merged


def merge_config(user: dict | None) -> dict:
    return _validate(user or {}, DEFAULTS, ())


def load_config(path: str) -> dict:
    try:
        with open(path) as f:
            user = yaml.safe_load(f) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: '{path}'")
    except yaml.YAMLError as e:
        raise ConfigError(f"config parse error in '{path}': {e}")
    return merge_config(user)
