"""Dataset directory format shared by the simulator, the filter runner, and
the evaluation tools.

Files (all CSV, header row, 17 significant digits, UNIX newlines):
  imu.csv          t,wx,wy,wz,ax,ay,az
  frames.csv       bundle_id,cam_id,t_raw
  tracks.csv       bundle_id,cam_id,landmark_id,u,v
  truth_states.csv t,px,py,pz,qw,qx,qy,qz,vx,vy,vz,bgx,bgy,bgz,bax,bay,baz
  truth_params.csv name,value
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .propagation import ImuBuffer


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


def write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(x) for x in row) + "\n")


def read_csv(path: str) -> dict[str, np.ndarray]:
    with open(path) as f:
        header = f.readline().strip().split(",")
        data = np.loadtxt(f, delimiter=",", ndmin=2)
    if data.size == 0:
        data = np.zeros((0, len(header)))
    return {name: data[:, i] for i, name in enumerate(header)}


@dataclass
class BundleObservations:
    """Per-camera simulated keypoints of one frame bundle."""

    bundle_id: int
    t_raw: list[float]                      # per camera, camera-clock time
    obs: list[np.ndarray] = field(default_factory=list)
    # obs[cam] has rows (landmark_id, u, v)


@dataclass
class SimDataset:
    imu: ImuBuffer
    bundles: list[BundleObservations]
    truth_states: dict[str, np.ndarray]
    truth_params: dict[str, float]
    n_cameras: int = 1

    def write(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        write_csv(os.path.join(out_dir, "imu.csv"),
                  ["t", "wx", "wy", "wz", "ax", "ay", "az"],
                  (np.concatenate([[t], w, a])
                   for t, w, a in zip(self.imu.t, self.imu.omega, self.imu.accel)))
        write_csv(os.path.join(out_dir, "frames.csv"),
                  ["bundle_id", "cam_id", "t_raw"],
                  ((b.bundle_id, k, b.t_raw[k])
                   for b in self.bundles for k in range(len(b.t_raw))))
        write_csv(os.path.join(out_dir, "tracks.csv"),
                  ["bundle_id", "cam_id", "landmark_id", "u", "v"],
                  ((b.bundle_id, k, int(row[0]), row[1], row[2])
                   for b in self.bundles for k in range(len(b.obs))
                   for row in b.obs[k]))
        names = ["t", "px", "py", "pz", "qw", "qx", "qy", "qz",
                 "vx", "vy", "vz", "bgx", "bgy", "bgz", "bax", "bay", "baz"]
        write_csv(os.path.join(out_dir, "truth_states.csv"), names,
                  zip(*[self.truth_states[n] for n in names]))
        write_csv(os.path.join(out_dir, "truth_params.csv"), ["name", "value"],
                  ((n, v) for n, v in self.truth_params.items()))

    @classmethod
    def read(cls, in_dir: str) -> "SimDataset":
        imu_cols = read_csv(os.path.join(in_dir, "imu.csv"))
        imu = ImuBuffer(imu_cols["t"],
                        np.stack([imu_cols["wx"], imu_cols["wy"], imu_cols["wz"]], axis=1),
                        np.stack([imu_cols["ax"], imu_cols["ay"], imu_cols["az"]], axis=1))
        frames = read_csv(os.path.join(in_dir, "frames.csv"))
        tracks = read_csv(os.path.join(in_dir, "tracks.csv"))
        truth_states = read_csv(os.path.join(in_dir, "truth_states.csv"))

        truth_params = {}
        with open(os.path.join(in_dir, "truth_params.csv")) as f:
            f.readline()
            for line in f:
                name, value = line.strip().split(",")
                truth_params[name] = float(value)

        n_cameras = int(frames["cam_id"].max()) + 1 if frames["cam_id"].size else 1
        bundles = {}
        for bid, cam, traw in zip(frames["bundle_id"], frames["cam_id"], frames["t_raw"]):
            bid = int(bid)
            if bid not in bundles:
                bundles[bid] = BundleObservations(bid, [0.0] * n_cameras,
                                                  [np.zeros((0, 3))] * n_cameras)
            bundles[bid].t_raw[int(cam)] = float(traw)
        by_key = {}
        for bid, cam, lm, u, v in zip(tracks["bundle_id"], tracks["cam_id"],
                                      tracks["landmark_id"], tracks["u"], tracks["v"]):
            by_key.setdefault((int(bid), int(cam)), []).append((lm, u, v))
        for (bid, cam), rows in by_key.items():
            bundles[bid].obs[cam] = np.array(rows)
        ordered = [bundles[k] for k in sorted(bundles)]
        return cls(imu=imu, bundles=ordered, truth_states=truth_states,
                   truth_params=truth_params, n_cameras=n_cameras)
