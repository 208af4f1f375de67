"""Odometry drift model: corrupts ground-truth DVL trajectories with
relative-pose noise on the drifting axes (x, y, yaw) and absolute noise on
the drift-free axes (z, roll, pitch), then maps DVL poses to sonar poses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import se3
from .se3 import EulerDecomposition, Pose


@dataclass(frozen=True)
class TrajectoryFrame:
    frame_id: int
    timestamp: float
    dvl_pose: Pose


@dataclass(frozen=True)
class Trajectory:
    frames: tuple[TrajectoryFrame, ...]
    extrinsic: Pose              # T_dvl->sonar

    def __post_init__(self):
        ts = [f.timestamp for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "frames", tuple(self.frames))

    def __len__(self) -> int:
        return len(self.frames)

    def dvl_poses(self) -> list[Pose]:
        return [f.dvl_pose for f in self.frames]


@dataclass(frozen=True)
class DriftNoiseSpec:
    """Relative noise on the drifting axes, absolute noise on the rest."""

    sigma_xy: float = 0.0          # m, relative x/y
    sigma_yaw: float = 0.0         # rad, relative yaw
    sigma_z: float = 0.0           # m, absolute z
    sigma_roll_pitch: float = 0.0  # rad, absolute roll/pitch
    seed: int = 0

    def __post_init__(self):
        if min(self.sigma_xy, self.sigma_yaw, self.sigma_z, self.sigma_roll_pitch) < 0:
            raise ValueError("noise sigmas must be >= 0")


# Named noise configurations: the simulation values plus the four real-data
# drift levels (absolute z/roll/pitch noise kept at the simulation setting).
NOISE_PRESETS: dict[str, DriftNoiseSpec] = {
    "sim": DriftNoiseSpec(sigma_xy=0.004, sigma_yaw=0.004, sigma_z=0.005, sigma_roll_pitch=0.005),
    "real-0.005": DriftNoiseSpec(0.005, 0.005, 0.005, 0.005),
    "real-0.01": DriftNoiseSpec(0.01, 0.01, 0.005, 0.005),
    "real-0.015": DriftNoiseSpec(0.015, 0.015, 0.005, 0.005),
    "real-0.02": DriftNoiseSpec(0.02, 0.02, 0.005, 0.005),
}


def inject_drift(traj: Trajectory, spec: DriftNoiseSpec) -> Trajectory:
    """Corrupt a DVL trajectory with the relative-pose drift model.

    Steps: (1) relative poses, (2) Gaussian noise on the x/y translation and
    yaw of each relative pose, (3) chain the noisy relatives from the first
    (unperturbed) frame, (4) reset z/roll/pitch of each chained pose to the
    ground-truth value plus absolute Gaussian noise.
    """
    if len(traj) < 2:
        raise ValueError("need at least 2 frames")
    rng = np.random.default_rng(spec.seed)
    gt = traj.dvl_poses()

    noisy = [gt[0]]
    for i in range(len(gt) - 1):
        delta = se3.relative(gt[i], gt[i + 1])
        e = se3.to_euler(delta)
        e_noisy = replace(
            e,
            x=e.x + rng.normal(0.0, spec.sigma_xy),
            y=e.y + rng.normal(0.0, spec.sigma_xy),
            yaw=e.yaw + rng.normal(0.0, spec.sigma_yaw),
        )
        chained = se3.compose(noisy[-1], se3.from_euler(e_noisy))
        ec = se3.to_euler(chained)
        eg = se3.to_euler(gt[i + 1])
        fixed = replace(
            ec,
            z=eg.z + rng.normal(0.0, spec.sigma_z),
            roll=eg.roll + rng.normal(0.0, spec.sigma_roll_pitch),
            pitch=eg.pitch + rng.normal(0.0, spec.sigma_roll_pitch),
        )
        noisy.append(se3.from_euler(fixed))

    frames = tuple(
        TrajectoryFrame(f.frame_id, f.timestamp, p) for f, p in zip(traj.frames, noisy)
    )
    return Trajectory(frames=frames, extrinsic=traj.extrinsic)


def dvl_to_sonar(traj: Trajectory) -> list[Pose]:
    """Per-frame sonar pose: T_dvl * T_dvl->sonar."""
    return [se3.compose(f.dvl_pose, traj.extrinsic) for f in traj.frames]


def _wrap_angle(a: np.ndarray) -> np.ndarray:
    return (a + math.pi) % (2 * math.pi) - math.pi


def trajectory_error(noisy: Trajectory, gt: Trajectory) -> np.ndarray:
    """Per-frame (dx, dy, dz, droll, dpitch, dyaw) in the sonar frame.

    Componentwise differences of the euler decompositions of the sonar poses,
    with angle differences wrapped to [-pi, pi).
    """
    if len(noisy) != len(gt):
        raise ValueError("trajectory length mismatch")
    rows = []
    for pn, pg in zip(dvl_to_sonar(noisy), dvl_to_sonar(gt)):
        en = se3.to_euler(pn).as_vector()
        eg = se3.to_euler(pg).as_vector()
        d = en - eg
        d[3:] = _wrap_angle(d[3:])
        rows.append(d)
    return np.asarray(rows)


# ---------------------------------------------------------------------------
# trajectory file format
#
# Text table, one frame per line:
#   frame_id timestamp r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2
# Header carries the DVL->sonar extrinsic in the same 12-number layout.


def save_trajectory(path, traj: Trajectory):
    with open(path, "w") as f:
        f.write("# sonarfield trajectory v1\n")
        f.write("# extrinsic " + " ".join(f"{v:.17g}" for v in traj.extrinsic.flat()) + "\n")
        f.write("# frame_id timestamp [R|t] row-major\n")
        for fr in traj.frames:
            nums = " ".join(f"{v:.17g}" for v in fr.dvl_pose.flat())
            f.write(f"{fr.frame_id} {fr.timestamp:.17g} {nums}\n")


def load_trajectory(path) -> Trajectory:
    extrinsic = None
    frames = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if parts and parts[0] == "extrinsic":
                    extrinsic = Pose.from_flat(np.array([float(v) for v in parts[1:13]]))
                continue
            parts = line.split()
            frames.append(TrajectoryFrame(
                frame_id=int(parts[0]),
                timestamp=float(parts[1]),
                dvl_pose=Pose.from_flat(np.array([float(v) for v in parts[2:14]])),
            ))
    if extrinsic is None:
        raise ValueError(f"{path}: missing extrinsic header")
    return Trajectory(frames=tuple(frames), extrinsic=extrinsic)
