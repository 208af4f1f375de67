import math

import numpy as np
import pytest
from scipy import stats

from sonarfield import drift, se3, simulate
from sonarfield.drift import (NOISE_PRESETS, DriftNoiseSpec, Trajectory,
                              TrajectoryFrame, dvl_to_sonar, inject_drift,
                              load_trajectory, save_trajectory,
                              trajectory_error)
from sonarfield.se3 import Pose


def straight_line_trajectory(n=20, step=0.1, extrinsic=None):
    frames = tuple(
        TrajectoryFrame(k, k * 0.2, Pose(np.eye(3), np.array([k * step, 0.0, 0.0])))
        for k in range(n))
    return Trajectory(frames=frames, extrinsic=extrinsic or Pose.identity())


class TestTrajectory:
    def test_timestamps_must_increase(self):
        frames = (TrajectoryFrame(0, 0.0, Pose.identity()),
                  TrajectoryFrame(1, 0.0, Pose.identity()))
        with pytest.raises(ValueError):
            Trajectory(frames=frames, extrinsic=Pose.identity())

    def test_noise_spec_rejects_negative(self):
        with pytest.raises(ValueError):
            DriftNoiseSpec(sigma_xy=-0.1)

    def test_presets_documented_levels(self):
        assert NOISE_PRESETS["sim"].sigma_xy == 0.004
        assert NOISE_PRESETS["sim"].sigma_yaw == 0.004
        for level in (0.005, 0.01, 0.015, 0.02):
            p = NOISE_PRESETS[f"real-{level}"]
            assert p.sigma_xy == level and p.sigma_yaw == level


class TestInjectDrift:
    def test_zero_noise_is_identity(self):
        traj = straight_line_trajectory()
        noisy = inject_drift(traj, DriftNoiseSpec())
        for a, b in zip(traj.frames, noisy.frames):
            np.testing.assert_allclose(a.dvl_pose.matrix(), b.dvl_pose.matrix(),
                                       atol=1e-12)

    def test_first_frame_unperturbed(self):
        traj = straight_line_trajectory()
        noisy = inject_drift(traj, DriftNoiseSpec(0.05, 0.05, 0.05, 0.05, seed=1))
        assert np.array_equal(noisy.frames[0].dvl_pose.flat(),
                              traj.frames[0].dvl_pose.flat())

    def test_deterministic_per_seed(self):
        traj = straight_line_trajectory()
        spec = DriftNoiseSpec(0.01, 0.01, 0.01, 0.01, seed=9)
        a = inject_drift(traj, spec)
        b = inject_drift(traj, spec)
        for fa, fb in zip(a.frames, b.frames):
            assert np.array_equal(fa.dvl_pose.flat(), fb.dvl_pose.flat())

    def test_z_roll_pitch_bounded_by_absolute_noise(self):
        # drifting axes wander, drift-free axes stay near GT
        traj = straight_line_trajectory(n=200, step=0.05)
        spec = DriftNoiseSpec(sigma_xy=0.01, sigma_yaw=0.01,
                              sigma_z=0.002, sigma_roll_pitch=0.002, seed=3)
        err = trajectory_error(inject_drift(traj, spec), traj)
        assert np.abs(err[:, 2]).max() < 6 * 0.002       # z stays absolute
        assert np.abs(err[:, 3]).max() < 6 * 0.002       # roll
        assert np.abs(err[:, 4]).max() < 6 * 0.002       # pitch
        # xy error at the end far exceeds the per-step noise
        assert np.linalg.norm(err[-1, :2]) > 3 * 0.01

    def test_variance_grows_linearly_on_drifting_axes(self):
        traj = straight_line_trajectory(n=60, step=0.02)
        sigma = 0.004
        spec_base = DriftNoiseSpec(sigma_xy=sigma, sigma_yaw=sigma,
                                   sigma_z=0.005, sigma_roll_pitch=0.005)
        errs = np.stack([
            trajectory_error(inject_drift(
                traj, DriftNoiseSpec(sigma, sigma, 0.005, 0.005, seed=s)), traj)
            for s in range(120)
        ])                                              # (seeds, frames, 6)
        k = np.arange(60)
        var_x = errs[:, :, 0].var(axis=0)
        lin = stats.linregress(k, var_x)
        assert lin.rvalue ** 2 > 0.85
        # z variance shows no trend
        lin_z = stats.linregress(k[1:], errs[:, 1:, 2].var(axis=0))
        t = lin_z.slope / lin_z.stderr
        assert abs(t) < 3.0

    def test_requires_two_frames(self):
        tr = Trajectory(frames=(TrajectoryFrame(0, 0.0, Pose.identity()),),
                        extrinsic=Pose.identity())
        with pytest.raises(ValueError):
            inject_drift(tr, DriftNoiseSpec())


class TestSonarMapping:
    def test_extrinsic_composition(self):
        extr = se3.from_euler(se3.EulerDecomposition(0.1, 0.0, 0.2, 0.3, 0.0, -0.1))
        traj = straight_line_trajectory(extrinsic=extr)
        sonar = dvl_to_sonar(traj)
        for f, s in zip(traj.frames, sonar):
            np.testing.assert_allclose(
                s.matrix(), se3.compose(f.dvl_pose, extr).matrix(), atol=1e-14)

    def test_error_wraps_angles(self):
        base = straight_line_trajectory(n=2)
        yawed = Trajectory(frames=(
            base.frames[0],
            TrajectoryFrame(1, 0.2, se3.from_euler(
                se3.EulerDecomposition(0, 0, math.pi - 0.05, 0.1, 0, 0))),
        ), extrinsic=Pose.identity())
        other = Trajectory(frames=(
            base.frames[0],
            TrajectoryFrame(1, 0.2, se3.from_euler(
                se3.EulerDecomposition(0, 0, -math.pi + 0.05, 0.1, 0, 0))),
        ), extrinsic=Pose.identity())
        err = trajectory_error(yawed, other)
        assert abs(err[1, 5]) == pytest.approx(0.1, abs=1e-9)


class TestTrajectoryIO:
    def test_roundtrip_exact(self, tmp_path):
        traj = inject_drift(straight_line_trajectory(),
                            DriftNoiseSpec(0.01, 0.01, 0.01, 0.01, seed=2))
        p = tmp_path / "traj.txt"
        save_trajectory(p, traj)
        back = load_trajectory(p)
        assert len(back) == len(traj)
        assert np.array_equal(back.extrinsic.flat(), traj.extrinsic.flat())
        for a, b in zip(traj.frames, back.frames):
            assert a.frame_id == b.frame_id
            assert a.timestamp == b.timestamp
            assert np.array_equal(a.dvl_pose.flat(), b.dvl_pose.flat())

    def test_missing_extrinsic_rejected(self, tmp_path):
        p = tmp_path / "bad.txt"
        p.write_text("0 0.0 " + " ".join(["1"] + ["0"] * 11) + "\n")
        with pytest.raises(ValueError):
            load_trajectory(p)
