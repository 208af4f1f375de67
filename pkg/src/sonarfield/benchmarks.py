"""Desk-scale benchmark experiment: a sphere+box scene imaged over a 60-frame
orbit, reconstructed three ways (ground-truth poses, drifted poses, drifted
poses with joint pose optimization) and scored against the analytic surface.
"""

from __future__ import annotations

import functools
import json
import math
import time
from pathlib import Path

import numpy as np
import torch

from . import drift as drift_mod
from . import se3
from .fields import (AnalyticScene, BoxPrimitive, FieldConfig,
                     SceneNormalization, SpherePrimitive)
from .meshing import level_sweep, marching_cubes
from .sensor import symmetric_aperture
from .simulate import QuadratureSpec, SpeckleSpec, build_dataset, generate_orbit
from .training import TrainConfig, TrainDataset, save_state, train

# The scene is deliberately compact (~0.3 m objects): odometry drift is an
# absolute error, so a smaller scene makes the drift-induced damage stand out
# against the reconstruction floor, which scales with scene size.
SCENE_SCALE = 0.5
EVAL_BBOX = (np.array([-0.75 * SCENE_SCALE] * 3),
             np.array([0.75 * SCENE_SCALE] * 3))
EVAL_RESOLUTION = 64
EVAL_LEVELS = np.linspace(-0.2 * SCENE_SCALE, 0.2 * SCENE_SCALE, 17)


def benchmark_scene() -> AnalyticScene:
    s = SCENE_SCALE
    return AnalyticScene((
        SpherePrimitive(np.array([0.25 * s, 0.0, 0.0]), 0.3 * s),
        BoxPrimitive(np.array([-0.35 * s, 0.0, -0.1 * s]),
                     np.array([0.2 * s, 0.25 * s, 0.15 * s])),
    ))


def benchmark_intrinsics():
    return symmetric_aperture(0.3 * SCENE_SCALE, 2.5 * SCENE_SCALE,
                              40.0, 14.0, 28, 28)


def benchmark_normalization() -> SceneNormalization:
    return SceneNormalization.from_bbox([-0.7 * SCENE_SCALE] * 3,
                                        [0.7 * SCENE_SCALE] * 3)


def benchmark_dataset(seed: int):
    """Simulated orbit dataset plus its ground-truth trajectory."""
    traj = generate_orbit(np.zeros(3), 1.3 * SCENE_SCALE, 60,
                          z_offset=0.25 * SCENE_SCALE)
    ds = build_dataset(
        benchmark_scene(), traj, benchmark_intrinsics(),
        speckle=SpeckleSpec(sigma_mult=0.15, rayleigh_scale=0.02, seed=seed),
        quadrature=QuadratureSpec(n_phi=64, n_r=8, n_ray=512))
    return ds, traj


def benchmark_train_config(seed: int, iterations: int,
                           pose_opt: bool) -> TrainConfig:
    # The speckled benchmark favours a slightly softer surface and weaker
    # regularization than the package-wide defaults.  Pose corrections, when
    # enabled, are optimized gently from the start of the run and annealed.
    return TrainConfig(iterations=iterations, batch_pixels=24, n_arc=12,
                       n_ray=20, eikonal_points=48, seed=seed,
                       log_interval=250, pose_opt_enabled=pose_opt,
                       pose_opt_start=0, lr_poses=3e-4,
                       lambda_eik=0.1, lambda_reg=0.01,
                       field=FieldConfig(log_s_init=math.log(20.0),
                                         radiance_gain=10.0))


def train_with_pose_refit(ds, noisy_poses, norm, seed: int, iterations: int):
    """Two-phase reconstruction from drifted poses.

    Phase A runs the joint optimization with gentle, annealed pose
    corrections over the first half of the budget; its fully-decayed field
    schedule lets the surface crystallize while the poses settle.  The
    corrections are then baked into the poses and phase B restarts the field
    learning-rate cosine mid-curve on the corrected dataset (a warm restart),
    which re-melts the surface against a now self-consistent pose set.
    """
    half = max(iterations // 2, 1)
    cfg_a = benchmark_train_config(seed, half, True)
    tds = TrainDataset(ds.intrinsics, ds.images, list(noisy_poses), norm,
                       gt_poses=ds.sonar_poses)
    st = train(tds, cfg_a)
    tw = st.twists.detach().numpy()
    corrected = [se3.apply_correction(p, se3.Twist(tw[i, :3], tw[i, 3:]))
                 for i, p in enumerate(noisy_poses)]
    cfg_b = benchmark_train_config(seed, iterations, False)
    tds_b = TrainDataset(ds.intrinsics, ds.images, corrected, norm,
                         gt_poses=ds.sonar_poses)
    return train(tds_b, cfg_b, state=st), cfg_b


def score_sdf(fields, gt_mesh):
    """Level-swept surface distance of a trained SDF against a mesh."""
    def sdf_fn(pts):
        with torch.no_grad():
            x = torch.as_tensor(pts, dtype=fields.log_s.dtype)
            return fields.sdf_eval(x).numpy()
    return level_sweep(sdf_fn, EVAL_BBOX, EVAL_RESOLUTION, gt_mesh,
                       EVAL_LEVELS, n_samples=20000, seed=0)


def run_trend_seed(seed: int, iterations: int, outdir=None,
                   progress=functools.partial(print, flush=True)) -> dict:
    """One seed of the three-method comparison; returns per-mode metrics."""
    out = Path(outdir) if outdir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    t0 = time.time()
    ds, traj = benchmark_dataset(seed)
    progress(f"[seed {seed}] dataset: {time.time() - t0:.0f}s")

    noise = drift_mod.DriftNoiseSpec(sigma_xy=0.004, sigma_yaw=0.004,
                                     sigma_z=0.005, sigma_roll_pitch=0.005,
                                     seed=seed)
    noisy = drift_mod.inject_drift(traj, noise)
    drift_poses = drift_mod.dvl_to_sonar(noisy)
    err = drift_mod.trajectory_error(noisy, traj)
    progress(f"[seed {seed}] final xy drift: {np.linalg.norm(err[-1, :2]):.4f} m")

    gt_mesh = marching_cubes(benchmark_scene().sdf, EVAL_BBOX,
                             EVAL_RESOLUTION).cleaned()
    norm = benchmark_normalization()
    results = {}
    for mode, poses, pose_opt in (("gt", ds.sonar_poses, False),
                                  ("drift", drift_poses, False),
                                  ("ours", drift_poses, True)):
        t0 = time.time()
        if pose_opt:
            st, cfg = train_with_pose_refit(ds, poses, norm, seed, iterations)
        else:
            cfg = benchmark_train_config(seed, iterations, False)
            tds = TrainDataset(ds.intrinsics, ds.images, poses, norm,
                               gt_poses=ds.sonar_poses)
            st = train(tds, cfg)
        if out:
            save_state(out / f"state_{mode}.ckpt", st, cfg)
        level, _, rep = score_sdf(st.fields, gt_mesh)
        results[mode] = {"mean": rep.mean, "rms": rep.rms, "level": level,
                         "train_s": time.time() - t0,
                         "final_loss": st.log[-1]["loss_total"]}
        progress(f"[seed {seed}] {mode}: mean={rep.mean:.4f} rms={rep.rms:.4f} "
                 f"level={level:+.3f} ({time.time() - t0:.0f}s)")
    if out:
        (out / "results.json").write_text(json.dumps(results, indent=2))
    return results
