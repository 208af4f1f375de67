"""Command-line pipeline: simulate -> corrupt -> train -> extract -> eval.

One experiment directory per run, containing a verbatim config snapshot, the
immutable simulated dataset, corrupted trajectories, per-mode training
outputs, meshes, and the final results table with figures.  Exit codes:
0 success, 2 config error, 3 numeric failure, 4 degenerate result.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import click
import numpy as np

from . import drift as drift_mod
from . import se3, simulate, training
from .config import ConfigError, ExperimentConfig, load_config, snapshot_config
from .fields import load_checkpoint
from .meshing import (DegenerateReportError, EmptyMeshError, level_sweep,
                      marching_cubes, mesh_distance, save_mesh)
from .reporting import MethodResult, write_report
from .training import NumericsError

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_DEGENERATE = 4

MODES = ("gt", "drift", "ours")


@contextmanager
def _dir_lock(outdir: Path):
    """Single-writer guard for one experiment directory."""
    outdir.mkdir(parents=True, exist_ok=True)
    lock = outdir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"experiment directory is locked: {lock} "
                          "(another run in progress, or a stale lock)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as e:
            click.echo(f"config error: {e}", err=True)
            sys.exit(EXIT_CONFIG)
        except NumericsError as e:
            click.echo(f"numeric failure: {e}"
                       + (f" (batch dump: {e.dump_path})" if e.dump_path else ""),
                       err=True)
            sys.exit(EXIT_NUMERIC)
        except (EmptyMeshError, DegenerateReportError) as e:
            click.echo(f"degenerate result: {e}", err=True)
            sys.exit(EXIT_DEGENERATE)
    return wrapper


def _load(config_path, seed, out) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(config_path)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=int(seed),
                                  train=dataclasses.replace(cfg.train, seed=int(seed)),
                                  drift=dataclasses.replace(cfg.drift, seed=int(seed)))
    outdir = Path(out) if out else Path(cfg.output)
    return cfg, outdir


def _config_options(fn):
    fn = click.option("--config", "config_path", required=True,
                      type=click.Path(), help="experiment config YAML")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="override the config seed")(fn)
    fn = click.option("--out", type=click.Path(), default=None,
                      help="override the output directory")(fn)
    return fn


@click.group()
def main():
    """Sonar surface reconstruction pipeline."""


# ---------------------------------------------------------------------------
# simulate


def _run_simulate(cfg: ExperimentConfig, outdir: Path):
    snapshot_config(cfg, outdir)
    scene = cfg.analytic_scene()
    t = cfg.trajectory
    import math
    traj = simulate.generate_orbit(
        center=np.asarray(t.center, float), radius=t.radius, n_frames=t.n_frames,
        z_offset=t.z_offset, sweep=math.radians(t.sweep_deg), rate_hz=t.rate_hz,
        extrinsic=t.extrinsic_pose(), start_angle=math.radians(t.start_angle_deg))
    speckle = cfg.speckle
    if speckle is not None:
        speckle = dataclasses.replace(speckle, seed=cfg.seed)
    ds = simulate.build_dataset(scene, traj, cfg.intrinsics, speckle=speckle,
                                quadrature=cfg.quadrature, density=cfg.density,
                                scene_spec=list(cfg.scene))
    manifest = simulate.save_dataset(outdir / "dataset", ds)
    click.echo(f"simulated {len(ds.images)} frames -> {outdir / 'dataset'} "
               f"({len(manifest)} files)")
    return ds


@main.command("simulate")
@_config_options
@_handle_errors
def cmd_simulate(config_path, seed, out):
    """Generate the synthetic sonar dataset."""
    cfg, outdir = _load(config_path, seed, out)
    with _dir_lock(outdir):
        _run_simulate(cfg, outdir)


# ---------------------------------------------------------------------------
# corrupt


def _run_corrupt(cfg: ExperimentConfig, outdir: Path, noise_preset: str | None):
    gt_path = outdir / "dataset" / "trajectory_gt.txt"
    if not gt_path.is_file():
        raise ConfigError(f"missing ground-truth trajectory: {gt_path} "
                          "(run simulate first)")
    spec = cfg.drift
    if noise_preset:
        if noise_preset not in drift_mod.NOISE_PRESETS:
            raise ConfigError(f"unknown noise preset {noise_preset!r}")
        spec = dataclasses.replace(drift_mod.NOISE_PRESETS[noise_preset],
                                   seed=cfg.drift.seed)
    traj = drift_mod.load_trajectory(gt_path)
    noisy = drift_mod.inject_drift(traj, spec)
    drift_mod.save_trajectory(outdir / "trajectory_drift.txt", noisy)
    err = drift_mod.trajectory_error(noisy, traj)
    np.savetxt(outdir / "drift_stats.txt", err,
               header="dx dy dz droll dpitch dyaw (sonar frame, per frame)")
    click.echo(f"corrupted trajectory -> {outdir / 'trajectory_drift.txt'} "
               f"(final xy error {np.linalg.norm(err[-1, :2]):.4f} m)")
    return noisy


@main.command("corrupt")
@_config_options
@click.option("--noise-preset", default=None, help="named drift level override")
@_handle_errors
def cmd_corrupt(config_path, seed, out, noise_preset):
    """Inject odometry drift into the ground-truth trajectory."""
    cfg, outdir = _load(config_path, seed, out)
    with _dir_lock(outdir):
        _run_corrupt(cfg, outdir, noise_preset)


# ---------------------------------------------------------------------------
# train


def _mode_poses(outdir: Path, ds: simulate.SimDataset, mode: str):
    if mode == "gt":
        return ds.sonar_poses
    drift_path = outdir / "trajectory_drift.txt"
    if not drift_path.is_file():
        raise ConfigError(f"missing drifted trajectory: {drift_path} "
                          "(run corrupt first)")
    return drift_mod.dvl_to_sonar(drift_mod.load_trajectory(drift_path))


def _run_train(cfg: ExperimentConfig, outdir: Path, mode: str) -> training.TrainState:
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; choose from {MODES}")
    if not (outdir / "dataset" / "dataset.json").is_file():
        raise ConfigError(f"missing dataset in {outdir / 'dataset'} "
                          "(run simulate first)")
    ds = simulate.load_dataset(outdir / "dataset")
    tcfg = dataclasses.replace(cfg.train, pose_opt_enabled=(mode == "ours"))
    tds = training.TrainDataset(
        intrinsics=ds.intrinsics,
        images=ds.images,
        poses=_mode_poses(outdir, ds, mode),
        normalization=cfg.normalization,
        gt_poses=ds.sonar_poses,
    )
    run_dir = outdir / f"train_{mode}"
    run_dir.mkdir(parents=True, exist_ok=True)
    st = training.train(tds, tcfg, checkpoint_dir=run_dir)
    training.save_state(run_dir / "state_final.ckpt", st, tcfg)
    with open(run_dir / "log.ndjson", "w") as f:
        for rec in st.log:
            f.write(json.dumps(rec) + "\n")
    click.echo(f"trained mode={mode} for {st.iteration} iterations -> {run_dir}")
    return st


@main.command("train")
@_config_options
@click.option("--mode", default="ours", help="gt | drift | ours")
@_handle_errors
def cmd_train(config_path, seed, out, mode):
    """Optimize the fields (and, for mode=ours, the pose corrections)."""
    cfg, outdir = _load(config_path, seed, out)
    with _dir_lock(outdir):
        _run_train(cfg, outdir, mode)


# ---------------------------------------------------------------------------
# extract / eval


def _checkpoint_sdf(outdir: Path, mode: str):
    ckpt = outdir / f"train_{mode}" / "state_final.ckpt"
    if not ckpt.is_file():
        raise ConfigError(f"missing checkpoint: {ckpt} (run train first)")
    params, _ = load_checkpoint(ckpt)

    import torch

    def sdf_fn(pts: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            x = torch.as_tensor(pts, dtype=params.log_s.dtype)
            return params.sdf_eval(x).cpu().numpy()

    return sdf_fn


def _run_extract(cfg: ExperimentConfig, outdir: Path, mode: str):
    sdf_fn = _checkpoint_sdf(outdir, mode)
    mesh = marching_cubes(sdf_fn, cfg.eval.bbox(), cfg.eval.resolution).cleaned()
    if mesh.is_empty:
        raise EmptyMeshError(f"mode {mode}: zero level set not found in the eval box")
    path = outdir / f"mesh_{mode}.off"
    save_mesh(path, mesh)
    click.echo(f"extracted mode={mode}: {len(mesh.vertices)} vertices -> {path}")
    return mesh


@main.command("extract")
@_config_options
@click.option("--mode", default="ours", help="gt | drift | ours")
@_handle_errors
def cmd_extract(config_path, seed, out, mode):
    """Extract the zero level set of a trained SDF as a mesh."""
    cfg, outdir = _load(config_path, seed, out)
    with _dir_lock(outdir):
        _run_extract(cfg, outdir, mode)


def _run_eval(cfg: ExperimentConfig, outdir: Path, modes: list[str]):
    scene = cfg.analytic_scene()
    gt_mesh = marching_cubes(scene.sdf, cfg.eval.bbox(), cfg.eval.resolution).cleaned()
    if gt_mesh.is_empty:
        raise EmptyMeshError("ground-truth surface not inside the eval box")
    save_mesh(outdir / "mesh_reference.off", gt_mesh)

    results, logs, traj_errors = [], {}, {}
    for mode in modes:
        sdf_fn = _checkpoint_sdf(outdir, mode)
        level, best_mesh, report = level_sweep(
            sdf_fn, cfg.eval.bbox(), cfg.eval.resolution, gt_mesh,
            cfg.eval.levels(), n_samples=cfg.eval.n_samples,
            threshold=cfg.eval.threshold, seed=cfg.seed)
        save_mesh(outdir / f"mesh_{mode}_best.off", best_mesh)
        results.append(MethodResult(method=mode, level=level, report=report))
        log_path = outdir / f"train_{mode}" / "log.ndjson"
        if log_path.is_file():
            logs[mode] = [json.loads(line) for line in log_path.read_text().splitlines()]
    drift_path = outdir / "trajectory_drift.txt"
    gt_path = outdir / "dataset" / "trajectory_gt.txt"
    if drift_path.is_file() and gt_path.is_file():
        traj_errors["drift"] = drift_mod.trajectory_error(
            drift_mod.load_trajectory(drift_path), drift_mod.load_trajectory(gt_path))
    paths = write_report(outdir, results, logs=logs, trajectory_errors=traj_errors)
    for res in results:
        click.echo(f"{res.method}\trms={res.report.rms:.6f}\t"
                   f"mean={res.report.mean:.6f}\tlevel={res.level:+.4f}")
    click.echo(f"report -> {paths['table']}")
    return results


@main.command("eval")
@_config_options
@click.option("--mode", "modes", multiple=True,
              help="methods to evaluate (repeatable); default: all trained")
@_handle_errors
def cmd_eval(config_path, seed, out, modes):
    """Level-sweep each trained SDF and tabulate surface distances vs GT."""
    cfg, outdir = _load(config_path, seed, out)
    with _dir_lock(outdir):
        selected = list(modes) if modes else [
            m for m in MODES if (outdir / f"train_{m}" / "state_final.ckpt").is_file()]
        if not selected:
            raise ConfigError("no trained checkpoints found; run train first")
        _run_eval(cfg, outdir, selected)


# ---------------------------------------------------------------------------
# pipeline


@main.command("pipeline")
@_config_options
@click.option("--mode", "modes", multiple=True,
              help="methods to train+evaluate (repeatable); default: all three")
@click.option("--noise-preset", default=None, help="named drift level override")
@_handle_errors
def cmd_pipeline(config_path, seed, out, modes, noise_preset):
    """Run simulate, corrupt, train (per mode), extract, and eval."""
    cfg, outdir = _load(config_path, seed, out)
    selected = list(modes) if modes else list(MODES)
    with _dir_lock(outdir):
        _run_simulate(cfg, outdir)
        _run_corrupt(cfg, outdir, noise_preset)
        for mode in selected:
            _run_train(cfg, outdir, mode)
            _run_extract(cfg, outdir, mode)
        _run_eval(cfg, outdir, selected)


if __name__ == "__main__":
    main()
