"""Experiment configuration: strict YAML parsing into the typed configs of
the other modules.  Unknown keys are rejected; angle fields in the file are
degrees and are converted to radians exactly once, here.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .drift import NOISE_PRESETS, DriftNoiseSpec
from .fields import FieldConfig, SceneNormalization, scene_from_spec
from .se3 import Pose
from .sensor import SonarIntrinsics
from .simulate import DensityConfig, QuadratureSpec, SpeckleSpec
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid or malformed experiment configuration."""


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "orbit"
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.2
    n_frames: int = 24
    z_offset: float = 0.0
    sweep_deg: float = 360.0
    rate_hz: float = 5.0
    start_angle_deg: float = 0.0
    extrinsic: tuple | None = None     # 12 numbers row-major [R|t], or None

    def __post_init__(self):
        if self.kind != "orbit":
            raise ConfigError(f"unknown trajectory kind {self.kind!r}")
        if self.n_frames < 2 or self.radius <= 0:
            raise ConfigError("orbit needs n_frames >= 2 and radius > 0")

    def extrinsic_pose(self) -> Pose:
        if self.extrinsic is None:
            return Pose.identity()
        return Pose.from_flat(np.asarray(self.extrinsic, dtype=float))


@dataclass(frozen=True)
class EvalSpec:
    bbox_lo: tuple = (-1.0, -1.0, -1.0)
    bbox_hi: tuple = (1.0, 1.0, 1.0)
    resolution: int = 64
    level_lo: float = -0.05
    level_hi: float = 0.05
    level_steps: int = 11
    threshold: float = math.inf
    n_samples: int = 20000

    def __post_init__(self):
        if self.resolution < 8:
            raise ConfigError("eval resolution must be >= 8")
        if self.level_steps < 1 or self.level_lo > self.level_hi:
            raise ConfigError("bad level sweep bounds")

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.bbox_lo, float), np.asarray(self.bbox_hi, float)

    def levels(self) -> np.ndarray:
        return np.linspace(self.level_lo, self.level_hi, self.level_steps)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    output: str
    scene: tuple                       # primitive spec dicts
    intrinsics: SonarIntrinsics
    trajectory: TrajectorySpec
    drift: DriftNoiseSpec
    speckle: SpeckleSpec | None
    quadrature: QuadratureSpec
    density: DensityConfig
    train: TrainConfig
    normalization: SceneNormalization
    eval: EvalSpec
    raw_text: str = field(default="", compare=False)

    def analytic_scene(self):
        return scene_from_spec(list(self.scene))


def _build(cls, data: dict, section: str, **extra):
    """Construct a dataclass from a dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    merged = {**{k: _freeze(v) for k, v in data.items()}, **extra}
    try:
        return cls(**merged)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad section {section!r}: {e}") from e


def _freeze(v):
    return tuple(v) if isinstance(v, list) else v


def _intrinsics(data: dict) -> SonarIntrinsics:
    allowed = {"r_min", "r_max", "azimuth_fov_deg", "elevation_deg",
               "n_range", "n_azimuth"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in 'intrinsics': {sorted(unknown)}")
    missing = allowed - set(data)
    if missing:
        raise ConfigError(f"missing keys in 'intrinsics': {sorted(missing)}")
    half = math.radians(float(data["elevation_deg"])) / 2
    try:
        return SonarIntrinsics(
            r_min=float(data["r_min"]),
            r_max=float(data["r_max"]),
            azimuth_fov=math.radians(float(data["azimuth_fov_deg"])),
            phi_min=-half,
            phi_max=half,
            n_range=int(data["n_range"]),
            n_azimuth=int(data["n_azimuth"]),
        )
    except ValueError as e:
        raise ConfigError(f"bad section 'intrinsics': {e}") from e


def _drift(data) -> DriftNoiseSpec:
    if isinstance(data, str):
        if data not in NOISE_PRESETS:
            raise ConfigError(f"unknown noise preset {data!r}; "
                              f"known: {sorted(NOISE_PRESETS)}")
        return NOISE_PRESETS[data]
    if isinstance(data, dict) and "preset" in data:
        base = _drift(data["preset"])
        rest = {k: v for k, v in data.items() if k != "preset"}
        return _build(DriftNoiseSpec, {**dataclasses.asdict(base), **rest}, "drift")
    return _build(DriftNoiseSpec, data, "drift")


def _scene(data) -> tuple:
    if not isinstance(data, list) or not data:
        raise ConfigError("'scene' must be a non-empty list of primitives")
    try:
        scene_from_spec(data)              # validate types eagerly
    except (KeyError, ValueError) as e:
        raise ConfigError(f"bad section 'scene': {e}") from e
    return tuple(dict(p) for p in data)


def _normalization(data: dict) -> SceneNormalization:
    allowed = {"center", "scale", "bbox_lo", "bbox_hi"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in 'normalization': {sorted(unknown)}")
    if "bbox_lo" in data or "bbox_hi" in data:
        if not ("bbox_lo" in data and "bbox_hi" in data):
            raise ConfigError("'normalization' bbox needs both bbox_lo and bbox_hi")
        return SceneNormalization.from_bbox(data["bbox_lo"], data["bbox_hi"])
    return SceneNormalization(center=np.asarray(data.get("center", [0, 0, 0]), float),
                              scale=float(data.get("scale", 1.0)))


def _train(data: dict) -> TrainConfig:
    data = dict(data)
    fielddata = data.pop("field", {})
    fcfg = _build(FieldConfig, fielddata, "train.field")
    return _build(TrainConfig, data, "train", field=fcfg)


_SECTIONS = {"seed", "output", "scene", "intrinsics", "trajectory", "drift",
             "speckle", "quadrature", "density", "train", "normalization", "eval"}


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("config must be a YAML mapping")
    unknown = set(data) - _SECTIONS
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    for required in ("scene", "intrinsics", "output"):
        if required not in data:
            raise ConfigError(f"missing required section {required!r}")
    speckle = data.get("speckle")
    return ExperimentConfig(
        seed=int(data.get("seed", 0)),
        output=str(data["output"]),
        scene=_scene(data["scene"]),
        intrinsics=_intrinsics(data["intrinsics"]),
        trajectory=_build(TrajectorySpec, data.get("trajectory", {}), "trajectory"),
        drift=_drift(data.get("drift", "sim")),
        speckle=None if speckle is None else _build(SpeckleSpec, speckle, "speckle"),
        quadrature=_build(QuadratureSpec, data.get("quadrature", {}), "quadrature"),
        density=_build(DensityConfig, data.get("density", {}), "density"),
        train=_train(data.get("train", {})),
        normalization=_normalization(data.get("normalization", {})),
        eval=_build(EvalSpec, data.get("eval", {}), "eval"),
        raw_text=text,
    )


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())


def snapshot_config(cfg: ExperimentConfig, outdir):
    """Write the verbatim config text into an output directory."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.raw_text)
