"""Synthetic sonar data: dense-quadrature reference integration of the
continuous image formation model over analytic SDF scenes, speckle noise,
orbit trajectory generation, and dataset assembly/IO.

The reference integrator doubles as the independent oracle for the discrete
differentiable renderer.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import se3
from .drift import Trajectory, TrajectoryFrame
from .fields import AnalyticScene
from .se3 import Pose
from .sensor import DEFAULT_NEAR, SonarIntrinsics

_IMG_MAGIC = b"SONARIMG1\n"


# ---------------------------------------------------------------------------
# density models for the continuous integrator


@dataclass(frozen=True)
class QuadratureSpec:
    n_phi: int = 128         # elevation nodes over the aperture
    n_r: int = 16            # nodes inside each range-bin window
    n_ray: int = 2048        # dense radial grid for the transmittance integral

    def __post_init__(self):
        if min(self.n_phi, self.n_r, self.n_ray) < 8:
            raise ValueError("quadrature counts must be >= 8")


@dataclass(frozen=True)
class DensityConfig:
    """Volumetric density around the zero level set of the scene SDF.

    model "bump": isotropic thin shell, sigma = kappa * b(sdf / w_surf) with
    b a unit-peak logistic bump.  model "sigmoid": surface-crossing density
    sigma = s * max(-d . grad N, 0) * logistic(-s * sdf), the continuous
    counterpart of sigmoid-opacity discrete rendering; with this model the
    discrete renderer and this integrator approximate the same integral.
    """

    model: str = "sigmoid"
    sharpness: float = 20.0      # s of the sigmoid model
    kappa: float = 200.0         # 1/m, peak density of the bump model
    w_surf: float = 0.02         # m, bump width

    def __post_init__(self):
        if self.model not in ("sigmoid", "bump"):
            raise ValueError(f"unknown density model {self.model!r}")


def _density(cfg: DensityConfig, sdf: np.ndarray, ddotg: np.ndarray) -> np.ndarray:
    """sigma at sample points; ddotg = d . grad(sdf) along the ray."""
    if cfg.model == "sigmoid":
        return cfg.sharpness * np.maximum(-ddotg, 0.0) * expit(-cfg.sharpness * sdf)
    u = expit(sdf / cfg.w_surf)
    return cfg.kappa * 4.0 * u * (1.0 - u)


# ---------------------------------------------------------------------------
# reference integrator


def reference_render(
    scene: AnalyticScene,
    T: Pose,
    K: SonarIntrinsics,
    quadrature: QuadratureSpec = QuadratureSpec(),
    density: DensityConfig = DensityConfig(),
    near: float = DEFAULT_NEAR,
    window: str = "centered",
    window_n_ray: int | None = None,
) -> np.ndarray:
    """Dense 2D quadrature of the continuous image formation integral.

    Per pixel, integrates (1/r) T sigma M over elevation and over the pixel's
    range window, with transmittance from the cumulative radial integral of
    sigma and a Lambertian reflectance max(0, -d . n) standing in for M.

    window "centered": (r_i - h/2, r_i + h/2) with h the range-bin width.
    window "trailing": (r_i - d_i/2, r_i] with d_i = (r_i - r_near)/(n - 1),
    the terminal segment of a discrete renderer that pins its last sample to
    r_i after n - 1 midpoint-stratified interior samples (n = window_n_ray);
    used for renderer/quadrature equivalence checks.
    """
    if window not in ("centered", "trailing"):
        raise ValueError(f"unknown window mode {window!r}")
    if window == "trailing" and not window_n_ray:
        raise ValueError("trailing window needs window_n_ray")

    r_near = max(K.r_min, near)
    nphi, nr = quadrature.n_phi, quadrature.n_r
    # dense radial grid shared by all rays
    rgrid = np.linspace(r_near, K.r_max, quadrature.n_ray)
    h_grid = rgrid[1] - rgrid[0]
    phis = K.phi_min + (np.arange(nphi) + 0.5) * K.elevation_aperture / nphi
    d_phi = K.elevation_aperture / nphi

    r_centers = K.range_centers()
    if window == "centered":
        half = K.bin_width / 2
        win_lo = r_centers - half
        win_hi = r_centers + half
    else:
        seg = (r_centers - r_near) / (window_n_ray - 1)
        win_lo = r_centers - seg / 2
        win_hi = r_centers.copy()
    win_lo = np.clip(win_lo, r_near, K.r_max)
    # n_r nodes per window, trapezoid weights
    tt = np.linspace(0.0, 1.0, nr)
    win_r = win_lo[:, None] + (win_hi - win_lo)[:, None] * tt      # (n_range, n_r)
    wts = np.full(nr, 1.0 / (nr - 1))
    wts[0] = wts[-1] = 0.5 / (nr - 1)
    wts = wts * (win_hi - win_lo)[:, None]                          # (n_range, n_r)

    cph, sph = np.cos(phis), np.sin(phis)
    image = np.zeros((K.n_range, K.n_azimuth))

    for j, theta in enumerate(K.azimuth_centers()):
        # directions for every elevation at this beam: (nphi, 3) sonar frame
        d_sonar = np.stack([cph * math.cos(theta), cph * math.sin(theta), sph], axis=-1)
        d_world = d_sonar @ T.rotation.T
        pts = rgrid[None, :, None] * d_world[:, None, :] + T.translation
        flat = pts.reshape(-1, 3)
        sdf = scene.sdf(flat).reshape(nphi, -1)
        grad = scene.grad(flat).reshape(nphi, -1, 3)
        ddotg = np.einsum("pd,prd->pr", d_world, grad)
        sigma = _density(density, sdf, ddotg)
        # transmittance: cumulative trapezoid of sigma along r
        F = np.concatenate(
            [np.zeros((nphi, 1)), np.cumsum((sigma[:, 1:] + sigma[:, :-1]) / 2 * h_grid, axis=1)],
            axis=1,
        )
        gnorm = np.linalg.norm(grad, axis=-1)
        lamb = np.maximum(-ddotg / np.maximum(gnorm, 1e-12), 0.0)
        emission = np.exp(-F) * sigma * lamb / rgrid[None, :]       # (nphi, n_ray)

        # interpolate emission at the window nodes (uniform grid -> index math)
        x = (win_r - r_near) / h_grid                               # (n_range, n_r)
        i0 = np.clip(x.astype(int), 0, len(rgrid) - 2)
        frac = x - i0
        e0 = emission[:, i0]                                        # (nphi, n_range, n_r)
        e1 = emission[:, i0 + 1]
        e_win = e0 + frac * (e1 - e0)
        # trapezoid over the window, midpoint sum over elevation
        image[:, j] = d_phi * np.einsum("prn,rn->r", e_win, wts)
    return image


# ---------------------------------------------------------------------------
# speckle


@dataclass(frozen=True)
class SpeckleSpec:
    sigma_mult: float = 0.15       # std of multiplicative Gaussian
    rayleigh_scale: float = 0.2    # scale of additive Rayleigh
    seed: int = 0

    def __post_init__(self):
        if self.sigma_mult < 0 or self.rayleigh_scale < 0:
            raise ValueError("speckle parameters must be >= 0")


def add_speckle(img: np.ndarray, spec: SpeckleSpec) -> np.ndarray:
    """I' = clamp(I * (1 + w_mult) + w_add, 0) with i.i.d. per-pixel noise."""
    if (img < 0).any():
        raise ValueError("intensities must be >= 0")
    rng = np.random.default_rng(spec.seed)
    out = img.astype(float)
    if spec.sigma_mult > 0:
        out = out * (1.0 + rng.normal(0.0, spec.sigma_mult, size=img.shape))
    if spec.rayleigh_scale > 0:
        out = out + rng.rayleigh(spec.rayleigh_scale, size=img.shape)
    return np.maximum(out, 0.0)


# ---------------------------------------------------------------------------
# trajectories


def generate_orbit(
    center: np.ndarray,
    radius: float,
    n_frames: int,
    z_offset: float = 0.0,
    sweep: float = 2 * math.pi,
    rate_hz: float = 5.0,
    extrinsic: Pose | None = None,
    start_angle: float = 0.0,
) -> Trajectory:
    """DVL poses on a circular orbit with the sonar axis through the center.

    The vehicle sits at center + (radius cos a, radius sin a, z_offset) and
    yaws so that the body x axis points at the scene center (pitching as
    needed when z_offset is nonzero).  Sonar poses follow from the extrinsic.
    """
    if n_frames < 2 or radius <= 0:
        raise ValueError("need n_frames >= 2 and radius > 0")
    center = np.asarray(center, dtype=float)
    extr = extrinsic or Pose.identity()
    extr_inv = se3.inverse(extr)
    frames = []
    for k in range(n_frames):
        a = start_angle + sweep * k / n_frames
        pos = center + np.array([radius * math.cos(a), radius * math.sin(a), z_offset])
        fwd = center - pos
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        R = np.stack([fwd, -right, up], axis=1)   # columns: x fwd, y starboard, z up
        sonar = Pose(R, pos)
        frames.append(TrajectoryFrame(k, k / rate_hz, se3.compose(sonar, extr_inv)))
    return Trajectory(frames=tuple(frames), extrinsic=extr)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class SimDataset:
    intrinsics: SonarIntrinsics
    images: list[np.ndarray]
    sonar_poses: list[Pose]
    trajectory: Trajectory             # ground-truth DVL trajectory
    scene_spec: list[dict]
    generation: dict

    def __post_init__(self):
        if not (len(self.images) == len(self.sonar_poses) == len(self.trajectory)):
            raise ValueError("frame count mismatch")
        for img in self.images:
            if img.shape != (self.intrinsics.n_range, self.intrinsics.n_azimuth):
                raise ValueError("image dims do not match intrinsics")


def frame_speckle_spec(spec: SpeckleSpec, frame_id: int) -> SpeckleSpec:
    """Independent per-frame noise stream derived from (seed, frame id)."""
    sub = np.random.SeedSequence([spec.seed, frame_id]).generate_state(1)[0]
    return SpeckleSpec(spec.sigma_mult, spec.rayleigh_scale, seed=int(sub))


def build_dataset(
    scene: AnalyticScene,
    trajectory: Trajectory,
    K: SonarIntrinsics,
    speckle: SpeckleSpec | None = None,
    quadrature: QuadratureSpec = QuadratureSpec(),
    density: DensityConfig = DensityConfig(),
    scene_spec: list[dict] | None = None,
) -> SimDataset:
    from .drift import dvl_to_sonar

    sonar_poses = dvl_to_sonar(trajectory)
    clean = [reference_render(scene, pose, K, quadrature, density)
             for pose in sonar_poses]
    # normalize the dataset to peak intensity 1 before adding noise, so the
    # speckle scales are relative to the signal range, as on real sonar
    # imagery; the factor is recorded in the generation metadata
    peak = max(img.max() for img in clean)
    scale = 1.0 / peak if peak > 0 else 1.0
    images = []
    for fr, img in zip(trajectory.frames, clean):
        img = img * scale
        if speckle is not None:
            img = add_speckle(img, frame_speckle_spec(speckle, fr.frame_id))
        images.append(img.astype(np.float32).astype(float))
    return SimDataset(
        intrinsics=K,
        images=images,
        sonar_poses=sonar_poses,
        trajectory=trajectory,
        scene_spec=scene_spec or [],
        generation={
            "quadrature": asdict(quadrature),
            "density": asdict(density),
            "speckle": asdict(speckle) if speckle else None,
            "intensity_scale": scale,
        },
    )


# ---------------------------------------------------------------------------
# image / dataset IO


def save_image(path, img: np.ndarray):
    """2D float grid: magic, uint32 dims, little-endian float32 row-major."""
    img = np.asarray(img, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_IMG_MAGIC)
        f.write(struct.pack("<II", img.shape[0], img.shape[1]))
        f.write(np.ascontiguousarray(img).tobytes())


def load_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(len(_IMG_MAGIC)) != _IMG_MAGIC:
            raise ValueError(f"{path}: not a sonar image file")
        rows, cols = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(4 * rows * cols), dtype="<f4")
    return data.reshape(rows, cols).astype(float)


def export_png(path, img: np.ndarray):
    """Optional 16-bit grayscale export for viewing."""
    from PIL import Image

    peak = float(img.max()) or 1.0
    arr = np.clip(img / peak * 65535.0, 0, 65535).astype(np.uint16)
    Image.fromarray(arr, mode="I;16").save(path)


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def save_dataset(dirpath, ds: SimDataset) -> dict:
    """Write a dataset directory and return its manifest."""
    from .drift import save_trajectory

    d = Path(dirpath)
    (d / "frames").mkdir(parents=True, exist_ok=True)
    meta = {
        "intrinsics": asdict(ds.intrinsics),
        "scene": ds.scene_spec,
        "generation": ds.generation,
        "n_frames": len(ds.images),
    }
    (d / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    save_trajectory(d / "trajectory_gt.txt", ds.trajectory)
    for fr, img in zip(ds.trajectory.frames, ds.images):
        save_image(d / "frames" / f"frame_{fr.frame_id:05d}.img", img)
    files = sorted(p for p in d.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {str(p.relative_to(d)): _digest(p) for p in files}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_dataset(dirpath) -> SimDataset:
    from .drift import dvl_to_sonar, load_trajectory

    d = Path(dirpath)
    meta = json.loads((d / "dataset.json").read_text())
    K = SonarIntrinsics(**meta["intrinsics"])
    traj = load_trajectory(d / "trajectory_gt.txt")
    images = [load_image(d / "frames" / f"frame_{fr.frame_id:05d}.img") for fr in traj.frames]
    return SimDataset(
        intrinsics=K,
        images=images,
        sonar_poses=dvl_to_sonar(traj),
        trajectory=traj,
        scene_spec=meta["scene"],
        generation=meta["generation"],
    )
