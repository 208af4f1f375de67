"""Differentiable discrete sonar image formation.

Per pixel: sample the acoustic arc across the elevation aperture, build one
acoustic ray per arc sample, evaluate the SDF along the ray, form the opacity
of the terminal segment and the transmittance of the preceding segments, and
sum (d_phi / r) * T * alpha * M over the arc.

Everything here is torch so gradients flow to the field parameters and to the
se(3) pose correction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .se3 import Pose
from .sensor import DEFAULT_NEAR, SonarIntrinsics

_TAYLOR_EPS = 1e-12


# ---------------------------------------------------------------------------
# se(3) exponential in torch (differentiable at zero twist)


def exp_se3_torch(xi: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Twist (..., 6) = (omega, t) -> rotation (..., 3, 3), translation (..., 3).

    Rodrigues + left Jacobian with Taylor fallback; coefficients are written
    as functions of theta^2 so the map is differentiable at omega = 0 and an
    exactly-zero twist yields an exactly-identity transform.
    """
    omega, t = xi[..., :3], xi[..., 3:]
    th2 = (omega * omega).sum(dim=-1)
    small = th2 < _TAYLOR_EPS
    th = torch.sqrt(torch.clamp(th2, min=_TAYLOR_EPS))
    A = torch.where(small, 1.0 - th2 / 6.0, torch.sin(th) / th)
    B = torch.where(small, 0.5 - th2 / 24.0, (1.0 - torch.cos(th)) / th2.clamp(min=_TAYLOR_EPS))
    C = torch.where(small, 1.0 / 6.0 - th2 / 120.0, (th - torch.sin(th)) / (th2 * th).clamp(min=_TAYLOR_EPS))

    zeros = torch.zeros_like(th2)
    wx, wy, wz = omega[..., 0], omega[..., 1], omega[..., 2]
    W = torch.stack([
        torch.stack([zeros, -wz, wy], dim=-1),
        torch.stack([wz, zeros, -wx], dim=-1),
        torch.stack([-wy, wx, zeros], dim=-1),
    ], dim=-2)
    W2 = W @ W
    eye = torch.eye(3, dtype=xi.dtype, device=xi.device).expand(W.shape)
    R = eye + A[..., None, None] * W + B[..., None, None] * W2
    V = eye + B[..., None, None] * W + C[..., None, None] * W2
    trans = (V @ t[..., None])[..., 0]
    return R, trans


def corrected_pose(base: Pose, twist: torch.Tensor | None,
                   dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    """T * exp(xi) as torch tensors; twist None skips the correction entirely."""
    R0 = torch.as_tensor(base.rotation, dtype=dtype)
    t0 = torch.as_tensor(base.translation, dtype=dtype)
    if twist is None:
        return R0, t0
    dR, dt = exp_se3_torch(twist.to(dtype))
    return R0 @ dR, R0 @ dt + t0


# ---------------------------------------------------------------------------
# opacity / transmittance


def discrete_opacity(n_s: torch.Tensor, n_s1: torch.Tensor, s) -> torch.Tensor:
    """NeuS-style segment opacity from consecutive SDF values, in [0, 1]."""
    phi_a = torch.sigmoid(s * n_s)
    phi_b = torch.sigmoid(s * n_s1)
    return torch.clamp((phi_a - phi_b) / phi_a.clamp(min=1e-300), min=0.0, max=1.0)


def transmittance(alphas: torch.Tensor) -> torch.Tensor:
    """T[x_s] = prod_{r<s} (1 - alpha_r) along the last axis; T[x_0] = 1."""
    ones = torch.ones_like(alphas[..., :1])
    return torch.cumprod(torch.cat([ones, 1.0 - alphas[..., :-1]], dim=-1), dim=-1)


# ---------------------------------------------------------------------------
# rendering


@dataclass(frozen=True)
class SamplingConfig:
    n_arc: int = 32
    n_ray: int = 64
    jitter: bool = False
    near: float = DEFAULT_NEAR


@dataclass
class PixelRenderRecord:
    """Per-sample diagnostics for one rendered pixel."""

    pixel: tuple[int, int]
    intensity: float
    r: np.ndarray            # (n_arc,) sample range (constant along the arc)
    T: np.ndarray            # (n_arc,) transmittance at the arc point
    alpha: np.ndarray        # (n_arc,) terminal-segment opacity
    M: np.ndarray            # (n_arc,) radiance at the arc point
    contributions: np.ndarray  # (n_arc,) summands of the pixel intensity


def _stratified_t(shape: tuple[int, ...], n: int, rng: np.random.Generator | None) -> np.ndarray:
    """Stratified unit-interval samples along the last axis."""
    offs = rng.uniform(0.0, 1.0, size=shape + (n,)) if rng is not None else \
        np.full(shape + (n,), 0.5)
    return (np.arange(n) + offs) / n


def render_pixels(
    field,
    base_pose: Pose,
    pixels: np.ndarray,
    K: SonarIntrinsics,
    sampling: SamplingConfig,
    rng: np.random.Generator | None = None,
    twist: torch.Tensor | None = None,
    want_records: bool = False,
    want_points: bool = False,
):
    """Render a batch of pixels of one image.

    field must expose sdf_eval(x), radiance_eval(x, d) and s (sharpness).
    Returns a dict with "intensity" (B,) plus optional diagnostics.
    """
    dtype = field.s.dtype if torch.is_tensor(field.s) else torch.float64
    pixels = np.atleast_2d(np.asarray(pixels, dtype=int))
    B, n_arc, n_ray = len(pixels), sampling.n_arc, sampling.n_ray
    if n_ray < 2:
        raise ValueError("n_ray must be >= 2")

    r_near = max(K.r_min, sampling.near)
    r_end = K.r_min + (pixels[:, 0] + 0.5) * K.bin_width            # (B,)
    theta = -K.azimuth_fov / 2 + (pixels[:, 1] + 0.5) * K.beam_width

    jrng = rng if sampling.jitter else None
    # arc elevations, stratified over the aperture
    t_phi = _stratified_t((B,), n_arc, jrng)                         # (B, n_arc)
    phis = K.phi_min + K.elevation_aperture * t_phi
    # ray ranges: stratified interior samples plus the arc point itself
    t_r = _stratified_t((B, n_arc), n_ray - 1, jrng)                 # (B, n_arc, n_ray-1)
    ranges = np.concatenate(
        [r_near + (r_end[:, None, None] - r_near) * t_r, np.broadcast_to(
            r_end[:, None, None], (B, n_arc, 1))],
        axis=-1,
    )                                                                # (B, n_arc, n_ray)

    cph, sph = np.cos(phis), np.sin(phis)
    cth, sth = np.cos(theta)[:, None], np.sin(theta)[:, None]
    dirs_sonar = np.stack([cph * cth, cph * sth, sph], axis=-1)      # (B, n_arc, 3)

    dirs_sonar_t = torch.as_tensor(dirs_sonar, dtype=dtype)
    ranges_t = torch.as_tensor(ranges, dtype=dtype)
    R, t = corrected_pose(base_pose, twist, dtype)
    dirs_world = dirs_sonar_t @ R.T                                  # (B, n_arc, 3)
    points = ranges_t[..., None] * dirs_world[:, :, None, :] + t     # (B, n_arc, n_ray, 3)

    sdf = field.sdf_eval(points.reshape(-1, 3)).reshape(B, n_arc, n_ray)
    alphas = discrete_opacity(sdf[..., :-1], sdf[..., 1:], field.s)  # (B, n_arc, n_ray-1)
    trans = transmittance(alphas)                                    # T before each segment
    T_term = trans[..., -1]
    a_term = alphas[..., -1]

    arc_points = points[:, :, -1, :]
    M = field.radiance_eval(arc_points.reshape(-1, 3), dirs_world.reshape(-1, 3)).reshape(B, n_arc)

    d_phi = K.elevation_aperture / n_arc
    r_t = torch.as_tensor(r_end, dtype=dtype)[:, None]
    contributions = d_phi * T_term * a_term * M / r_t                # (B, n_arc)
    intensity = contributions.sum(dim=-1)

    out = {"intensity": intensity}
    if want_points:
        out["points"] = points
        out["arc_points"] = arc_points
        out["dirs_world"] = dirs_world
        out["alphas"] = alphas
    if want_records:
        out["records"] = [
            PixelRenderRecord(
                pixel=(int(p[0]), int(p[1])),
                intensity=float(intensity[b]),
                r=np.full(n_arc, r_end[b]),
                T=T_term[b].detach().cpu().numpy(),
                alpha=a_term[b].detach().cpu().numpy(),
                M=M[b].detach().cpu().numpy(),
                contributions=contributions[b].detach().cpu().numpy(),
            )
            for b, p in enumerate(pixels)
        ]
    return out


def render_pixel(field, base_pose: Pose, pixel, K: SonarIntrinsics,
                 sampling: SamplingConfig, rng=None, twist=None) -> PixelRenderRecord:
    out = render_pixels(field, base_pose, np.asarray([pixel]), K, sampling,
                        rng=rng, twist=twist, want_records=True)
    return out["records"][0]


def render_image(field, base_pose: Pose, K: SonarIntrinsics,
                 sampling: SamplingConfig, twist: torch.Tensor | None = None,
                 chunk: int = 256) -> np.ndarray:
    """Deterministic full-image render (jitter off), (n_range, n_azimuth)."""
    sampling = SamplingConfig(n_arc=sampling.n_arc, n_ray=sampling.n_ray,
                              jitter=False, near=sampling.near)
    ii, jj = np.meshgrid(np.arange(K.n_range), np.arange(K.n_azimuth), indexing="ij")
    pix = np.stack([ii.ravel(), jj.ravel()], axis=-1)
    vals = np.empty(len(pix))
    with torch.no_grad():
        for lo in range(0, len(pix), chunk):
            out = render_pixels(field, base_pose, pix[lo:lo + chunk], K, sampling, twist=twist)
            vals[lo:lo + chunk] = out["intensity"].cpu().numpy()
    return vals.reshape(K.n_range, K.n_azimuth)


# ---------------------------------------------------------------------------
# analytic oracle field


class LambertianAnalyticField:
    """Analytic scene dressed as a field: exact SDF, Lambertian radiance.

    Stands in for the neural fields in oracle comparisons against the dense
    reference integrator.
    """

    def __init__(self, scene, sharpness: float = 20.0, dtype=torch.float64):
        self.scene = scene
        self.s = torch.tensor(float(sharpness), dtype=dtype)

    def sdf_eval(self, x: torch.Tensor) -> torch.Tensor:
        return self.scene.sdf_torch(x)

    def radiance_eval(self, x: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
        n = self.scene.normal(x.detach().cpu().numpy())
        n_t = torch.as_tensor(n, dtype=x.dtype)
        return torch.clamp(-(d * n_t).sum(dim=-1), min=0.0)
