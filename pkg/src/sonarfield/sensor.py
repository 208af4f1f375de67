"""Sonar intrinsics and world-frame sampling along acoustic arcs and rays.

Sonar frame convention (used consistently by the simulator and renderer):
x forward along the acoustic axis, y starboard, z up.  Azimuth theta rotates
about z, elevation phi about y, so a point at (r, theta, phi) sits at
(r cos(phi) cos(theta), r cos(phi) sin(theta), r sin(phi)) in the sonar frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .se3 import Pose, transform_points

# Keeps ray sampling away from the 1/r singularity at the transducer.
DEFAULT_NEAR = 0.05


@dataclass(frozen=True)
class SonarIntrinsics:
    r_min: float
    r_max: float
    azimuth_fov: float           # radians, centered on the acoustic axis
    phi_min: float               # radians, elevation aperture lower bound
    phi_max: float
    n_range: int
    n_azimuth: int

    def __post_init__(self):
        if not (0 < self.r_min < self.r_max):
            raise ValueError("need 0 < r_min < r_max")
        if not self.phi_min < self.phi_max:
            raise ValueError("need phi_min < phi_max")
        if self.n_range < 1 or self.n_azimuth < 1:
            raise ValueError("need at least one range bin and one beam")
        if self.azimuth_fov <= 0:
            raise ValueError("azimuth_fov must be positive")

    @property
    def bin_width(self) -> float:
        return (self.r_max - self.r_min) / self.n_range

    @property
    def beam_width(self) -> float:
        return self.azimuth_fov / self.n_azimuth

    @property
    def elevation_aperture(self) -> float:
        return self.phi_max - self.phi_min

    def range_centers(self) -> np.ndarray:
        return self.r_min + (np.arange(self.n_range) + 0.5) * self.bin_width

    def azimuth_centers(self) -> np.ndarray:
        return -self.azimuth_fov / 2 + (np.arange(self.n_azimuth) + 0.5) * self.beam_width


def symmetric_aperture(
    r_min: float,
    r_max: float,
    azimuth_fov_deg: float,
    elevation_deg: float,
    n_range: int,
    n_azimuth: int,
) -> SonarIntrinsics:
    """Intrinsics with the elevation aperture centered on the acoustic axis.

    The 14 and 28 degree presets of typical FLS units map to
    elevation_deg=14.0 / 28.0.
    """
    half = math.radians(elevation_deg) / 2
    return SonarIntrinsics(
        r_min=r_min,
        r_max=r_max,
        azimuth_fov=math.radians(azimuth_fov_deg),
        phi_min=-half,
        phi_max=half,
        n_range=n_range,
        n_azimuth=n_azimuth,
    )


@dataclass(frozen=True)
class ArcSampleSet:
    """Points on the acoustic arc of one pixel: fixed (r, theta), varying phi."""

    points: np.ndarray        # (n_arc, 3) world frame
    elevations: np.ndarray    # (n_arc,) strictly increasing
    r: float
    azimuth: float
    d_phi: float              # elevation stratum width


@dataclass(frozen=True)
class RaySampleSet:
    """Points along one acoustic ray, ordered by strictly increasing range."""

    points: np.ndarray        # (n_ray, 3) world frame
    ranges: np.ndarray        # (n_ray,)


def pixel_to_polar(i_range: int, i_azimuth: int, K: SonarIntrinsics) -> tuple[float, float]:
    """Bin-center (r, theta) of a pixel."""
    if not (0 <= i_range < K.n_range and 0 <= i_azimuth < K.n_azimuth):
        raise IndexError(f"pixel ({i_range}, {i_azimuth}) outside {K.n_range}x{K.n_azimuth}")
    r = K.r_min + (i_range + 0.5) * K.bin_width
    theta = -K.azimuth_fov / 2 + (i_azimuth + 0.5) * K.beam_width
    return r, theta


def spherical_to_sonar(r, theta, phi) -> np.ndarray:
    """(r, theta, phi) -> sonar-frame xyz; broadcasts over array inputs."""
    r = np.asarray(r, dtype=float)
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    return np.stack(
        [r * np.cos(phi) * np.cos(theta), r * np.cos(phi) * np.sin(theta), r * np.sin(phi)],
        axis=-1,
    )


def stratified(lo: float, hi: float, n: int, rng: np.random.Generator | None) -> np.ndarray:
    """n stratified samples over [lo, hi]: bin midpoints, or jittered in-bin."""
    step = (hi - lo) / n
    offs = rng.uniform(0.0, 1.0, size=n) if rng is not None else np.full(n, 0.5)
    return lo + (np.arange(n) + offs) * step


def sample_arc(
    T: Pose,
    r: float,
    theta: float,
    n_arc: int,
    K: SonarIntrinsics,
    rng: np.random.Generator | None = None,
) -> ArcSampleSet:
    """Sample the acoustic arc of a pixel across the elevation aperture."""
    if not (K.r_min <= r <= K.r_max):
        raise ValueError(f"range {r} outside [{K.r_min}, {K.r_max}]")
    if abs(theta) > K.azimuth_fov / 2 + 1e-12:
        raise ValueError(f"azimuth {theta} outside the field of view")
    if n_arc < 1:
        raise ValueError("n_arc must be >= 1")
    phis = stratified(K.phi_min, K.phi_max, n_arc, rng)
    local = spherical_to_sonar(r, theta, phis)
    return ArcSampleSet(
        points=transform_points(T, local),
        elevations=phis,
        r=r,
        azimuth=theta,
        d_phi=K.elevation_aperture / n_arc,
    )


def sample_ray(
    T: Pose,
    theta: float,
    phi: float,
    r_end: float,
    n_ray: int,
    K: SonarIntrinsics,
    rng: np.random.Generator | None = None,
    near: float = DEFAULT_NEAR,
) -> RaySampleSet:
    """Sample one acoustic ray from the near plane to r_end (inclusive).

    Interior samples are stratified over [r_near, r_end); the final sample is
    pinned to r_end so the terminal segment ends exactly at the arc point.
    """
    if n_ray < 2:
        raise ValueError("n_ray must be >= 2")
    if r_end > K.r_max + 1e-12:
        raise ValueError("r_end beyond r_max")
    r_near = max(K.r_min, near)
    ranges = np.empty(n_ray)
    ranges[:-1] = stratified(r_near, r_end, n_ray - 1, rng)
    ranges[-1] = r_end
    local = spherical_to_sonar(ranges, theta, phi)
    return RaySampleSet(points=transform_points(T, local), ranges=ranges)
