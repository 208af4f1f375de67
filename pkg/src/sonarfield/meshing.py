"""Level-set surface extraction and sampled Hausdorff-style mesh distances."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure


class EmptyMeshError(ValueError):
    """Surface extraction or evaluation hit an empty mesh."""


class DegenerateReportError(ValueError):
    """All sampled distances were discarded by the threshold."""


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray      # (n, 3) meters
    triangles: np.ndarray     # (m, 3) int indices

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=int).reshape(-1, 3)
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)

    def cleaned(self, min_area: float = 1e-12) -> "Mesh":
        """Drop degenerate triangles (area <= min_area)."""
        if self.is_empty:
            return self
        keep = self.areas() > min_area
        return Mesh(self.vertices, self.triangles[keep])

    def transformed(self, pose) -> "Mesh":
        return Mesh(self.vertices @ pose.rotation.T + pose.translation, self.triangles)


@dataclass(frozen=True)
class DistanceReport:
    hausdorff_max: float
    mean: float
    rms: float
    threshold: float
    n_samples: int
    discarded_fraction: float = 0.0


# ---------------------------------------------------------------------------
# marching cubes


def marching_cubes(sdf_fn, bbox, resolution: int, level: float = 0.0,
                   chunk: int = 65536) -> Mesh:
    """Triangle mesh of {x : sdf(x) = level} on a regular grid over bbox.

    sdf_fn maps an (N, 3) array to (N,) values.  Returns an empty mesh when
    the level set does not intersect the box.
    """
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    if not (-0.2 - 1e-12 <= level <= 0.2 + 1e-12):
        raise ValueError("level must lie in [-0.2, 0.2]")
    lo = np.asarray(bbox[0], dtype=float)
    hi = np.asarray(bbox[1], dtype=float)
    n = resolution + 1
    axes = [np.linspace(lo[k], hi[k], n) for k in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = np.empty(len(grid))
    for s in range(0, len(grid), chunk):
        vals[s:s + chunk] = sdf_fn(grid[s:s + chunk])
    volume = vals.reshape(n, n, n)
    spacing = (hi - lo) / resolution
    try:
        verts, faces, _, _ = measure.marching_cubes(volume, level=level, spacing=tuple(spacing))
    except ValueError:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
    return Mesh(verts + lo, faces).cleaned()


# ---------------------------------------------------------------------------
# point-to-triangle distance (exact, vectorized)


def _point_triangle_dist2(p: np.ndarray, a: np.ndarray, b: np.ndarray,
                          c: np.ndarray) -> np.ndarray:
    """Squared distance from points p to triangles (a, b, c), elementwise."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("...d,...d->...", ab, ap)
    d2 = np.einsum("...d,...d->...", ac, ap)
    bp = p - b
    d3 = np.einsum("...d,...d->...", ab, bp)
    d4 = np.einsum("...d,...d->...", ac, bp)
    cp = p - c
    d5 = np.einsum("...d,...d->...", ab, cp)
    d6 = np.einsum("...d,...d->...", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    denom_bc = (d4 - d3) + (d5 - d6)
    w_bc = np.where(np.abs(denom_bc) > 0, (d4 - d3) / np.where(denom_bc == 0, 1.0, denom_bc), 0.0)
    denom = va + vb + vc
    v = np.where(np.abs(denom) > 0, vb / np.where(denom == 0, 1.0, denom), 0.0)
    w = np.where(np.abs(denom) > 0, vc / np.where(denom == 0, 1.0, denom), 0.0)

    # region tests per Ericson, "Real-Time Collision Detection"
    nearest = a + v[..., None] * ab + w[..., None] * ac                      # face region
    e1 = np.clip(np.where(np.abs(np.einsum("...d,...d->...", ab, ab)) > 0,
                          d1 / np.maximum(np.einsum("...d,...d->...", ab, ab), 1e-300),
                          0.0), 0.0, 1.0)
    e2 = np.clip(np.where(np.abs(np.einsum("...d,...d->...", ac, ac)) > 0,
                          d2 / np.maximum(np.einsum("...d,...d->...", ac, ac), 1e-300),
                          0.0), 0.0, 1.0)
    on_ab = a + e1[..., None] * ab
    on_ac = a + e2[..., None] * ac
    on_bc = b + np.clip(w_bc, 0.0, 1.0)[..., None] * (c - b)

    # vertex region A
    nearest = np.where(((d1 <= 0) & (d2 <= 0))[..., None], a, nearest)
    # vertex region B
    nearest = np.where(((d3 >= 0) & (d4 <= d3))[..., None], b, nearest)
    # vertex region C
    nearest = np.where(((d6 >= 0) & (d5 <= d6))[..., None], c, nearest)
    # edge AB
    mask_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    nearest = np.where(mask_ab[..., None], on_ab, nearest)
    # edge AC
    mask_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    nearest = np.where(mask_ac[..., None], on_ac, nearest)
    # edge BC
    mask_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    nearest = np.where(mask_bc[..., None], on_bc, nearest)

    diff = p - nearest
    return np.einsum("...d,...d->...", diff, diff)


class _MeshDistanceField:
    """Exact nearest-surface distance queries against one mesh."""

    def __init__(self, mesh: Mesh):
        if mesh.is_empty:
            raise EmptyMeshError("cannot measure distance to an empty mesh")
        self.mesh = mesh
        tri = mesh.vertices[mesh.triangles]                     # (m, 3, 3)
        self.tri = tri
        self.centroids = tri.mean(axis=1)
        self.radii = np.linalg.norm(tri - self.centroids[:, None, :], axis=-1).max(axis=1)
        self.max_radius = float(self.radii.max()) if len(self.radii) else 0.0
        self.tree = cKDTree(self.centroids)

    def query(self, pts: np.ndarray, k0: int = 8,
              element_budget: int = 1 << 20) -> np.ndarray:
        """Exact distances; candidate tensors capped at element_budget entries.

        The k-nearest-centroid escalation can reach k in the thousands on
        meshes with very uneven triangles, so the (points, k) candidate block
        is processed in slices to keep peak memory bounded.
        """
        pts = np.asarray(pts, dtype=float)
        m = len(self.tri)
        k = min(k0, m)
        best = np.full(len(pts), np.inf)
        done = np.zeros(len(pts), dtype=bool)
        idx_all = np.arange(len(pts))
        while True:
            q = idx_all[~done]
            if len(q) == 0:
                break
            step = max(1, element_budget // k)
            for s in range(0, len(q), step):
                qq = q[s:s + step]
                dc, ci = self.tree.query(pts[qq], k=k)
                if k == 1:
                    dc, ci = dc[:, None], ci[:, None]
                tri = self.tri[ci]                              # (nq, k, 3, 3)
                d2 = _point_triangle_dist2(pts[qq][:, None, :], tri[..., 0, :],
                                           tri[..., 1, :], tri[..., 2, :])
                best[qq] = np.sqrt(d2.min(axis=1))
                # exact once no unexamined centroid can beat the bound
                guarantee = dc[:, -1] - self.max_radius
                done[qq] = (best[qq] <= guarantee) | (k >= m)
            k = min(k * 4, m)
        return best


def sample_surface(mesh: Mesh, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform-by-area point samples on a mesh surface."""
    if mesh.is_empty:
        raise EmptyMeshError("cannot sample an empty mesh")
    areas = mesh.areas()
    probs = areas / areas.sum()
    which = rng.choice(len(areas), size=n_samples, p=probs)
    tri = mesh.vertices[mesh.triangles[which]]
    u = rng.uniform(size=n_samples)
    v = rng.uniform(size=n_samples)
    su = np.sqrt(u)
    bary = np.stack([1 - su, su * (1 - v), su * v], axis=-1)
    return np.einsum("nk,nkd->nd", bary, tri)


def mesh_distance(M1: Mesh, M2: Mesh, n_samples: int = 100_000,
                  threshold: float = math.inf, seed: int = 0) -> DistanceReport:
    """Symmetric sampled Hausdorff distances between two meshes.

    Samples each mesh uniformly by area, measures exact point-to-triangle
    distance to the other mesh, discards distances above the threshold, and
    reports max/mean/RMS over the union of both directions.
    """
    if n_samples < 1000:
        raise ValueError("n_samples must be >= 1000")
    if M1.is_empty or M2.is_empty:
        raise EmptyMeshError("mesh_distance needs two non-empty meshes")
    rng = np.random.default_rng(seed)
    p1 = sample_surface(M1, n_samples, rng)
    p2 = sample_surface(M2, n_samples, rng)
    d12 = _MeshDistanceField(M2).query(p1)
    d21 = _MeshDistanceField(M1).query(p2)
    d = np.concatenate([d12, d21])
    kept = d[d <= threshold]
    if len(kept) == 0:
        raise DegenerateReportError("threshold discarded every sample")
    return DistanceReport(
        hausdorff_max=float(kept.max()),
        mean=float(kept.mean()),
        rms=float(np.sqrt((kept ** 2).mean())),
        threshold=threshold,
        n_samples=2 * n_samples,
        discarded_fraction=float(1.0 - len(kept) / len(d)),
    )


def level_sweep(sdf_fn, bbox, resolution: int, gt_mesh: Mesh, eps_grid,
                n_samples: int = 20_000, threshold: float = math.inf,
                seed: int = 0, chunk: int = 65536):
    """Extract meshes over a grid of level offsets and keep the best.

    Returns (best_eps, best_mesh, best_report); the winner minimizes the mean
    distance, ties broken toward the eps closest to zero.  The SDF grid is
    evaluated once and reused for every level.
    """
    eps_grid = np.asarray(eps_grid, dtype=float)
    if len(eps_grid) == 0 or eps_grid.min() < -0.2 - 1e-12 or eps_grid.max() > 0.2 + 1e-12:
        raise ValueError("eps grid must be non-empty and within [-0.2, 0.2]")
    lo = np.asarray(bbox[0], dtype=float)
    hi = np.asarray(bbox[1], dtype=float)
    n = resolution + 1
    axes = [np.linspace(lo[k], hi[k], n) for k in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = np.empty(len(grid))
    for s in range(0, len(grid), chunk):
        vals[s:s + chunk] = sdf_fn(grid[s:s + chunk])
    volume = vals.reshape(n, n, n)
    spacing = tuple((hi - lo) / resolution)

    best = None
    for eps in eps_grid:
        try:
            verts, faces, _, _ = measure.marching_cubes(volume, level=float(eps), spacing=spacing)
            mesh = Mesh(verts + lo, faces).cleaned()
        except ValueError:
            continue
        if mesh.is_empty:
            continue
        report = mesh_distance(gt_mesh, mesh, n_samples=n_samples,
                               threshold=threshold, seed=seed)
        key = (report.mean, abs(eps))
        if best is None or key < best[0]:
            best = (key, float(eps), mesh, report)
    if best is None:
        raise EmptyMeshError("every level in the sweep produced an empty mesh")
    return best[1], best[2], best[3]


# ---------------------------------------------------------------------------
# mesh export (ASCII OFF)


def save_mesh(path, mesh: Mesh):
    with open(path, "w") as f:
        f.write("OFF\n")
        f.write(f"{len(mesh.vertices)} {len(mesh.triangles)} 0\n")
        for v in mesh.vertices:
            f.write(f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles:
            f.write(f"3 {t[0]} {t[1]} {t[2]}\n")


def load_mesh(path) -> Mesh:
    with open(path) as f:
        tokens = f.read().split()
    if tokens[0] != "OFF":
        raise ValueError(f"{path}: not an OFF mesh")
    nv, nf = int(tokens[1]), int(tokens[2])
    pos = 4
    verts = np.array(tokens[pos:pos + 3 * nv], dtype=float).reshape(nv, 3)
    pos += 3 * nv
    faces = []
    for _ in range(nf):
        cnt = int(tokens[pos])
        if cnt != 3:
            raise ValueError("only triangle meshes are supported")
        faces.append([int(tokens[pos + 1]), int(tokens[pos + 2]), int(tokens[pos + 3])])
        pos += 4
    return Mesh(verts, np.array(faces, dtype=int))
