"""Neural SDF, acoustic radiance field, trainable sharpness, and the analytic
SDF scenes used as simulation ground truth and as test oracles.

Networks run in torch (CPU, float64 by default); the analytic scenes have
both numpy and torch evaluation paths so the numpy reference integrator and
the torch renderer can share one scene description.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

_MAGIC = b"SONARFLD1\n"


# ---------------------------------------------------------------------------
# analytic scenes


@dataclass(frozen=True)
class SpherePrimitive:
    center: np.ndarray
    radius: float

    def sdf(self, x: np.ndarray) -> np.ndarray:
        return np.linalg.norm(x - self.center, axis=-1) - self.radius

    def grad(self, x: np.ndarray) -> np.ndarray:
        d = x - self.center
        n = np.linalg.norm(d, axis=-1, keepdims=True)
        return d / np.maximum(n, 1e-12)

    def sdf_torch(self, x: torch.Tensor) -> torch.Tensor:
        c = torch.as_tensor(self.center, dtype=x.dtype, device=x.device)
        return torch.linalg.norm(x - c, dim=-1) - self.radius


@dataclass(frozen=True)
class BoxPrimitive:
    center: np.ndarray
    half_extents: np.ndarray

    def sdf(self, x: np.ndarray) -> np.ndarray:
        q = np.abs(x - self.center) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def grad(self, x: np.ndarray) -> np.ndarray:
        # Exact a.e.; faces/edges/corners handled by the closed form below.
        d = x - self.center
        q = np.abs(d) - self.half_extents
        s = np.sign(d)
        s[s == 0] = 1.0
        qp = np.maximum(q, 0.0)
        out_norm = np.linalg.norm(qp, axis=-1, keepdims=True)
        outside = out_norm[..., 0] > 0
        g = np.empty_like(d)
        # outside: gradient of ||max(q,0)||
        g_out = s * qp / np.maximum(out_norm, 1e-12)
        # inside: gradient points along the axis of least penetration
        axis = np.argmax(q, axis=-1)
        g_in = np.zeros_like(d)
        idx = np.indices(axis.shape)
        g_in[(*idx, axis)] = np.take_along_axis(s, axis[..., None], axis=-1)[..., 0]
        g[outside] = g_out[outside]
        g[~outside] = g_in[~outside]
        return g

    def sdf_torch(self, x: torch.Tensor) -> torch.Tensor:
        c = torch.as_tensor(self.center, dtype=x.dtype, device=x.device)
        h = torch.as_tensor(self.half_extents, dtype=x.dtype, device=x.device)
        q = torch.abs(x - c) - h
        outside = torch.linalg.norm(torch.clamp(q, min=0.0), dim=-1)
        inside = torch.clamp(q.max(dim=-1).values, max=0.0)
        return outside + inside


@dataclass(frozen=True)
class AnalyticScene:
    """Min-union of exact SDF primitives."""

    primitives: tuple

    def sdf(self, x: np.ndarray) -> np.ndarray:
        return np.min(np.stack([p.sdf(x) for p in self.primitives]), axis=0)

    def grad(self, x: np.ndarray) -> np.ndarray:
        vals = np.stack([p.sdf(x) for p in self.primitives])          # (P, ...)
        grads = np.stack([p.grad(x) for p in self.primitives])        # (P, ..., 3)
        which = np.argmin(vals, axis=0)
        return np.take_along_axis(grads, which[None, ..., None], axis=0)[0]

    def normal(self, x: np.ndarray) -> np.ndarray:
        g = self.grad(x)
        return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)

    def sdf_torch(self, x: torch.Tensor) -> torch.Tensor:
        return torch.min(torch.stack([p.sdf_torch(x) for p in self.primitives]), dim=0).values


def scene_from_spec(spec: list[dict]) -> AnalyticScene:
    """Build a scene from config dicts like {"type": "sphere", ...}."""
    prims = []
    for item in spec:
        kind = item["type"]
        if kind == "sphere":
            prims.append(SpherePrimitive(np.asarray(item["center"], float), float(item["radius"])))
        elif kind == "box":
            prims.append(BoxPrimitive(np.asarray(item["center"], float),
                                      np.asarray(item["half_extents"], float)))
        else:
            raise ValueError(f"unknown primitive type {kind!r}")
    if not prims:
        raise ValueError("scene needs at least one primitive")
    return AnalyticScene(primitives=tuple(prims))


# ---------------------------------------------------------------------------
# networks


@dataclass(frozen=True)
class FieldConfig:
    width: int = 128
    sdf_hidden: int = 4
    radiance_width: int = 128
    radiance_hidden: int = 3
    pe_octaves: int = 6
    pe_octaves_dir: int = 4
    feature_dim: int = 64
    skip_layer: int = 2
    use_direction: bool = True
    sphere_radius: float = 0.5        # geometric-init radius, normalized units
    log_s_init: float = math.log(10.0)
    radiance_gain: float = 12.0       # output scale, matches unit-peak images
    dtype: str = "float64"

    def torch_dtype(self) -> torch.dtype:
        return {"float64": torch.float64, "float32": torch.float32}[self.dtype]


@dataclass(frozen=True)
class SceneNormalization:
    """Maps the object bounding region into the unit ball: (x - center)/scale."""

    center: np.ndarray
    scale: float

    @staticmethod
    def from_bbox(lo, hi) -> "SceneNormalization":
        lo = np.asarray(lo, float)
        hi = np.asarray(hi, float)
        center = (lo + hi) / 2
        scale = float(np.linalg.norm(hi - center))
        return SceneNormalization(center=center, scale=max(scale, 1e-12))

    @staticmethod
    def identity() -> "SceneNormalization":
        return SceneNormalization(center=np.zeros(3), scale=1.0)


def positional_encoding(x: torch.Tensor, octaves: int) -> torch.Tensor:
    """[x, sin(2^k x), cos(2^k x)] for k = 0..octaves-1."""
    if octaves == 0:
        return x
    freqs = 2.0 ** torch.arange(octaves, dtype=x.dtype, device=x.device)
    ang = x[..., None, :] * freqs[:, None]           # (..., octaves, D)
    enc = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    return torch.cat([x, enc.flatten(-2)], dim=-1)


def _pe_dim(octaves: int) -> int:
    return 3 * (1 + 2 * octaves)


class SDFNetwork(nn.Module):
    """Geometric-initialized MLP: normalized point -> (sdf, feature)."""

    def __init__(self, cfg: FieldConfig):
        super().__init__()
        self.cfg = cfg
        in_dim = _pe_dim(cfg.pe_octaves)
        w = cfg.width
        dims = [in_dim] + [w] * cfg.sdf_hidden + [1 + cfg.feature_dim]
        self.skip = cfg.skip_layer
        layers = []
        for i in range(len(dims) - 1):
            d_in = dims[i] + (in_dim if i == self.skip and 0 < i < len(dims) - 2 else 0)
            layers.append(nn.Linear(d_in, dims[i + 1]))
        self.layers = nn.ModuleList(layers)
        self.act = nn.Softplus(beta=100)
        self._geometric_init(in_dim)

    def _geometric_init(self, in_dim: int):
        n = len(self.layers)
        for i, lin in enumerate(self.layers):
            out_dim = lin.out_features
            if i == n - 1:
                # sdf row approximates +||x||; bias shifts to a sphere
                nn.init.normal_(lin.weight, math.sqrt(math.pi) / math.sqrt(lin.in_features), 1e-4)
                nn.init.constant_(lin.bias, -self.cfg.sphere_radius)
            else:
                nn.init.normal_(lin.weight, 0.0, math.sqrt(2.0) / math.sqrt(out_dim))
                nn.init.constant_(lin.bias, 0.0)
            if i == 0:
                # zero the positional-encoding columns so init is radial
                with torch.no_grad():
                    lin.weight[:, 3:] = 0.0
            if i == self.skip and 0 < i < n - 1:
                with torch.no_grad():
                    lin.weight[:, -in_dim:] = 0.0

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        enc = positional_encoding(x, self.cfg.pe_octaves)
        h = enc
        for i, lin in enumerate(self.layers):
            if i == self.skip and 0 < i < len(self.layers) - 1:
                h = torch.cat([h, enc], dim=-1) / math.sqrt(2.0)
            h = lin(h)
            if i < len(self.layers) - 1:
                h = self.act(h)
        return h[..., 0], h[..., 1:]


class RadianceNetwork(nn.Module):
    """(normalized point, direction, sdf feature) -> non-negative radiance."""

    def __init__(self, cfg: FieldConfig):
        super().__init__()
        self.cfg = cfg
        in_dim = _pe_dim(cfg.pe_octaves) + cfg.feature_dim
        if cfg.use_direction:
            in_dim += _pe_dim(cfg.pe_octaves_dir)
        w = cfg.radiance_width
        dims = [in_dim] + [w] * cfg.radiance_hidden + [1]
        self.layers = nn.ModuleList(nn.Linear(dims[i], dims[i + 1]) for i in range(len(dims) - 1))
        self.act = nn.ReLU()
        self.out_act = nn.Softplus(beta=10)

    def forward(self, x: torch.Tensor, d: torch.Tensor, feat: torch.Tensor) -> torch.Tensor:
        parts = [positional_encoding(x, self.cfg.pe_octaves)]
        if self.cfg.use_direction:
            parts.append(positional_encoding(d, self.cfg.pe_octaves_dir))
        parts.append(feat)
        h = torch.cat(parts, dim=-1)
        for i, lin in enumerate(self.layers):
            h = lin(h)
            h = self.act(h) if i < len(self.layers) - 1 else self.out_act(h)
        return self.cfg.radiance_gain * h[..., 0]


@dataclass
class FieldParams:
    """Trainable state: SDF net, radiance net, log-sharpness, normalization."""

    sdf: SDFNetwork
    radiance: RadianceNetwork
    log_s: torch.Tensor
    normalization: SceneNormalization
    config: FieldConfig
    iteration: int = 0

    @property
    def s(self) -> torch.Tensor:
        return torch.exp(self.log_s)

    def parameters(self):
        return list(self.sdf.parameters()) + list(self.radiance.parameters()) + [self.log_s]

    def theta(self) -> torch.Tensor:
        return nn.utils.parameters_to_vector(self.sdf.parameters())

    def phi(self) -> torch.Tensor:
        return nn.utils.parameters_to_vector(self.radiance.parameters())

    # --- metric-space evaluation -------------------------------------------
    def normalize_pts(self, x: torch.Tensor) -> torch.Tensor:
        c = torch.as_tensor(self.normalization.center, dtype=x.dtype, device=x.device)
        return (x - c) / self.normalization.scale

    def sdf_eval(self, x: torch.Tensor) -> torch.Tensor:
        """Signed distance in meters at metric points x (..., 3)."""
        val, _ = self.sdf(self.normalize_pts(x))
        return val * self.normalization.scale

    def sdf_eval_with_feat(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        val, feat = self.sdf(self.normalize_pts(x))
        return val * self.normalization.scale, feat

    def sdf_grad(self, x: torch.Tensor) -> torch.Tensor:
        """Analytic gradient of the metric SDF w.r.t. metric x (autograd)."""
        x = x.detach().requires_grad_(True)
        val = self.sdf_eval(x)
        (g,) = torch.autograd.grad(val.sum(), x, create_graph=False)
        return g

    def radiance_eval(self, x: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
        norms = torch.linalg.norm(d, dim=-1)
        if not torch.all(torch.abs(norms - 1.0) < 1e-6):
            raise ValueError("directions must be unit vectors")
        _, feat = self.sdf(self.normalize_pts(x))
        return self.radiance(self.normalize_pts(x), d, feat)


def init_geometric(seed: int, config: FieldConfig | None = None,
                   normalization: SceneNormalization | None = None) -> FieldParams:
    """Seed-deterministic fields with the SDF initialized near a sphere."""
    cfg = config or FieldConfig()
    gen = torch.Generator().manual_seed(seed)
    prev_state = torch.random.get_rng_state()
    try:
        torch.random.set_rng_state(gen.get_state())
        dtype = cfg.torch_dtype()
        with torch.no_grad():
            sdf = SDFNetwork(cfg).to(dtype)
            rad = RadianceNetwork(cfg).to(dtype)
    finally:
        torch.random.set_rng_state(prev_state)
    log_s = torch.tensor(cfg.log_s_init, dtype=dtype, requires_grad=True)
    return FieldParams(
        sdf=sdf,
        radiance=rad,
        log_s=log_s,
        normalization=normalization or SceneNormalization.identity(),
        config=cfg,
    )


# ---------------------------------------------------------------------------
# checkpoint IO
#
# Byte layout:
#   magic "SONARFLD1\n"
#   uint64 LE: header length in bytes
#   header: UTF-8 JSON with the architecture hyperparameters, normalization,
#           iteration count, and an ordered "blocks" list of
#           {"name": str, "count": int} float64 vectors
#   blocks: concatenated little-endian float64 vectors in header order
# Core blocks are "theta", "phi", "log_s"; callers may append extra blocks
# (e.g. the trainer's twist vector).


def save_checkpoint(path, params: FieldParams, extra_blocks: dict[str, np.ndarray] | None = None):
    blocks: dict[str, np.ndarray] = {
        "theta": params.theta().detach().cpu().numpy().astype("<f8"),
        "phi": params.phi().detach().cpu().numpy().astype("<f8"),
        "log_s": np.array([float(params.log_s.detach())], dtype="<f8"),
    }
    for name, vec in (extra_blocks or {}).items():
        blocks[name] = np.asarray(vec, dtype="<f8").ravel()
    header = {
        "config": asdict(params.config),
        "normalization": {
            "center": params.normalization.center.tolist(),
            "scale": params.normalization.scale,
        },
        "iteration": params.iteration,
        "blocks": [{"name": k, "count": int(v.size)} for k, v in blocks.items()],
    }
    payload = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        for vec in blocks.values():
            f.write(vec.tobytes())


def load_checkpoint(path) -> tuple[FieldParams, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a sonarfield checkpoint")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        blocks = {}
        for spec in header["blocks"]:
            raw = f.read(8 * spec["count"])
            blocks[spec["name"]] = np.frombuffer(raw, dtype="<f8").copy()
    cfg = FieldConfig(**header["config"])
    norm = SceneNormalization(
        center=np.asarray(header["normalization"]["center"], float),
        scale=float(header["normalization"]["scale"]),
    )
    params = init_geometric(0, cfg, norm)
    dtype = cfg.torch_dtype()
    nn.utils.vector_to_parameters(torch.from_numpy(blocks.pop("theta")).to(dtype),
                                  params.sdf.parameters())
    nn.utils.vector_to_parameters(torch.from_numpy(blocks.pop("phi")).to(dtype),
                                  params.radiance.parameters())
    with torch.no_grad():
        params.log_s.copy_(torch.tensor(blocks.pop("log_s")[0], dtype=dtype))
    params.iteration = int(header["iteration"])
    return params, blocks
