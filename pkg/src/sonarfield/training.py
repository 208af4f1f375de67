"""Loss assembly and joint gradient-based optimization of the implicit
fields, the sharpness, and the per-image se(3) pose corrections; also the
frozen-field pose-only optimization mode.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .fields import (FieldConfig, FieldParams, SceneNormalization,
                     init_geometric, load_checkpoint, save_checkpoint)
from .renderer import SamplingConfig, render_pixels
from .se3 import Pose
from .sensor import DEFAULT_NEAR, SonarIntrinsics


class NumericsError(RuntimeError):
    """Training hit a non-finite loss; diagnostics were dumped to disk."""

    def __init__(self, message: str, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass(frozen=True)
class TrainConfig:
    lambda_eik: float = 1.0
    lambda_reg: float = 0.1
    lr_fields: float = 5e-4
    lr_poses: float = 1e-4
    batch_pixels: int = 64
    images_per_batch: int = 1
    n_arc: int = 32
    n_ray: int = 64
    iterations: int = 1000
    seed: int = 0
    pose_opt_enabled: bool = True
    freeze_fields: bool = False
    pose_opt_start: int = 0
    pose_opt_end: int | None = None  # twist lr reaches zero here (None: at end)
    anchor_first_pose: bool = True  # keep twist 0 fixed (gauge anchor)
    eikonal_points: int = 64        # half reused render samples, half uniform
    importance_boost: float = 5.0   # extra sampling weight per unit of I/mean(I)
    cosine_decay: bool = True
    grad_clip_twists: float = 10.0
    checkpoint_interval: int = 0    # 0 disables periodic checkpoints
    log_interval: int = 10
    jitter: bool = True
    near: float = DEFAULT_NEAR
    field: FieldConfig = field(default_factory=FieldConfig)

    def __post_init__(self):
        if min(self.lambda_eik, self.lambda_reg) < 0:
            raise ValueError("loss weights must be >= 0")
        if min(self.lr_fields, self.lr_poses) <= 0:
            raise ValueError("learning rates must be > 0")
        if self.iterations < 0 or self.batch_pixels < 1:
            raise ValueError("bad iteration/batch counts")
        if self.pose_opt_end is not None and self.pose_opt_end <= self.pose_opt_start:
            raise ValueError("pose_opt_end must be > pose_opt_start")

    def sampling(self, jitter: bool | None = None) -> SamplingConfig:
        return SamplingConfig(n_arc=self.n_arc, n_ray=self.n_ray,
                              jitter=self.jitter if jitter is None else jitter,
                              near=self.near)


@dataclass
class TrainDataset:
    intrinsics: SonarIntrinsics
    images: list[np.ndarray]
    poses: list[Pose]                       # base sonar poses used for training
    normalization: SceneNormalization
    gt_poses: list[Pose] | None = None      # optional, for error reporting only

    def __post_init__(self):
        if len(self.images) != len(self.poses):
            raise ValueError("image/pose count mismatch")
        if not self.images:
            raise ValueError("dataset is empty")


@dataclass
class TrainState:
    fields: FieldParams
    twists: torch.Tensor                    # (n_images, 6)
    optimizer: torch.optim.Adam
    iteration: int
    rng: np.random.Generator
    log: list[dict] = field(default_factory=list)

    def twist_row(self, i: int) -> torch.Tensor:
        return self.twists[i]


# ---------------------------------------------------------------------------
# losses


def intensity_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute intensity error over the sampled pixels."""
    if pred.shape != target.shape or pred.numel() == 0:
        raise ValueError("prediction/target length mismatch or empty")
    return (pred - target).abs().mean()


def eikonal_loss(grads: torch.Tensor) -> torch.Tensor:
    """Mean squared deviation of the SDF gradient norm from 1."""
    if grads.numel() == 0:
        raise ValueError("empty gradient set")
    return (torch.linalg.norm(grads, dim=-1) - 1.0).pow(2).mean()


def reg_loss(alphas: torch.Tensor) -> torch.Tensor:
    """Mean opacity magnitude (alpha >= 0, so mean alpha)."""
    if alphas.numel() == 0:
        raise ValueError("empty opacity set")
    return alphas.abs().mean()


def _sdf_gradients(fields: FieldParams, x: torch.Tensor,
                   create_graph: bool = True) -> torch.Tensor:
    if not x.requires_grad:
        x = x.detach().requires_grad_(True)
    val = fields.sdf_eval(x)
    (g,) = torch.autograd.grad(val.sum(), x, create_graph=create_graph)
    return g


def total_loss(
    batch: list[tuple[int, tuple[int, int], float]],
    fields: FieldParams,
    twists: torch.Tensor | None,
    base_poses: list[Pose],
    dataset: TrainDataset,
    config: TrainConfig,
    rng: np.random.Generator,
    jitter: bool | None = None,
):
    """Joint loss over a batch of (image id, pixel, target intensity).

    Renders each pixel at the corrected pose of its image, draws eikonal
    points from the rendered ray samples plus uniform box samples, and
    returns (total, parts dict).  Gradients flow to the field parameters and
    to every twist row touched by the batch.
    """
    sampling = config.sampling(jitter)
    dtype = fields.log_s.dtype
    by_image: dict[int, list[int]] = {}
    for k, (img, _, _) in enumerate(batch):
        by_image.setdefault(img, []).append(k)

    preds = [None] * len(batch)
    alphas_all = []
    ray_points = []
    for img, idxs in by_image.items():
        pix = np.array([batch[k][1] for k in idxs], dtype=int)
        twist = twists[img] if twists is not None else None
        out = render_pixels(fields, base_poses[img], pix, dataset.intrinsics,
                            sampling, rng=rng, twist=twist, want_points=True)
        for slot, k in enumerate(idxs):
            preds[k] = out["intensity"][slot]
        alphas_all.append(out["alphas"].reshape(-1))
        ray_points.append(out["points"].reshape(-1, 3))

    pred_t = torch.stack(preds)
    target_t = torch.tensor([b[2] for b in batch], dtype=dtype)
    l_int = intensity_loss(pred_t, target_t)

    alphas = torch.cat(alphas_all)
    l_reg = reg_loss(alphas)

    # eikonal points: reused render samples + uniform box samples
    n_eik = max(config.eikonal_points, 2)
    pts = torch.cat(ray_points)
    take = rng.choice(len(pts), size=min(n_eik // 2, len(pts)), replace=False)
    reused = pts[torch.as_tensor(take, dtype=torch.long)]
    c = fields.normalization.center
    s = fields.normalization.scale
    uni = rng.uniform(-1.0, 1.0, size=(n_eik - len(take), 3)) * s + c
    uniform_pts = torch.tensor(uni, dtype=dtype)
    grads = torch.cat([
        _sdf_gradients(fields, reused),
        _sdf_gradients(fields, uniform_pts),
    ])
    l_eik = eikonal_loss(grads)

    total = l_int + config.lambda_eik * l_eik + config.lambda_reg * l_reg
    parts = {"int": l_int, "eik": l_eik, "reg": l_reg, "total": total}
    return total, parts


# ---------------------------------------------------------------------------
# batch sampling


def sample_batch(dataset: TrainDataset, config: TrainConfig,
                 rng: np.random.Generator) -> list[tuple[int, tuple[int, int], float]]:
    """Pixels of one or more randomly chosen images, bright pixels boosted.

    Sampling weight is 1 + boost * E / mean(E) with E the intensity above the
    per-image median: the median estimates the additive noise floor, so a
    uniform floor keeps dark pixels supervised while strong returns are drawn
    proportionally more often even when noise leaves no pixel exactly zero.

    With images_per_batch > 1 the pixel budget is split evenly over several
    distinct images, so every pose correction receives frequent (if noisier)
    gradient updates instead of rare large ones.
    """
    n_images = len(dataset.images)
    m = min(max(1, config.images_per_batch), n_images)
    if m == 1:
        image_ids = [int(rng.integers(n_images))]
    else:
        image_ids = rng.choice(n_images, size=m, replace=False)
    per_image = max(1, config.batch_pixels // m)
    batch: list[tuple[int, tuple[int, int], float]] = []
    for img_idx in image_ids:
        img_idx = int(img_idx)
        img = dataset.images[img_idx]
        flat = img.ravel()
        excess = np.maximum(flat - np.median(flat), 0.0)
        mean = excess.mean()
        if mean > 0:
            w = 1.0 + config.importance_boost * excess / mean
        else:
            w = np.ones_like(flat)
        w = w / w.sum()
        picks = rng.choice(flat.size, size=min(per_image, flat.size),
                           replace=False, p=w)
        ncol = img.shape[1]
        batch.extend((img_idx, (int(p // ncol), int(p % ncol)), float(flat[p]))
                     for p in picks)
    return batch


# ---------------------------------------------------------------------------
# optimization


def _make_optimizer(fields: FieldParams, twists: torch.Tensor,
                    config: TrainConfig) -> torch.optim.Adam:
    groups = []
    if not config.freeze_fields:
        groups.append({"params": fields.parameters(), "lr": config.lr_fields,
                       "name": "fields"})
    groups.append({"params": [twists], "lr": config.lr_poses, "name": "twists"})
    return torch.optim.Adam(groups)


def init_state(dataset: TrainDataset, config: TrainConfig,
               fields: FieldParams | None = None) -> TrainState:
    fields = fields if fields is not None else init_geometric(
        config.seed, config.field, dataset.normalization)
    dtype = fields.log_s.dtype
    twists = torch.zeros((len(dataset.images), 6), dtype=dtype, requires_grad=True)
    if config.freeze_fields:
        for p in fields.parameters():
            p.requires_grad_(False)
    return TrainState(
        fields=fields,
        twists=twists,
        optimizer=_make_optimizer(fields, twists, config),
        iteration=0,
        rng=np.random.default_rng(config.seed),
    )


def _set_lr(opt: torch.optim.Adam, config: TrainConfig, iteration: int):
    if not config.cosine_decay or config.iterations == 0:
        return
    frac = min(iteration / config.iterations, 1.0)
    scale = 0.5 * (1.0 + math.cos(math.pi * frac))
    # twists decay over their own active window so the pose optimization
    # anneals instead of diffusing; after pose_opt_end the corrections are
    # still applied but no longer move
    end = config.pose_opt_end if config.pose_opt_end is not None else config.iterations
    span = max(end - config.pose_opt_start, 1)
    tfrac = min(max(iteration - config.pose_opt_start, 0) / span, 1.0)
    tscale = 0.5 * (1.0 + math.cos(math.pi * tfrac))
    for g in opt.param_groups:
        if g.get("name") == "fields":
            g["lr"] = config.lr_fields * scale
        elif g.get("name") == "twists":
            g["lr"] = config.lr_poses * tscale


def _dump_batch(dump_dir, iteration: int, batch, parts) -> Path | None:
    if dump_dir is None:
        return None
    path = Path(dump_dir) / f"diverged_batch_{iteration:06d}.json"
    path.write_text(json.dumps({
        "iteration": iteration,
        "losses": {k: v.item() for k, v in parts.items()},
        "batch": [{"image": b[0], "pixel": list(b[1]), "target": b[2]} for b in batch],
    }, indent=2))
    return path


def train(
    dataset: TrainDataset,
    config: TrainConfig,
    state: TrainState | None = None,
    checkpoint_dir=None,
    callback=None,
) -> TrainState:
    """Run the joint optimization loop; resumes when given an existing state.

    With pose_opt_enabled=False the rendering path bypasses the twist
    machinery entirely, so twists stay exactly zero and runs are bit-identical
    to a build without pose corrections.
    """
    st = state if state is not None else init_state(dataset, config)
    ckdir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckdir:
        ckdir.mkdir(parents=True, exist_ok=True)

    while st.iteration < config.iterations:
        i = st.iteration
        _set_lr(st.optimizer, config, i)
        batch = sample_batch(dataset, config, st.rng)
        use_twists = config.pose_opt_enabled and i >= config.pose_opt_start
        t0 = time.perf_counter()
        st.optimizer.zero_grad(set_to_none=True)
        total, parts = total_loss(batch, st.fields, st.twists if use_twists else None,
                                  dataset.poses, dataset, config, st.rng)
        if not torch.isfinite(total):
            dump = _dump_batch(ckdir, i, batch, parts)
            raise NumericsError(f"non-finite loss at iteration {i}", dump)
        total.backward()
        if use_twists and st.twists.grad is not None:
            if config.anchor_first_pose:
                # pin the gauge: pose corrections are relative to frame 0,
                # whose odometry error is zero by construction
                st.twists.grad[0].zero_()
            torch.nn.utils.clip_grad_norm_([st.twists], config.grad_clip_twists)
        st.optimizer.step()
        st.iteration = i + 1
        st.fields.iteration = st.iteration

        if config.log_interval and (i % config.log_interval == 0 or st.iteration == config.iterations):
            with torch.no_grad():
                st.log.append({
                    "iteration": st.iteration,
                    "loss_int": parts["int"].item(),
                    "loss_eik": parts["eik"].item(),
                    "loss_reg": parts["reg"].item(),
                    "loss_total": total.item(),
                    "s": st.fields.s.item(),
                    "mean_twist_norm": float(st.twists.norm(dim=-1).mean()),
                    "wall_time": time.perf_counter() - t0,
                })
        if ckdir and config.checkpoint_interval and st.iteration % config.checkpoint_interval == 0:
            save_state(ckdir / f"state_{st.iteration:06d}.ckpt", st, config)
        if callback is not None:
            callback(st)
    return st


def optimize_poses_frozen(
    dataset: TrainDataset,
    frozen_fields: FieldParams,
    noisy_poses: list[Pose],
    config: TrainConfig,
    checkpoint_dir=None,
) -> TrainState:
    """Pose-only optimization: twists learn, field weights stay bit-identical."""
    if not config.freeze_fields:
        raise ValueError("optimize_poses_frozen requires freeze_fields=True")
    ds = TrainDataset(
        intrinsics=dataset.intrinsics,
        images=dataset.images,
        poses=list(noisy_poses),
        normalization=frozen_fields.normalization,
        gt_poses=dataset.gt_poses,
    )
    st = init_state(ds, config, fields=frozen_fields)
    return train(ds, config, state=st, checkpoint_dir=checkpoint_dir)


# ---------------------------------------------------------------------------
# evaluation helpers


def dataset_intensity_loss(dataset: TrainDataset, fields: FieldParams,
                           poses: list[Pose], config: TrainConfig,
                           twists: torch.Tensor | None = None,
                           pixels_per_image: int = 256, seed: int = 0) -> float:
    """Deterministic L1 intensity loss on a fixed pixel subsample."""
    rng = np.random.default_rng(seed)
    sampling = config.sampling(jitter=False)
    losses = []
    with torch.no_grad():
        for i, img in enumerate(dataset.images):
            flat = img.ravel()
            n = min(pixels_per_image, flat.size)
            picks = rng.choice(flat.size, size=n, replace=False)
            ncol = img.shape[1]
            pix = np.stack([picks // ncol, picks % ncol], axis=-1)
            tw = twists[i] if twists is not None else None
            out = render_pixels(fields, poses[i], pix, dataset.intrinsics,
                                sampling, twist=tw)
            pred = out["intensity"].cpu().numpy()
            losses.append(np.abs(pred - flat[picks]).mean())
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# state (de)serialization: checkpoint blocks + JSON sidecar header entries
#
# Adds to the field checkpoint: "twists" (n*6), then first/second Adam
# moments per optimizer parameter in optimizer order, plus the numpy RNG
# state and per-parameter step counts in a sidecar JSON next to the file.


def save_state(path, st: TrainState, config: TrainConfig):
    extra = {"twists": st.twists.detach().cpu().numpy().ravel()}
    steps = []
    for gi, group in enumerate(st.optimizer.param_groups):
        for pi, p in enumerate(group["params"]):
            os = st.optimizer.state.get(p, {})
            if os:
                extra[f"adam_m_{gi}_{pi}"] = os["exp_avg"].cpu().numpy().ravel()
                extra[f"adam_v_{gi}_{pi}"] = os["exp_avg_sq"].cpu().numpy().ravel()
                steps.append(int(os["step"]))
            else:
                steps.append(0)
    save_checkpoint(path, st.fields, extra_blocks=extra)
    sidecar = {
        "iteration": st.iteration,
        "adam_steps": steps,
        "rng_state": _jsonable_rng(st.rng.bit_generator.state),
        "n_images": st.twists.shape[0],
        "config": _config_dict(config),
        "log": st.log,
    }
    Path(str(path) + ".meta.json").write_text(json.dumps(sidecar))


def _jsonable_rng(state: dict) -> dict:
    out = {}
    for k, v in state.items():
        if isinstance(v, dict):
            out[k] = _jsonable_rng(v)
        elif isinstance(v, np.ndarray):
            out[k] = {"__ndarray__": v.tolist(), "dtype": str(v.dtype)}
        elif isinstance(v, (np.integer,)):
            out[k] = int(v)
        else:
            out[k] = v
    return out


def _unjsonable_rng(state):
    if isinstance(state, dict):
        if "__ndarray__" in state:
            return np.array(state["__ndarray__"], dtype=state["dtype"])
        return {k: _unjsonable_rng(v) for k, v in state.items()}
    return state


def _config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    return d


def load_state(path, dataset: TrainDataset) -> tuple[TrainState, TrainConfig]:
    fields, blocks = load_checkpoint(path)
    sidecar = json.loads(Path(str(path) + ".meta.json").read_text())
    cfgd = sidecar["config"]
    cfgd["field"] = FieldConfig(**cfgd["field"])
    config = TrainConfig(**cfgd)
    dtype = fields.log_s.dtype
    n = sidecar["n_images"]
    twists = torch.tensor(blocks.pop("twists").reshape(n, 6), dtype=dtype,
                          requires_grad=True)
    if config.freeze_fields:
        for p in fields.parameters():
            p.requires_grad_(False)
    opt = _make_optimizer(fields, twists, config)
    steps = iter(sidecar["adam_steps"])
    for gi, group in enumerate(opt.param_groups):
        for pi, p in enumerate(group["params"]):
            step = next(steps)
            key_m, key_v = f"adam_m_{gi}_{pi}", f"adam_v_{gi}_{pi}"
            if key_m in blocks:
                opt.state[p] = {
                    "step": torch.tensor(float(step)),
                    "exp_avg": torch.tensor(blocks[key_m].reshape(p.shape), dtype=dtype),
                    "exp_avg_sq": torch.tensor(blocks[key_v].reshape(p.shape), dtype=dtype),
                }
    rng = np.random.default_rng()
    rng.bit_generator.state = _unjsonable_rng(sidecar["rng_state"])
    st = TrainState(fields=fields, twists=twists, optimizer=opt,
                    iteration=sidecar["iteration"], rng=rng, log=sidecar["log"])
    return st, config
