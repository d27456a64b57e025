"""Two-stage optimization.

Stage 1 fits every field parameter to the input photos with the per-ray
colour-error norm. Stage 2 freezes the geometry group and trains the
hypernetwork with content and style losses on sub-sampled patches.
"""

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from dataclasses import field as dc_field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import checkpoint as ckpt
from .errors import CheckpointMismatchError, ConfigError, DependencyError, InvariantViolationError, NumericError
from .field import FieldSpec, RadianceField
from .hyper import HyperNetwork
from .renderer import SampleStrategy, render, render_image
from .scene_io import MultiViewScene, all_pixels, generate_rays
from .style_codec import (
    FeatureExtractor,
    FeatureStats,
    StyleVAE,
    feature_stats,
    preprocess_style,
    style_statistics,
    to_nchw,
)

logger = logging.getLogger(__name__)

STAGE1_FILE = "stage1.npz"
STAGE2_FILE = "stage2.npz"


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class PatchSpec:
    width_ratio: float = 1 / 3
    height_ratio: float = 1 / 2
    grid_w: int = 81
    grid_h: int = 67

    def __post_init__(self):
        if not (0 < self.width_ratio <= 1 and 0 < self.height_ratio <= 1):
            raise ConfigError("patch window ratios must lie in (0, 1]")
        if self.grid_w < 1 or self.grid_h < 1:
            raise ConfigError("patch grid must be at least 1x1")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of both stages; defaults are the full-scale values."""

    field: FieldSpec = dc_field(default_factory=FieldSpec)
    stage1_iterations: int = 250_000
    batch_rays: int = 67 * 81
    stage1_lr: float = 5e-4
    stage2_iterations: int = 100_000
    stage2_lr: float = 1e-3
    lambda_style: float = 15.0
    patch: PatchSpec = dc_field(default_factory=PatchSpec)
    style_size: int = 256
    n_fg: int = 64
    n_bg: int = 32
    jitter: bool = True
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    latent_dim: int = 64
    hyper_hidden: Tuple[int, ...] = (256, 256)
    vae_hidden: int = 256
    vae_beta_kl: float = 0.01
    vae_epochs: int = 200
    log_every: int = 100
    checkpoint_every: int = 1000
    keep_snapshots: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        object.__setattr__(self, "hyper_hidden", tuple(self.hyper_hidden))
        for name in ("stage1_iterations", "stage2_iterations", "batch_rays", "log_every", "checkpoint_every", "style_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.stage1_lr <= 0 or self.stage2_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.lambda_style < 0:
            raise ConfigError("lambda_style must be >= 0")
        if self.patch.grid_w * self.patch.grid_h > self.batch_rays:
            raise ConfigError("patch grid exceeds the per-iteration ray budget batch_rays")

    @classmethod
    def desk(cls, **overrides):
        """CI-sized preset for the 100x100 toy scene."""
        base = dict(
            field=FieldSpec(pos_freqs=6, dir_freqs=2, base_width=64, base_depth=4, skips=(2,), app_hidden=32),
            stage1_iterations=20_000,
            batch_rays=1280,
            stage2_iterations=4_000,
            patch=PatchSpec(1 / 3, 1 / 2, 40, 32),
            n_fg=32,
            n_bg=8,
            vae_epochs=300,
        )
        base.update(overrides)
        return cls(**base)

    def strategy(self, jitter=None, seed=0):
        return SampleStrategy(self.n_fg, self.n_bg, self.jitter if jitter is None else jitter, seed)

    def to_dict(self):
        d = asdict(self)
        d["field"] = self.field.to_dict()
        d["adam_betas"] = list(self.adam_betas)
        d["hyper_hidden"] = list(self.hyper_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        if "field" in d and not isinstance(d["field"], FieldSpec):
            d["field"] = FieldSpec.from_dict(d["field"])
        if "patch" in d and not isinstance(d["patch"], PatchSpec):
            d["patch"] = PatchSpec(**d["patch"])
        return cls(**d)


def architecture_hash(config: TrainConfig, stage: int):
    arch = {"stage": stage, "field": config.field.to_dict()}
    if stage == 2:
        arch.update(latent_dim=config.latent_dim, hyper_hidden=list(config.hyper_hidden))
    return ckpt.stable_hash(arch)


def _iteration_rng(seed, stage, iteration):
    rng = np.random.default_rng([seed, stage, iteration])
    gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
    return rng, gen


def _adam(params, lr, config):
    return torch.optim.Adam(params, lr=lr, betas=config.adam_betas, eps=config.adam_eps)


# ---------------------------------------------------------------------------
# losses


def reconstruction_loss(pred, target):
    """Mean over rays of the Euclidean norm of the colour residual."""
    return torch.linalg.vector_norm(pred - target, dim=-1).mean()


def content_loss(extractor: FeatureExtractor, gt_patch, render_patch):
    """Norm of the relu4_1 feature difference; patches are ``(N, 3, h, w)``."""
    f_gt = extractor(gt_patch)[-1]
    f_r = extractor(render_patch)[-1]
    return torch.linalg.vector_norm(f_gt - f_r)


def style_loss_from_stats(style: FeatureStats, render_stats: FeatureStats):
    loss = 0.0
    for ms, mr in zip(style.means, render_stats.means):
        loss = loss + torch.linalg.vector_norm(ms - mr)
    for ss, sr in zip(style.stds, render_stats.stds):
        loss = loss + torch.linalg.vector_norm(ss - sr)
    return loss


def style_loss(extractor: FeatureExtractor, style_image, render_patch):
    """Mean/std feature-statistics distance over relu1_1..relu4_1."""
    return style_loss_from_stats(feature_stats(extractor(style_image)), feature_stats(extractor(render_patch)))


def stylization_losses(extractor, gt_patch, render_patch, style_stats: FeatureStats, lambda_style):
    """``(content, style, content + lambda_style * style)`` sharing one render forward pass."""
    render_feats = extractor(render_patch)
    with torch.no_grad():
        gt_feat = extractor(gt_patch)[-1]
    l_content = torch.linalg.vector_norm(gt_feat - render_feats[-1])
    l_style = style_loss_from_stats(style_stats, feature_stats(render_feats))
    return l_content, l_style, l_content + lambda_style * l_style


# ---------------------------------------------------------------------------
# patch sub-sampling


@dataclass(frozen=True)
class PatchSample:
    image_index: int
    top: int
    left: int
    height: int
    width: int
    rows: np.ndarray
    cols: np.ndarray

    def pixel_indices(self):
        """``(grid_h * grid_w, 2)`` row-major ``(row, col)`` pairs."""
        rr, cc = np.meshgrid(self.rows, self.cols, indexing="ij")
        return np.stack([rr.ravel(), cc.ravel()], axis=-1)

    def gather(self, image):
        """Ground-truth colours at the grid, ``(grid_h, grid_w, 3)``."""
        return np.asarray(image)[np.ix_(self.rows, self.cols)]


def grid_positions(start, length, n):
    """Nearest-neighbour lattice: ``start + round((i + 0.5) * length / n - 0.5)``, halves rounded up."""
    i = np.arange(n, dtype=np.int64)
    return start + ((2 * i + 1) * length) // (2 * n)


def sample_patch(image_size, spec: PatchSpec, rng, image_index=0) -> PatchSample:
    """Random window of at least ``ratio * size`` (and at least the grid) per side,
    then an evenly spread ``grid_h x grid_w`` pixel lattice inside it."""
    H, W = image_size
    if H < spec.grid_h or W < spec.grid_w:
        raise ConfigError(f"image {H}x{W} is smaller than the {spec.grid_h}x{spec.grid_w} patch grid")
    min_h = max(math.ceil(spec.height_ratio * H - 1e-9), spec.grid_h)
    min_w = max(math.ceil(spec.width_ratio * W - 1e-9), spec.grid_w)
    height = int(rng.integers(min_h, H + 1))
    width = int(rng.integers(min_w, W + 1))
    top = int(rng.integers(0, H - height + 1))
    left = int(rng.integers(0, W - width + 1))
    return PatchSample(
        image_index,
        top,
        left,
        height,
        width,
        grid_positions(top, height, spec.grid_h),
        grid_positions(left, width, spec.grid_w),
    )


# ---------------------------------------------------------------------------
# stage 1


class RayPool:
    """Every pixel ray of the training views, precomputed."""

    def __init__(self, scene: MultiViewScene, indices=None, dtype=torch.float32):
        self.indices = list(range(len(scene))) if indices is None else list(indices)
        origins, dirs, colors, ids = [], [], [], []
        for i in self.indices:
            K = scene.intrinsics[i]
            rays = generate_rays(scene, i, all_pixels(K.height, K.width), dtype)
            origins.append(rays.origins)
            dirs.append(rays.directions)
            colors.append(torch.tensor(scene.images[i].reshape(-1, 3), dtype=dtype))
            ids.append(torch.full((len(rays),), i, dtype=torch.int64))
        self.origins = torch.cat(origins)
        self.directions = torch.cat(dirs)
        self.colors = torch.cat(colors)
        self.image_ids = torch.cat(ids)

    def __len__(self):
        return self.origins.shape[0]

    def batch(self, idx):
        from .rays import RayBatch

        return RayBatch(self.origins[idx], self.directions[idx]), self.colors[idx]


def stage1_step(field, optimizer, pool: RayPool, M, rng, strategy, generator=None, iteration=None):
    """One Adam update of every field parameter on ``M`` uniformly drawn rays."""
    idx = torch.as_tensor(rng.integers(0, len(pool), M))
    rays, target = pool.batch(idx)
    out = render(field, rays, strategy, generator=generator)
    loss = reconstruction_loss(out.color, target)
    if not torch.isfinite(loss):
        lr = optimizer.param_groups[0]["lr"]
        raise NumericError(
            f"non-finite stage-1 loss at iteration {iteration} (lr={lr}); ray ids {idx[:16].tolist()}..."
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return loss.item()


# ---------------------------------------------------------------------------
# stage 2


class StyleBank:
    """Style images with cached latents and feature statistics per crop."""

    def __init__(self, images, extractor: FeatureExtractor, vae: StyleVAE, size=256):
        self.images = [np.asarray(im, dtype=np.float32) for im in images]
        self.extractor = extractor
        self.vae = vae
        self.size = size
        self._cache = {}

    def __len__(self):
        return len(self.images)

    def get(self, index, rng=None):
        """``(z, FeatureStats)`` for a crop of style ``index`` (centre crop if ``rng`` is None)."""
        crop = preprocess_style(self.images[index], self.size, rng)
        key = (index, crop.shape, hash(crop.tobytes()))
        if key not in self._cache:
            batch = to_nchw(crop[None])
            with torch.no_grad():
                stats = feature_stats(self.extractor(batch))
            z = self.vae.transform(stats.vector().double().numpy())[0]
            self._cache[key] = (torch.as_tensor(z, dtype=torch.float32), stats)
        return self._cache[key]


def freeze_geometry(field: RadianceField):
    for p in field.parameters():
        p.requires_grad_(False)
    return {n: p.detach().clone() for n, p in field.named_parameters() if ".app." not in n}


def check_geometry(field: RadianceField, snapshot):
    for n, p in field.named_parameters():
        if ".app." in n:
            continue
        if not torch.equal(p, snapshot[n]):
            raise InvariantViolationError(f"geometry parameter {n} changed during stylization")


def render_patch(field, psi, z, scene, patch: PatchSample, strategy, generator=None, dtype=torch.float32):
    rays = generate_rays(scene, patch.image_index, patch.pixel_indices(), dtype)
    w_app = psi(z)
    out = render(field, rays, strategy, w_app, generator)
    h, w = len(patch.rows), len(patch.cols)
    return out.color.reshape(1, h, w, 3).permute(0, 3, 1, 2)


def stage2_losses(field, psi, extractor, scene, patch, z, style_stats, lambda_style, strategy, generator=None):
    dtype = psi.reference.dtype
    pred = render_patch(field, psi, z, scene, patch, strategy, generator, dtype)
    gt = to_nchw(torch.as_tensor(patch.gather(scene.images[patch.image_index]), dtype=dtype)[None])
    return stylization_losses(extractor, gt, pred, style_stats, lambda_style)


def stage2_step(psi, optimizer, field, extractor, scene, bank: StyleBank, config: TrainConfig, rng,
                generator=None, geometry_snapshot=None, view_indices=None):
    """One hypernetwork update on a random patch/style pair."""
    views = list(range(len(scene))) if view_indices is None else list(view_indices)
    view = views[int(rng.integers(len(views)))]
    style = int(rng.integers(len(bank)))
    K = scene.intrinsics[view]
    patch = sample_patch((K.height, K.width), config.patch, rng, view)
    style_rng = rng if bank.images[style].shape[:2] != (bank.size, bank.size) else None
    z, stats = bank.get(style, style_rng)
    l_content, l_style, l_total = stage2_losses(
        field, psi, extractor, scene, patch, z, stats, config.lambda_style, config.strategy(), generator
    )
    if not torch.isfinite(l_total):
        raise NumericError(f"non-finite stage-2 loss (view {view}, style {style}, window {patch.top, patch.left})")
    optimizer.zero_grad(set_to_none=True)
    l_total.backward()
    optimizer.step()
    if geometry_snapshot is not None:
        check_geometry(field, geometry_snapshot)
    return {"content": l_content.item(), "style": l_style.item(), "loss": l_total.item(), "style_index": style, "view": view}


# ---------------------------------------------------------------------------
# checkpoint helpers


def field_from_arrays(arrays, spec: FieldSpec):
    field = RadianceField(spec)
    ckpt.load_module_arrays(field, arrays)
    return field


def load_stage1(path):
    arrays, meta = ckpt.load_checkpoint(path)
    if meta.get("stage") != 1:
        raise CheckpointMismatchError(f"{path} is not a stage-1 checkpoint")
    return field_from_arrays(arrays, FieldSpec.from_dict(meta["field"])), meta, arrays


def geometry_hash(field: RadianceField):
    arrays = {n: p.detach().numpy() for n, p in field.named_parameters() if ".app." not in n}
    return ckpt.content_hash(arrays)


class MetricsLog:
    """Append-only JSONL; on resume rows at or past the resume iteration are dropped."""

    def __init__(self, path, resume_from=0):
        self.path = Path(path)
        rows = []
        if resume_from > 0 and self.path.exists():
            rows = [json.loads(l) for l in self.path.read_text().splitlines() if l.strip()]
            rows = [r for r in rows if r["iteration"] < resume_from]
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w") as fh:
            for r in rows:
                fh.write(json.dumps(r) + "\n")

    def append(self, row):
        with open(self.path, "a") as fh:
            fh.write(json.dumps(row) + "\n")

    def rows(self):
        return read_metrics(self.path)


def read_metrics(path):
    """Rows of a metrics JSONL file, without touching it."""
    return [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]


def _resume_state(path, config, stage):
    if not path.exists():
        return None
    arrays, meta = ckpt.load_checkpoint(path)
    if meta.get("architecture_hash") != architecture_hash(config, stage):
        raise CheckpointMismatchError(
            f"{path} was written for a different architecture; refusing to resume"
        )
    return arrays, meta


# ---------------------------------------------------------------------------
# stage drivers


def train_geometry(scene: MultiViewScene, config: TrainConfig, out_dir, train_indices=None, resume=True,
                   iterations=None, progress=None, metadata=None):
    """Stage 1. Returns ``(field, checkpoint_path)``.

    ``iterations`` caps the absolute iteration count reached by this call
    (defaults to ``config.stage1_iterations``), which is how a run is paused.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / STAGE1_FILE
    torch.manual_seed(config.seed)
    field = RadianceField(config.field)
    optimizer = _adam(field.parameters(), config.stage1_lr, config)
    start = 0
    state = _resume_state(path, config, 1) if resume else None
    if state is not None:
        arrays, meta = state
        ckpt.load_module_arrays(field, arrays)
        ckpt.load_optimizer_arrays(optimizer, arrays)
        start = int(meta["iteration"])
    total = config.stage1_iterations if iterations is None else min(iterations, config.stage1_iterations)
    indices = list(range(len(scene))) if train_indices is None else list(train_indices)
    pool = RayPool(scene, indices)
    log = MetricsLog(out_dir / "metrics_stage1.jsonl", start)
    strategy = config.strategy()
    t0 = time.time()

    def save(iteration):
        arrays = {**ckpt.module_arrays(field), **ckpt.optimizer_arrays(optimizer)}
        meta = _stage_meta(config, 1, iteration, scene)
        meta["train_indices"] = indices
        meta.update(metadata or {})
        ckpt.save_checkpoint(path, arrays, meta)
        if config.keep_snapshots:
            ckpt.save_checkpoint(out_dir / f"stage1_{iteration:07d}.npz", arrays, meta)

    for it in range(start, total):
        rng, gen = _iteration_rng(config.seed, 1, it)
        loss = stage1_step(field, optimizer, pool, config.batch_rays, rng, strategy, gen, it)
        if it % config.log_every == 0:
            row = {"iteration": it, "loss": loss, "lr": config.stage1_lr, "wall_time": time.time() - t0}
            log.append(row)
            if progress:
                progress(row)
        if (it + 1) % config.checkpoint_every == 0 and it + 1 < total:
            save(it + 1)
    save(max(total, start))
    return field, path


def _stage_meta(config, stage, iteration, scene):
    return {
        "stage": stage,
        "iteration": iteration,
        "field": config.field.to_dict(),
        "architecture_hash": architecture_hash(config, stage),
        "config": config.to_dict(),
        "config_hash": ckpt.stable_hash(config.to_dict()),
        "normalization": scene.normalization.to_dict(),
        "strategy": asdict(config.strategy(jitter=False)),
    }


def train_style(scene: MultiViewScene, stage1_path, style_images, extractor: FeatureExtractor, vae: StyleVAE,
                config: TrainConfig, out_dir, view_indices=None, resume=True, iterations=None, progress=None,
                metadata=None):
    """Stage 2. Returns ``(field, psi, checkpoint_path)``."""
    stage1_path = Path(stage1_path)
    if not stage1_path.exists():
        raise DependencyError(f"stage-2 training needs a stage-1 checkpoint; {stage1_path} is missing")
    field, meta1, _ = load_stage1(stage1_path)
    if ckpt.stable_hash(meta1["field"]) != ckpt.stable_hash(config.field.to_dict()):
        raise CheckpointMismatchError("stage-1 checkpoint field architecture differs from the config")
    if len(style_images) == 0:
        raise ConfigError("stage 2 needs at least one training style image")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / STAGE2_FILE
    snapshot = freeze_geometry(field)
    geo_hash = geometry_hash(field)

    torch.manual_seed(config.seed)
    psi = HyperNetwork.for_field(field, config.latent_dim, config.hyper_hidden)
    optimizer = _adam(psi.parameters(), config.stage2_lr, config)
    start = 0
    state = _resume_state(path, config, 2) if resume else None
    if state is not None:
        arrays, meta = state
        if meta["stage1_geometry_hash"] != geo_hash:
            raise CheckpointMismatchError("stage-2 checkpoint was trained on a different stage-1 geometry")
        ckpt.load_module_arrays(psi, arrays, "psi.")
        ckpt.load_optimizer_arrays(optimizer, arrays)
        start = int(meta["iteration"])
    total = config.stage2_iterations if iterations is None else min(iterations, config.stage2_iterations)
    bank = StyleBank(style_images, extractor, vae, config.style_size)
    log = MetricsLog(out_dir / "metrics_stage2.jsonl", start)
    t0 = time.time()

    def save(iteration):
        arrays = {
            **ckpt.module_arrays(field),
            **ckpt.module_arrays(psi, "psi."),
            **vae.arrays("vae."),
            **ckpt.optimizer_arrays(optimizer),
        }
        meta = _stage_meta(config, 2, iteration, scene)
        meta.update(
            stage1_geometry_hash=geo_hash,
            psi_layer_sizes=list(psi.layer_sizes),
            vae_params=vae.get_params(),
            extractor={
                "source": extractor.source,
                "pretrained": extractor.pretrained,
                "widths": list(extractor.widths),
                "pool": extractor.pool,
                "min_side": extractor.min_side,
            },
        )
        meta.update(metadata or {})
        ckpt.save_checkpoint(path, arrays, meta)
        if config.keep_snapshots:
            ckpt.save_checkpoint(out_dir / f"stage2_{iteration:07d}.npz", arrays, meta)

    for it in range(start, total):
        rng, gen = _iteration_rng(config.seed, 2, it)
        row = stage2_step(psi, optimizer, field, extractor, scene, bank, config, rng, gen, snapshot, view_indices)
        if it % config.log_every == 0:
            row = {"iteration": it, **row, "lr": config.stage2_lr, "wall_time": time.time() - t0}
            log.append(row)
            if progress:
                progress(row)
        if (it + 1) % config.checkpoint_every == 0 and it + 1 < total:
            save(it + 1)
    check_geometry(field, snapshot)
    save(max(total, start))
    return field, psi, path


def load_stage2(path):
    """``(field, psi, vae, meta)`` from a stage-2 checkpoint."""
    arrays, meta = ckpt.load_checkpoint(path)
    if meta.get("stage") != 2:
        raise CheckpointMismatchError(f"{path} is not a stage-2 checkpoint")
    config = TrainConfig.from_dict(meta["config"])
    field = field_from_arrays(arrays, config.field)
    if geometry_hash(field) != meta["stage1_geometry_hash"]:
        raise CheckpointMismatchError(f"{path}: geometry does not match its stage-1 hash")
    psi = HyperNetwork(
        torch.as_tensor(arrays["psi.reference"]), meta["psi_layer_sizes"], config.latent_dim, config.hyper_hidden
    )
    ckpt.load_module_arrays(psi, arrays, "psi.")
    vae = StyleVAE.from_arrays(arrays, meta["vae_params"], "vae.")
    return field, psi, vae, meta


def run_stage(config: TrainConfig, scene: MultiViewScene, checkpoints_dir, stage, **kwargs):
    """Dispatch to :func:`train_geometry` (stage 1) or :func:`train_style` (stage 2)."""
    checkpoints_dir = Path(checkpoints_dir)
    if stage == 1:
        return train_geometry(scene, config, checkpoints_dir, **kwargs)
    if stage == 2:
        return train_style(scene, checkpoints_dir / STAGE1_FILE, config=config, out_dir=checkpoints_dir, **kwargs)
    raise ConfigError(f"stage must be 1 or 2, got {stage}")
