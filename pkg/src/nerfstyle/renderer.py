"""Differentiable volume rendering through a foreground/background field pair.

Foreground samples are stratified in ray distance over the unit-sphere
segment. Background samples are stratified in inverse radius ``u = 1/r`` over
``(0, 1/r0]``, where ``r0`` is the radius at which the ray's background segment
starts (1 for rays crossing the unit sphere); their segment length is
measured in ``u``, so the last background bin ends at ``u = 0`` with a finite
length. Background samples are composited after the foreground.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .rays import RayBatch, intersect_unit_sphere
from .scene_io import all_pixels, camera_rays

DEPTH_EPS = 1e-10

__all__ = [
    "RayBatch",
    "SampleStrategy",
    "Samples",
    "RenderOutput",
    "intersect_unit_sphere",
    "sample_along_ray",
    "composite",
    "render",
    "render_image",
]


@dataclass(frozen=True)
class SampleStrategy:
    n_fg: int = 64
    n_bg: int = 32
    jitter: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_fg < 1 or self.n_bg < 0:
            raise ValueError(f"need n_fg >= 1 and n_bg >= 0, got {self.n_fg}, {self.n_bg}")

    def generator(self):
        return torch.Generator().manual_seed(self.seed)


@dataclass
class Samples:
    fg_t: torch.Tensor
    fg_delta: torch.Tensor
    bg_t: torch.Tensor
    bg_inv_r: torch.Tensor
    bg_delta: torch.Tensor

    def fg_points(self, rays):
        return rays.origins[:, None, :] + self.fg_t[..., None] * rays.directions[:, None, :]

    def bg_points(self, rays):
        """Inverted-sphere coordinates ``(x/r, y/r, z/r, 1/r)`` of the background samples."""
        x = rays.origins[:, None, :] + self.bg_t[..., None] * rays.directions[:, None, :]
        unit = x / torch.linalg.norm(x, dim=-1, keepdim=True)
        return torch.cat([unit, self.bg_inv_r[..., None]], dim=-1)


@dataclass
class RenderOutput:
    color: torch.Tensor
    opacity: torch.Tensor
    depth: torch.Tensor
    weights: Optional[torch.Tensor] = None


def _offsets(shape, strategy, generator, dtype):
    if strategy.jitter:
        return torch.rand(shape, generator=generator, dtype=dtype)
    return torch.full(shape, 0.5, dtype=dtype)


def sample_along_ray(rays: RayBatch, strategy: SampleStrategy, generator=None) -> Samples:
    """Stratified sample distances and segment lengths for every ray."""
    dtype = rays.origins.dtype
    M = len(rays)
    if strategy.jitter and generator is None:
        generator = strategy.generator()

    near, far = rays.t_near, rays.t_far
    width = (far - near) / strategy.n_fg
    idx = torch.arange(strategy.n_fg, dtype=dtype)
    fg_off = _offsets((M, strategy.n_fg), strategy, generator, dtype)
    fg_t = near[:, None] + (idx[None, :] + fg_off) * width[:, None]
    fg_delta = width[:, None].expand(M, strategy.n_fg)

    if strategy.n_bg == 0:
        empty = torch.zeros((M, 0), dtype=dtype)
        return Samples(fg_t, fg_delta, empty, empty, empty)

    b = (rays.origins * rays.directions).sum(-1)
    oo = (rays.origins * rays.origins).sum(-1)
    closest = torch.clamp(-b, min=0.0)
    r_closest = torch.sqrt(torch.clamp(oo - 2 * b * closest + closest * closest, min=0.0))
    r0 = torch.where(rays.hits_foreground, torch.ones_like(oo), torch.clamp(r_closest, min=1.0))
    u_max = 1.0 / r0
    bidx = torch.arange(strategy.n_bg, dtype=dtype)
    if strategy.jitter:
        bg_off = 1.0 - torch.rand((M, strategy.n_bg), generator=generator, dtype=dtype)
    else:
        bg_off = torch.full((M, strategy.n_bg), 0.5, dtype=dtype)
    frac = (bidx[None, :] + bg_off) / strategy.n_bg
    inv_r = torch.clamp(u_max[:, None] * (1.0 - frac), min=1e-8)
    r = 1.0 / inv_r
    # far root of |o + t d| = r
    bg_t = -b[:, None] + torch.sqrt(torch.clamp(b[:, None] ** 2 - oo[:, None] + r * r, min=0.0))
    bg_delta = (u_max / strategy.n_bg)[:, None].expand(M, strategy.n_bg)
    return Samples(fg_t, fg_delta, bg_t, inv_r, bg_delta)


def composite(sigma, color, delta, t=None, check=True) -> RenderOutput:
    """Front-to-back alpha compositing along the last sample axis.

    ``sigma`` and ``delta`` are ``(..., N)``, ``color`` is ``(..., N, 3)``.
    """
    sigma = torch.as_tensor(sigma)
    delta = torch.as_tensor(delta, dtype=sigma.dtype)
    color = torch.as_tensor(color, dtype=sigma.dtype)
    if check and (bool((sigma < 0).any()) or bool((delta < 0).any())):
        raise ValueError("composite requires nonnegative densities and segment lengths")
    tau = sigma * delta
    alpha = -torch.expm1(-tau)
    # exclusive cumulative optical depth
    optical = torch.cumsum(tau, dim=-1)
    optical = torch.cat([torch.zeros_like(optical[..., :1]), optical[..., :-1]], dim=-1)
    trans = torch.exp(-optical)
    weights = trans * alpha
    rgb = (weights[..., None] * color).sum(-2)
    opacity = weights.sum(-1)
    if t is None:
        depth = torch.zeros_like(opacity)
    else:
        t = torch.as_tensor(t, dtype=sigma.dtype)
        depth = (weights * t).sum(-1) / torch.clamp(opacity, min=DEPTH_EPS)
    return RenderOutput(rgb, opacity, depth, weights)


def _volume_query(vf, points, dirs, app_weights):
    M, N = points.shape[:2]
    flat_pts = points.reshape(M * N, -1)
    flat_dirs = dirs[:, None, :].expand(M, N, 3).reshape(M * N, 3)
    h = vf.features(flat_pts)
    sigma = vf.density_from_features(h).reshape(M, N)
    rgb = vf.color_from_features(h, flat_dirs, app_weights).reshape(M, N, 3)
    return sigma, rgb


def _split_app_weights(field, app_weights):
    if app_weights is None:
        return {"fg": None, "bg": None}
    if isinstance(app_weights, dict):
        return app_weights
    return field.unflatten_appearance(app_weights)


def render(field, rays: RayBatch, strategy: SampleStrategy, app_weights=None, generator=None) -> RenderOutput:
    """Volume-render ``rays`` through ``field``.

    ``field`` is a :class:`~nerfstyle.field.RadianceField` (or any object with
    ``fg``/``bg`` members exposing ``features``, ``density_from_features`` and
    ``color_from_features``). ``app_weights`` overrides the appearance branch,
    either as a flat vector or as the output of ``unflatten_appearance``.
    """
    samples = sample_along_ray(rays, strategy, generator)
    app = _split_app_weights(field, app_weights)
    fg_sigma, fg_rgb = _volume_query(field.fg, samples.fg_points(rays), rays.directions, app["fg"])
    parts_sigma, parts_rgb = [fg_sigma], [fg_rgb]
    parts_delta, parts_t = [samples.fg_delta], [samples.fg_t]
    if strategy.n_bg > 0:
        bg_sigma, bg_rgb = _volume_query(field.bg, samples.bg_points(rays), rays.directions, app["bg"])
        parts_sigma.append(bg_sigma)
        parts_rgb.append(bg_rgb)
        parts_delta.append(samples.bg_delta)
        parts_t.append(samples.bg_t)
    return composite(
        torch.cat(parts_sigma, -1),
        torch.cat(parts_rgb, -2),
        torch.cat(parts_delta, -1),
        torch.cat(parts_t, -1),
        check=False,
    )


@dataclass
class ImageRender:
    color: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray


def render_image(field, pose, intrinsics, strategy: SampleStrategy, tile_size=4096, app_weights=None, dtype=None) -> ImageRender:
    """Render a full frame in tiles of ``tile_size`` rays (no gradients)."""
    if tile_size < 1:
        raise ValueError("tile_size must be positive")
    if dtype is None:
        dtype = field.dtype if hasattr(field, "dtype") else next(field.parameters()).dtype
    H, W = intrinsics.height, intrinsics.width
    pixels = all_pixels(H, W)
    colors, depths, opac = [], [], []
    generator = strategy.generator() if strategy.jitter else None
    if app_weights is not None and not isinstance(app_weights, dict):
        app_weights = field.unflatten_appearance(torch.as_tensor(app_weights, dtype=dtype))
    with torch.no_grad():
        for start in range(0, len(pixels), tile_size):
            rays = camera_rays(pose, intrinsics, pixels[start : start + tile_size], dtype=dtype)
            out = render(field, rays, strategy, app_weights, generator)
            colors.append(out.color)
            depths.append(out.depth)
            opac.append(out.opacity)
    return ImageRender(
        torch.cat(colors).reshape(H, W, 3).numpy(),
        torch.cat(depths).reshape(H, W).numpy(),
        torch.cat(opac).reshape(H, W).numpy(),
    )
