"""Synthetic desk-scale scenes and style images with analytic ground truth.

The toy scene is a procedurally textured sphere at the origin, surrounded by
a textured dome far outside the unit sphere (after normalization), seen by a
ring of cameras looking at the origin. Colour and depth of every ray are
available in closed form.
"""

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .scene_io import CameraIntrinsics, CameraPose, all_pixels, pixel_rays, save_png, write_colmap_text

# sharp-edged stand-in for "infinitely" dense matter in the analytic field
_SOLID_DENSITY = 1e4


@dataclass(frozen=True)
class ToySceneSpec:
    n_views: int = 30
    width: int = 100
    height: int = 100
    ring_radius: float = 4.0
    elevation_amplitude: float = 0.5
    sphere_radius: float = 1.0
    dome_radius: float = 12.0
    fov_degrees: float = 40.0
    texture_frequency: float = 2.5
    store_depth: bool = True
    seed: int = 0

    @property
    def intrinsics(self):
        f = 0.5 * self.width / math.tan(math.radians(self.fov_degrees) / 2)
        return CameraIntrinsics(f, f, self.width / 2, self.height / 2, self.width, self.height)


def _phases(seed):
    return np.random.default_rng(seed).uniform(0, 2 * np.pi, size=6)


def sphere_texture(unit_dirs, spec: ToySceneSpec):
    """Surface colour of the sphere as a function of the outward normal."""
    ph = _phases(spec.seed)
    k = spec.texture_frequency
    n = np.asarray(unit_dirs)
    r = 0.5 + 0.35 * np.sin(k * n[..., 0] + ph[0])
    g = 0.5 + 0.35 * np.sin(k * n[..., 1] + ph[1])
    b = 0.5 + 0.35 * np.sin(k * n[..., 2] + ph[2])
    return np.stack([r, g, b], axis=-1)


def dome_texture(unit_dirs, spec: ToySceneSpec):
    """Dome colour as a function of the direction from the origin."""
    ph = _phases(spec.seed)
    n = np.asarray(unit_dirs)
    az = np.arctan2(n[..., 1], n[..., 0])
    r = 0.45 + 0.25 * np.sin(2 * az + ph[3]) + 0.1 * n[..., 2]
    g = 0.40 + 0.20 * np.cos(3 * az + ph[4])
    b = 0.55 + 0.25 * n[..., 2] + 0.1 * np.sin(az + ph[5])
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)


def ring_poses(spec: ToySceneSpec):
    poses = []
    for k in range(spec.n_views):
        theta = 2 * np.pi * k / spec.n_views
        z = spec.elevation_amplitude * np.sin(3 * theta)
        eye = np.array([spec.ring_radius * np.cos(theta), spec.ring_radius * np.sin(theta), z])
        poses.append(CameraPose.look_at(eye, np.zeros(3)))
    return poses


def _sphere_hit(o, d, radius):
    b = (o * d).sum(-1)
    c = (o * o).sum(-1) - radius**2
    disc = b * b - c
    t = -b - np.sqrt(np.clip(disc, 0.0, None))
    return (disc > 0) & (t > 0), t


def _dome_hit(o, d, radius):
    b = (o * d).sum(-1)
    c = (o * o).sum(-1) - radius**2
    return -b + np.sqrt(np.clip(b * b - c, 0.0, None))


def trace(origins, dirs, spec: ToySceneSpec):
    """Analytic colour and along-ray depth in world units."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    hit, t_s = _sphere_hit(o, d, spec.sphere_radius)
    t_d = _dome_hit(o, d, spec.dome_radius)
    depth = np.where(hit, t_s, t_d)
    p = o + depth[..., None] * d
    n = p / np.linalg.norm(p, axis=-1, keepdims=True)
    color = np.where(hit[..., None], sphere_texture(n, spec), dome_texture(n, spec))
    return color, depth


def render_view(pose, spec: ToySceneSpec):
    K = spec.intrinsics
    pix = all_pixels(K.height, K.width)
    uv = np.stack([pix[:, 1] + 0.5, pix[:, 0] + 0.5], axis=-1)
    o, d = pixel_rays(pose, K, uv)
    color, depth = trace(o.numpy(), d.numpy(), spec)
    return color.reshape(K.height, K.width, 3), depth.reshape(K.height, K.width)


def make_toy_scene(out_dir, spec: ToySceneSpec = ToySceneSpec()):
    """Write ``images/``, ``sparse/0`` (COLMAP text) and ``depth/`` for the toy scene."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    poses = ring_poses(spec)
    names = [f"view_{k:03d}.png" for k in range(spec.n_views)]
    for pose, name in zip(poses, names):
        color, depth = render_view(pose, spec)
        save_png(out_dir / "images" / name, color)
        if spec.store_depth:
            (out_dir / "depth").mkdir(exist_ok=True)
            np.save(out_dir / "depth" / (Path(name).stem + ".npy"), depth)
    write_colmap_text(out_dir / "sparse" / "0", poses, [spec.intrinsics] * spec.n_views, names)
    (out_dir / "toy_spec.json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True))
    return out_dir


def load_toy_spec(scene_dir):
    path = Path(scene_dir) / "toy_spec.json"
    return ToySceneSpec(**json.loads(path.read_text()))


class _AnalyticVolume:
    """Field-protocol adapter: ``features`` returns the query points themselves."""

    def __init__(self, owner, volume):
        self.owner = owner
        self.volume = volume

    def features(self, x):
        return x

    def density_from_features(self, x):
        return self.owner.density(x, self.volume)

    def color_from_features(self, x, d, app_weights=None):
        return self.owner.color(x, self.volume)


class ToySceneField:
    """The toy scene expressed as a radiance field in normalized coordinates.

    Matter is a hard, very dense shell: the sphere interior and everything
    beyond the dome. Colour is the surface texture at the radial projection of
    the query point, so a ray's colour is its analytic pixel colour up to the
    sample spacing.
    """

    def __init__(self, spec: ToySceneSpec, normalization, dtype=torch.float64):
        self.spec = spec
        self.scale = float(normalization.scale)
        if not np.allclose(normalization.translation, 0, atol=1e-6):
            raise ValueError("toy field assumes the scene is centred at the origin")
        self.sphere_radius = spec.sphere_radius * self.scale
        self.dome_radius = spec.dome_radius * self.scale
        self.dtype = dtype
        self.fg = _AnalyticVolume(self, "fg")
        self.bg = _AnalyticVolume(self, "bg")

    def density(self, x, volume):
        if volume == "fg":
            inside = torch.linalg.norm(x, dim=-1) < self.sphere_radius
        else:
            inside = x[..., 3] < 1.0 / self.dome_radius
        return inside.to(x.dtype) * _SOLID_DENSITY

    def color(self, x, volume):
        if volume == "fg":
            n = x / torch.clamp(torch.linalg.norm(x, dim=-1, keepdim=True), min=1e-12)
            c = sphere_texture(n.detach().numpy(), self.spec)
        else:
            c = dome_texture(x[..., :3].detach().numpy(), self.spec)
        return torch.as_tensor(c, dtype=x.dtype)


STYLE_PALETTES = (
    ((0.9, 0.2, 0.1), (1.0, 0.8, 0.1)),
    ((0.1, 0.2, 0.8), (0.6, 0.9, 1.0)),
    ((0.1, 0.6, 0.2), (0.9, 0.9, 0.4)),
    ((0.5, 0.1, 0.6), (0.95, 0.6, 0.8)),
    ((0.05, 0.05, 0.05), (0.9, 0.9, 0.9)),
    ((0.6, 0.3, 0.1), (0.2, 0.7, 0.7)),
)


def make_style_image(index, size=256, seed=0):
    """Procedural 'painting': two-colour stripes and blobs on a palette."""
    rng = np.random.default_rng([seed, index])
    c0, c1 = (np.array(c) for c in STYLE_PALETTES[index % len(STYLE_PALETTES)])
    yy, xx = np.mgrid[0:size, 0:size] / size
    angle = rng.uniform(0, np.pi)
    freq = rng.uniform(4, 14)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy))
    blobs = np.zeros_like(xx)
    for _ in range(6):
        cx, cy, s = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.04, 0.15)
        blobs += np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
    mix = np.clip(0.6 * stripes + 0.6 * np.tanh(blobs), 0.0, 1.0)[..., None]
    img = (1 - mix) * c0 + mix * c1 + rng.normal(0, 0.03, size=(size, size, 3))
    return np.clip(img, 0.0, 1.0)


def make_style_corpus(out_dir, count=8, size=256, seed=0):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        p = out_dir / f"style_{i:03d}.png"
        save_png(p, make_style_image(i, size, seed))
        paths.append(p)
    return paths
