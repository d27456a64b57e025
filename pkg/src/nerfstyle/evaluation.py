"""Reconstruction quality and multi-view consistency of stylized renders.

Consistency follows the warped-error protocol: frame ``t - delta`` is
warped into frame ``t`` and the masked colour error is reported. Because
the field provides exact geometry, the warp reprojects frame ``t``'s rendered
expected depth into the earlier camera instead of estimating optical flow.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import jsonschema
import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .errors import ConfigError, ShapeError
from .scene_io import CameraIntrinsics, CameraPose, all_pixels

SCORE_SCALE = 100.0


def psnr(img_a, img_b):
    """Peak signal-to-noise ratio in dB for [0, 1] images; ``inf`` when identical."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr needs equal shapes, got {a.shape} and {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(1.0 / mse))


# ---------------------------------------------------------------------------
# camera paths


@dataclass(frozen=True)
class NovelViewPath:
    poses: tuple
    intrinsics: CameraIntrinsics
    max_step_degrees: float = 30.0

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        if len(self.poses) < 8:
            raise ConfigError("a novel-view path needs at least 8 frames (long-range pairs use t and t-7)")
        for a, b in zip(self.poses[:-1], self.poses[1:]):
            if _angle_between(a.rotation, b.rotation) > self.max_step_degrees:
                raise ConfigError(
                    f"consecutive path poses differ by more than {self.max_step_degrees} degrees"
                )

    def __len__(self):
        return len(self.poses)


def _angle_between(Ra, Rb):
    cos = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return math.degrees(math.acos(np.clip(cos, -1.0, 1.0)))


def _slerp_vec(a, b, t):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    ua, ub = a / na, b / nb
    omega = math.acos(np.clip(ua @ ub, -1.0, 1.0))
    radius = (1 - t) * na + t * nb
    if omega < 1e-9:
        return radius * ua
    return radius * (math.sin((1 - t) * omega) * ua + math.sin(t * omega) * ub) / math.sin(omega)


def interpolate_path(key_poses: Sequence[CameraPose], intrinsics, n_frames=60, closed=False, max_step_degrees=30.0):
    """Smooth path through ``key_poses``: rotations by slerp, camera centres
    by spherical interpolation about the origin. ``n_frames`` samples, evenly
    spaced in the key-pose parameter."""
    keys = list(key_poses) + ([key_poses[0]] if closed else [])
    if len(keys) < 2:
        raise ConfigError("need at least two key poses")
    rots = Rotation.from_matrix(np.stack([p.rotation for p in keys]))
    times = np.arange(len(keys), dtype=np.float64)
    slerp = Slerp(times, rots)
    end = len(keys) - 1
    ts = np.linspace(0.0, end, n_frames, endpoint=not closed)
    poses = []
    for t in ts:
        i = min(int(math.floor(t)), end - 1)
        frac = t - i
        center = _slerp_vec(keys[i].center, keys[i + 1].center, frac)
        poses.append(CameraPose(slerp([t]).as_matrix()[0], center))
    return NovelViewPath(tuple(poses), intrinsics, max_step_degrees)


def orbit_path(radius, intrinsics, n_frames=60, elevation=0.0, arc_degrees=360.0):
    """Cameras on a horizontal circle looking at the origin."""
    poses = []
    for k in range(n_frames):
        theta = math.radians(arc_degrees) * k / n_frames
        eye = np.array([radius * math.cos(theta), radius * math.sin(theta), elevation])
        poses.append(CameraPose.look_at(eye, np.zeros(3)))
    return NovelViewPath(tuple(poses), intrinsics)


# ---------------------------------------------------------------------------
# warping


@dataclass
class Warp:
    """Sampling positions in the source frame for every target pixel.

    ``x``/``y`` are continuous array indices (pixel centres at integers) into
    the source image; ``mask`` marks target pixels with a valid correspondence.
    """

    x: np.ndarray
    y: np.ndarray
    mask: np.ndarray

    @property
    def coverage(self):
        return float(self.mask.mean())

    def apply(self, image):
        return bilinear_sample(image, self.x, self.y)


def bilinear_sample(image, x, y):
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape[:2]
    xc = np.clip(x, 0, W - 1)
    yc = np.clip(y, 0, H - 1)
    x0 = np.clip(np.floor(xc).astype(np.int64), 0, W - 1)
    y0 = np.clip(np.floor(yc).astype(np.int64), 0, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = xc - x0
    wy = yc - y0
    if img.ndim == 3:
        wx, wy = wx[..., None], wy[..., None]
    top = img[y0, x0] * (1 - wx) + img[y0, x1] * wx
    bot = img[y1, x0] * (1 - wx) + img[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def _snap(v, tol=1e-6):
    r = np.round(v)
    return np.where(np.abs(v - r) < tol, r, v)


def reproject(depth_t, pose_t: CameraPose, pose_src: CameraPose, K_t: CameraIntrinsics, K_src: CameraIntrinsics):
    """Project frame-t pixels, lifted by their along-ray depth, into the source camera.

    Returns ``(x, y, distance, in_front)``: source array indices, the lifted
    point's distance from the source camera centre, and a cheirality flag.
    """
    depth_t = np.asarray(depth_t, dtype=np.float64)
    H, W = depth_t.shape
    pix = all_pixels(H, W)
    cam = np.stack(
        [(pix[:, 1] + 0.5 - K_t.cx) / K_t.fx, (pix[:, 0] + 0.5 - K_t.cy) / K_t.fy, np.ones(len(pix))], -1
    )
    dirs = cam @ pose_t.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    points = pose_t.center + dirs * depth_t.reshape(-1, 1)
    local = pose_src.world_to_camera(points)
    z = local[:, 2]
    in_front = z > 1e-9
    zs = np.where(in_front, z, 1.0)
    u = K_src.fx * local[:, 0] / zs + K_src.cx
    v = K_src.fy * local[:, 1] / zs + K_src.cy
    x = _snap(u - 0.5).reshape(H, W)
    y = _snap(v - 0.5).reshape(H, W)
    dist = np.linalg.norm(points - pose_src.center, axis=-1).reshape(H, W)
    return x, y, dist, in_front.reshape(H, W)


def compute_warp(depth_t, pose_t, pose_src, K_t, K_src=None, opacity_t=None, depth_src=None,
                 opacity_threshold=0.05, depth_tolerance=0.05) -> Warp:
    """Correspondences from frame t into the source frame, with validity mask.

    Pixels are rejected when they reproject outside the source frame, fall
    behind the source camera, have opacity below ``opacity_threshold`` in
    frame t, or (when ``depth_src`` is given) disagree with the source depth
    by more than ``depth_tolerance`` relative.
    """
    K_src = K_src or K_t
    x, y, dist, in_front = reproject(depth_t, pose_t, pose_src, K_t, K_src)
    mask = in_front & (x >= 0) & (x <= K_src.width - 1) & (y >= 0) & (y <= K_src.height - 1)
    if opacity_t is not None:
        mask &= np.asarray(opacity_t) >= opacity_threshold
    if depth_src is not None:
        depth_src = np.asarray(depth_src, dtype=np.float64)
        xi = np.clip(np.rint(x).astype(np.int64), 0, K_src.width - 1)
        yi = np.clip(np.rint(y).astype(np.int64), 0, K_src.height - 1)
        ref = depth_src[yi, xi]
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.abs(dist - ref) / ref
        mask &= np.isfinite(rel) & (rel <= depth_tolerance)
    return Warp(x, y, mask)


def geometric_warp(frame_src, depth_t, pose_t, pose_src, K_t, K_src=None, **kwargs):
    """Warp ``frame_src`` into frame t; returns ``(warped, mask)``."""
    warp = compute_warp(depth_t, pose_t, pose_src, K_t, K_src, **kwargs)
    return warp.apply(frame_src), warp.mask


def consistency_score(stylized_t, stylized_src, warp: Warp, mask=None):
    """``100 * sum_mask |I_t - warp(I_src)|^2 / (3 |mask|)``; ``None`` for an empty mask."""
    mask = warp.mask if mask is None else np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return None
    a = np.asarray(stylized_t, dtype=np.float64)
    if a.shape[:2] != mask.shape:
        raise ShapeError("frame and mask sizes differ")
    diff = a[mask] - warp.apply(stylized_src)[mask]
    return float(SCORE_SCALE * (diff**2).sum() / (3 * n))


# ---------------------------------------------------------------------------
# reports


@dataclass
class PairScore:
    t: int
    delta: int
    score: Optional[float]
    coverage: float

    @property
    def skipped(self):
        return self.score is None


@dataclass
class ConsistencyReport:
    scene_id: str
    style_id: str
    n_frames: int
    pairs: List[PairScore] = field(default_factory=list)

    def mean(self, delta):
        vals = [p.score for p in self.pairs if p.delta == delta and p.score is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def deltas(self):
        return sorted({p.delta for p in self.pairs})

    def to_dict(self):
        out = {
            "scene_id": self.scene_id,
            "style_id": self.style_id,
            "n_frames": self.n_frames,
            "pairs": [
                {"t": p.t, "delta": p.delta, "score": p.score, "coverage": p.coverage, "skipped": p.skipped}
                for p in self.pairs
            ],
            "means": {str(d): self.mean(d) for d in self.deltas},
        }
        if 1 in self.deltas:
            out["short_range"] = self.mean(1)
        if 7 in self.deltas:
            out["long_range"] = self.mean(7)
        return out


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "nerfstyle consistency report",
    "type": "object",
    "required": ["version", "reports"],
    "properties": {
        "version": {"const": 1},
        "reports": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["scene_id", "style_id", "n_frames", "pairs", "means"],
                "properties": {
                    "scene_id": {"type": "string"},
                    "style_id": {"type": "string"},
                    "n_frames": {"type": "integer", "minimum": 8},
                    "short_range": {"type": ["number", "null"], "minimum": 0},
                    "long_range": {"type": ["number", "null"], "minimum": 0},
                    "means": {"type": "object", "additionalProperties": {"type": ["number", "null"]}},
                    "pairs": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["t", "delta", "score", "coverage", "skipped"],
                            "properties": {
                                "t": {"type": "integer", "minimum": 0},
                                "delta": {"type": "integer", "minimum": 1},
                                "score": {"type": ["number", "null"], "minimum": 0},
                                "coverage": {"type": "number", "minimum": 0, "maximum": 1},
                                "skipped": {"type": "boolean"},
                            },
                        },
                    },
                },
            },
        },
    },
}


def reports_document(reports: Sequence[ConsistencyReport]):
    return {"version": 1, "reports": [r.to_dict() for r in reports]}


def validate_report_document(doc):
    jsonschema.validate(doc, REPORT_SCHEMA)


def write_reports(reports: Sequence[ConsistencyReport], out_dir):
    """Write ``consistency.json`` and one ``consistency_delta<d>.csv`` table per delta
    (rows scenes, columns styles, plus an ``Average`` column)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = reports_document(reports)
    validate_report_document(doc)
    (out_dir / "consistency.json").write_text(json.dumps(doc, indent=2))
    deltas = sorted({d for r in reports for d in r.deltas})
    scenes = sorted({r.scene_id for r in reports})
    styles = sorted({r.style_id for r in reports})
    written = [out_dir / "consistency.json"]
    for d in deltas:
        path = out_dir / f"consistency_delta{d}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scene", *styles, "Average"])
            for s in scenes:
                row = []
                for st in styles:
                    match = [r.mean(d) for r in reports if r.scene_id == s and r.style_id == st]
                    row.append(match[0] if match and match[0] is not None else "")
                vals = [v for v in row if v != ""]
                w.writerow([s, *[f"{v:.4f}" if v != "" else "" for v in row], f"{np.mean(vals):.4f}" if vals else ""])
        written.append(path)
    return written


def score_sequence(frames, depths, opacities, path: NovelViewPath, deltas=(1, 7), scene_id="scene",
                   style_id="style", opacity_threshold=0.05, depth_tolerance=0.05) -> ConsistencyReport:
    """Pair scores for already-rendered frames (older frame warped into newer)."""
    T = len(frames)
    if T != len(path):
        raise ShapeError("one frame per path pose is required")
    report = ConsistencyReport(scene_id, style_id, T)
    K = path.intrinsics
    for delta in deltas:
        if delta < 1 or delta >= T:
            raise ConfigError(f"delta {delta} does not fit a {T}-frame path")
        for t in range(delta, T):
            s = t - delta
            warp = compute_warp(
                depths[t], path.poses[t], path.poses[s], K, K, opacities[t], depths[s],
                opacity_threshold, depth_tolerance,
            )
            report.pairs.append(PairScore(t, delta, consistency_score(frames[t], frames[s], warp), warp.coverage))
    return report


def render_path(field, path: NovelViewPath, strategy, app_weights=None, tile_size=4096):
    from .renderer import render_image

    out = [render_image(field, pose, path.intrinsics, strategy, tile_size, app_weights) for pose in path.poses]
    return [o.color for o in out], [o.depth for o in out], [o.opacity for o in out]


@dataclass
class SequenceRenders:
    depths: list
    opacities: list
    frames: Dict[str, list]


def evaluate_sequence(field, path: NovelViewPath, styles: Dict[str, Optional[np.ndarray]], strategy,
                      deltas=(1, 7), scene_id="scene", tile_size=4096, **warp_kwargs):
    """Consistency reports for each style's appearance weights along ``path``.

    ``styles`` maps a style id to a flat appearance vector (``None`` renders
    the field's own appearance). Geometry (depth, opacity) is rendered once
    and shared by every style. Returns ``(reports, SequenceRenders)``.
    """
    _, depths, opacities = render_path(field, path, strategy, None, tile_size)
    reports, frames = [], {}
    for style_id, w_app in styles.items():
        frames[style_id], _, _ = render_path(field, path, strategy, w_app, tile_size)
        reports.append(
            score_sequence(frames[style_id], depths, opacities, path, deltas, scene_id, style_id, **warp_kwargs)
        )
    return reports, SequenceRenders(depths, opacities, frames)


def warped_difference(frame_t, frame_src, warp: Warp):
    """Per-pixel absolute difference against the warped source; masked pixels are 0."""
    diff = np.abs(np.asarray(frame_t, dtype=np.float64) - warp.apply(frame_src))
    return np.where(warp.mask[..., None], diff, 0.0)
