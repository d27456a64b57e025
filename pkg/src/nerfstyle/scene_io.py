"""Multi-view scene ingestion: COLMAP models, pose normalization, rays, style corpora.

Conventions
-----------
* Poses are stored camera-to-world: ``x_world = rotation @ x_cam + translation``,
  so ``translation`` is the camera centre. Camera axes follow COLMAP/OpenCV
  (x right, y down, z forward); the optical axis is ``rotation[:, 2]``.
* Integer pixel ``(row, col)`` addresses the pixel centre ``(col + 0.5, row + 0.5)``.
"""

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError, DataError, DegenerateSceneError, FormatError, UnsupportedCameraModelError
from .rays import RayBatch

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

# COLMAP binary model ids -> (name, number of params)
_COLMAP_MODELS = {
    0: ("SIMPLE_PINHOLE", 3),
    1: ("PINHOLE", 4),
    2: ("SIMPLE_RADIAL", 4),
    3: ("RADIAL", 5),
    4: ("OPENCV", 8),
    5: ("OPENCV_FISHEYE", 8),
    6: ("FULL_OPENCV", 12),
    7: ("FOV", 5),
    8: ("SIMPLE_RADIAL_FISHEYE", 4),
    9: ("RADIAL_FISHEYE", 5),
    10: ("THIN_PRISM_FISHEYE", 12),
}


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DataError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise DataError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or np.linalg.det(R) < 0:
            raise DataError("pose rotation is not a proper orthonormal matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def center(self):
        return self.translation

    @property
    def optical_axis(self):
        return self.rotation[:, 2]

    def world_to_camera(self, points):
        return (np.asarray(points) - self.translation) @ self.rotation

    def camera_to_world(self, points):
        return np.asarray(points) @ self.rotation.T + self.translation

    @classmethod
    def from_world_to_camera(cls, rotation, translation):
        R = np.asarray(rotation, dtype=np.float64)
        t = np.asarray(translation, dtype=np.float64)
        return cls(R.T, -R.T @ t)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)):
        """Pose at ``eye`` with its optical axis pointing at ``target``."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, np.array([1.0, 0.0, 0.0]))
        x /= np.linalg.norm(x)
        # image y points down, so y = z x x keeps a right-handed frame
        y = np.cross(z, x)
        return cls(np.stack([x, y, z], axis=1), eye)

    def allclose(self, other, atol=1e-9):
        return np.allclose(self.rotation, other.rotation, atol=atol) and np.allclose(
            self.translation, other.translation, atol=atol
        )


def qvec_to_rotmat(qvec, tol=1e-3):
    """Rotation matrix of a COLMAP ``(qw, qx, qy, qz)`` quaternion."""
    q = np.asarray(qvec, dtype=np.float64)
    norm = np.linalg.norm(q)
    if abs(norm - 1.0) > tol:
        raise DataError(f"quaternion {tuple(q)} has norm {norm:.6f}, expected 1")
    w, x, y, z = q / norm
    return np.array(
        [
            [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * z * x + 2 * w * y],
            [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
            [2 * z * x - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
        ]
    )


def rotmat_to_qvec(R):
    R = np.asarray(R, dtype=np.float64)
    Rxx, Ryx, Rzx, Rxy, Ryy, Rzy, Rxz, Ryz, Rzz = R.flat
    K = (
        np.array(
            [
                [Rxx - Ryy - Rzz, 0, 0, 0],
                [Ryx + Rxy, Ryy - Rxx - Rzz, 0, 0],
                [Rzx + Rxz, Rzy + Ryz, Rzz - Rxx - Ryy, 0],
                [Ryz - Rzy, Rzx - Rxz, Rxy - Ryx, Rxx + Ryy + Rzz],
            ]
        )
        / 3.0
    )
    eigvals, eigvecs = np.linalg.eigh(K)
    qvec = eigvecs[[3, 0, 1, 2], np.argmax(eigvals)]
    if qvec[0] < 0:
        qvec *= -1
    return qvec


def _intrinsics_from_colmap(model, width, height, params):
    if model == "PINHOLE":
        fx, fy, cx, cy = params[:4]
    elif model == "SIMPLE_PINHOLE":
        f, cx, cy = params[:3]
        fx = fy = f
    else:
        raise UnsupportedCameraModelError(model)
    return CameraIntrinsics(float(fx), float(fy), float(cx), float(cy), int(width), int(height))


def _data_lines(path):
    with open(path, "r") as fh:
        for raw in fh:
            line = raw.strip()
            if line and not line.startswith("#"):
                yield line


def read_cameras_text(path):
    cameras = {}
    for line in _data_lines(path):
        elems = line.split()
        if len(elems) < 5:
            raise FormatError(f"{path}: malformed camera line {line!r}")
        cam_id, model = int(elems[0]), elems[1]
        width, height = int(elems[2]), int(elems[3])
        params = [float(v) for v in elems[4:]]
        cameras[cam_id] = (model, width, height, params)
    return cameras


def read_images_text(path):
    """``{name: (qvec, tvec, camera_id)}``; the 2D-point lines are skipped."""
    images = {}
    with open(path, "r") as fh:
        lines = [ln.rstrip("\n") for ln in fh if not ln.startswith("#")]
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        if not line:
            i += 1
            continue
        elems = line.split()
        if len(elems) < 10:
            raise FormatError(f"{path}: malformed image line {line!r}")
        qvec = np.array([float(v) for v in elems[1:5]])
        tvec = np.array([float(v) for v in elems[5:8]])
        cam_id = int(elems[8])
        name = " ".join(elems[9:])
        images[name] = (qvec, tvec, cam_id)
        i += 2
    return images


def _read_bytes(fh, n, fmt):
    data = fh.read(n)
    if len(data) != n:
        raise FormatError("truncated COLMAP binary file")
    return struct.unpack("<" + fmt, data)


def read_cameras_binary(path):
    cameras = {}
    with open(path, "rb") as fh:
        (count,) = _read_bytes(fh, 8, "Q")
        for _ in range(count):
            cam_id, model_id, width, height = _read_bytes(fh, 24, "iiQQ")
            if model_id not in _COLMAP_MODELS:
                raise FormatError(f"{path}: unknown camera model id {model_id}")
            name, n_params = _COLMAP_MODELS[model_id]
            params = list(_read_bytes(fh, 8 * n_params, "d" * n_params))
            cameras[cam_id] = (name, width, height, params)
    return cameras


def read_images_binary(path):
    images = {}
    with open(path, "rb") as fh:
        (count,) = _read_bytes(fh, 8, "Q")
        for _ in range(count):
            props = _read_bytes(fh, 64, "idddddddi")
            qvec, tvec, cam_id = np.array(props[1:5]), np.array(props[5:8]), props[8]
            name = b""
            ch = fh.read(1)
            while ch != b"\x00":
                if not ch:
                    raise FormatError("truncated COLMAP binary file")
                name += ch
                ch = fh.read(1)
            (n_points,) = _read_bytes(fh, 8, "Q")
            fh.read(24 * n_points)
            images[name.decode("utf-8")] = (qvec, tvec, cam_id)
    return images


def parse_colmap(model_dir) -> Tuple[List[CameraPose], List[CameraIntrinsics], List[str]]:
    """Read a COLMAP sparse model (text, or binary as a fallback).

    Returns camera-to-world poses, per-image intrinsics and image names, all
    ordered by image name.
    """
    model_dir = Path(model_dir)
    if (model_dir / "cameras.txt").exists() and (model_dir / "images.txt").exists():
        cameras = read_cameras_text(model_dir / "cameras.txt")
        images = read_images_text(model_dir / "images.txt")
    elif (model_dir / "cameras.bin").exists() and (model_dir / "images.bin").exists():
        cameras = read_cameras_binary(model_dir / "cameras.bin")
        images = read_images_binary(model_dir / "images.bin")
    else:
        raise FormatError(f"{model_dir}: no COLMAP model (cameras.txt/images.txt or .bin) found")

    poses, intrinsics, names = [], [], []
    for name in sorted(images):
        qvec, tvec, cam_id = images[name]
        if cam_id not in cameras:
            raise FormatError(f"image {name!r} references unknown camera {cam_id}")
        model, width, height, params = cameras[cam_id]
        intrinsics.append(_intrinsics_from_colmap(model, width, height, params))
        poses.append(CameraPose.from_world_to_camera(qvec_to_rotmat(qvec), tvec))
        names.append(name)
    return poses, intrinsics, names


def write_colmap_text(model_dir, poses, intrinsics, names):
    """Write a PINHOLE text model, one camera entry per image."""
    model_dir = Path(model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    with open(model_dir / "cameras.txt", "w") as fh:
        fh.write("# Camera list with one line of data per camera:\n")
        fh.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for i, K in enumerate(intrinsics, start=1):
            fh.write(f"{i} PINHOLE {K.width} {K.height} {K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r}\n")
    with open(model_dir / "images.txt", "w") as fh:
        fh.write("# Image list with two lines of data per image:\n")
        fh.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        fh.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for i, (pose, name) in enumerate(zip(poses, names), start=1):
            R_w2c = pose.rotation.T
            t_w2c = -R_w2c @ pose.translation
            q = rotmat_to_qvec(R_w2c)
            vals = " ".join(repr(float(v)) for v in (*q, *t_w2c))
            fh.write(f"{i} {vals} {i} {name}\n\n")
    (model_dir / "points3D.txt").write_text("# 3D point list (empty)\n")


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    """``x -> scale * rotation @ x + translation``."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def apply_points(self, points):
        return self.scale * (np.asarray(points) @ np.asarray(self.rotation).T) + self.translation

    def apply_pose(self, pose):
        R = np.asarray(self.rotation)
        return CameraPose(R @ pose.rotation, self.apply_points(pose.translation))

    def inverse(self):
        R = np.asarray(self.rotation)
        return SimilarityTransform(
            1.0 / self.scale, R.T, -(R.T @ np.asarray(self.translation)) / self.scale
        )

    def to_dict(self):
        return {
            "scale": float(self.scale),
            "rotation": np.asarray(self.rotation).tolist(),
            "translation": np.asarray(self.translation).tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["scale"]), np.array(d["rotation"]), np.array(d["translation"]))


def axes_focus_point(poses):
    """Least-squares intersection point of the cameras' optical axes."""
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for pose in poses:
        a = pose.optical_axis / np.linalg.norm(pose.optical_axis)
        P = np.eye(3) - np.outer(a, a)
        A += P
        b += P @ pose.center
    eig = np.linalg.eigvalsh(A)
    if eig[0] < 1e-9 * max(eig[-1], 1.0):
        raise DegenerateSceneError("optical axes are parallel; no focus point exists")
    return np.linalg.solve(A, b)


def normalize_scene(poses, intrinsics=None, rho_cam=3.0):
    """Similarity transform centring the axis focus point and scaling the
    farthest camera to distance ``rho_cam`` from the origin."""
    if len(poses) < 2:
        raise DegenerateSceneError("need at least two poses to normalize a scene")
    if rho_cam <= 1.0:
        raise ConfigError(f"rho_cam must exceed 1 (cameras sit outside the unit sphere), got {rho_cam}")
    focus = axes_focus_point(poses)
    radius = max(np.linalg.norm(p.center - focus) for p in poses)
    if radius <= 0:
        raise DegenerateSceneError("all cameras coincide with the focus point")
    scale = rho_cam / radius
    return SimilarityTransform(scale, np.eye(3), -scale * focus)


def load_image(path):
    """8-bit image as float32 ``(H, W, 3)`` in [0, 1] (no gamma handling)."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load image {path}: {exc}") from exc
    return arr / 255.0


def save_png(path, image):
    """Quantize [0, 1] floats to 8-bit with round-half-to-even."""
    arr = np.rint(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)


def save_depth_png(path, depth, max_depth):
    """16-bit depth PNG: stored value = depth / max_depth * 65535."""
    arr = np.rint(np.clip(np.asarray(depth) / max_depth, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(path)


def load_depth_png(path, max_depth):
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 65535.0 * max_depth


@dataclass(frozen=True, eq=False)
class MultiViewScene:
    """Images with normalized camera-to-world poses."""

    images: Tuple[np.ndarray, ...]
    poses: Tuple[CameraPose, ...]
    intrinsics: Tuple[CameraIntrinsics, ...]
    normalization: SimilarityTransform
    names: Tuple[str, ...] = ()
    depths: Optional[Tuple[np.ndarray, ...]] = None

    def __post_init__(self):
        if len(self.poses) < 2:
            raise DataError("a scene needs at least two views")
        if len(self.images) != len(self.poses) or len(self.intrinsics) != len(self.poses):
            raise DataError("images, poses and intrinsics must have the same length")
        for img, K in zip(self.images, self.intrinsics):
            if img.shape != (K.height, K.width, 3):
                raise DataError(f"image shape {img.shape} does not match intrinsics {K.width}x{K.height}")
            img.setflags(write=False)

    def __len__(self):
        return len(self.poses)

    @classmethod
    def from_raw(cls, images, poses, intrinsics, rho_cam=3.0, names=(), depths=None):
        transform = normalize_scene(poses, intrinsics, rho_cam)
        normed = tuple(transform.apply_pose(p) for p in poses)
        if depths is not None:
            depths = tuple(np.asarray(d) * transform.scale for d in depths)
        return cls(
            tuple(np.asarray(im, dtype=np.float32) for im in images),
            normed,
            tuple(intrinsics),
            transform,
            tuple(names),
            depths,
        )

    @classmethod
    def from_directory(cls, root, rho_cam=3.0):
        """Load ``root/images/*`` with the COLMAP model in ``root/sparse/0``.

        A ``root/depth/<stem>.npy`` file per image, when present, is loaded as
        ground-truth depth (scene units, along-ray distance).
        """
        root = Path(root)
        model_dir = root / "sparse" / "0"
        if not model_dir.exists():
            raise FormatError(f"{root}: missing sparse/0 COLMAP model directory")
        poses, intrinsics, names = parse_colmap(model_dir)
        images = [load_image(root / "images" / name) for name in names]
        depth_paths = [root / "depth" / (Path(n).stem + ".npy") for n in names]
        depths = None
        if all(p.exists() for p in depth_paths):
            depths = [np.load(p) for p in depth_paths]
        return cls.from_raw(images, poses, intrinsics, rho_cam, names, depths)

    def subset(self, indices):
        indices = list(indices)
        return MultiViewScene(
            tuple(self.images[i] for i in indices),
            tuple(self.poses[i] for i in indices),
            tuple(self.intrinsics[i] for i in indices),
            self.normalization,
            tuple(self.names[i] for i in indices) if self.names else (),
            None if self.depths is None else tuple(self.depths[i] for i in indices),
        )


def pixel_rays(pose, intrinsics, uv, dtype=torch.float64):
    """Rays through continuous image-plane points ``uv`` (x right, y down)."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    cam = np.stack(
        [
            (uv[:, 0] - intrinsics.cx) / intrinsics.fx,
            (uv[:, 1] - intrinsics.cy) / intrinsics.fy,
            np.ones(len(uv)),
        ],
        axis=-1,
    )
    dirs = cam @ pose.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.tile(pose.center, (len(dirs), 1))
    return torch.as_tensor(origins, dtype=dtype), torch.as_tensor(dirs, dtype=dtype)


def camera_rays(pose, intrinsics, pixel_indices, dtype=torch.float64, image_index=None):
    """RayBatch through the centres of integer ``(row, col)`` pixels."""
    pix = np.asarray(pixel_indices, dtype=np.int64).reshape(-1, 2)
    if pix.size and (
        pix[:, 0].min() < 0
        or pix[:, 1].min() < 0
        or pix[:, 0].max() >= intrinsics.height
        or pix[:, 1].max() >= intrinsics.width
    ):
        raise IndexError(
            f"pixel index outside {intrinsics.height}x{intrinsics.width} image"
        )
    uv = np.stack([pix[:, 1] + 0.5, pix[:, 0] + 0.5], axis=-1)
    origins, dirs = pixel_rays(pose, intrinsics, uv, dtype)
    return RayBatch(origins, dirs, torch.as_tensor(pix), image_index)


def generate_rays(scene: MultiViewScene, image_index: int, pixel_indices, dtype=torch.float64) -> RayBatch:
    if not 0 <= image_index < len(scene):
        raise IndexError(f"image index {image_index} out of range for {len(scene)} views")
    return camera_rays(
        scene.poses[image_index], scene.intrinsics[image_index], pixel_indices, dtype, image_index
    )


def all_pixels(height, width):
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=-1)


@dataclass(frozen=True)
class StyleCorpus:
    train_paths: Tuple[str, ...]
    test_paths: Tuple[str, ...]

    def __post_init__(self):
        if set(self.train_paths) & set(self.test_paths):
            raise DataError("style corpus train and test splits overlap")


def list_images(root):
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"style corpus directory {root} does not exist")
    out = []
    for dirpath, _, filenames in os.walk(root):
        for fn in filenames:
            if fn.lower().endswith(IMAGE_SUFFIXES):
                out.append(str(Path(dirpath) / fn))
    return sorted(out)


def split_paths(paths: Sequence[str], test_count: int, seed: int) -> StyleCorpus:
    paths = sorted(paths)
    if test_count < 0 or len(paths) < test_count:
        raise ConfigError(f"corpus has {len(paths)} images, cannot hold out {test_count}")
    order = np.random.default_rng(seed).permutation(len(paths))
    test_idx = set(order[:test_count].tolist())
    train = tuple(p for i, p in enumerate(paths) if i not in test_idx)
    test = tuple(p for i, p in enumerate(paths) if i in test_idx)
    return StyleCorpus(train, test)


def split_style_corpus(root, test_count=112, seed=0) -> StyleCorpus:
    """Deterministic train/test split of every image below ``root``."""
    return split_paths(list_images(root), test_count, seed)
