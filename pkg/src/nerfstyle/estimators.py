"""Estimator-style wrappers around the two training stages.

``GeometryReconstructor`` fits the photo-real radiance field;
``SceneStylizer`` fits the hypernetwork on top of it and transforms style
images into appearance weights.
"""

import re
import tempfile
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import DependencyError
from .evaluation import psnr
from .renderer import RayBatch, render, render_image
from .scene_io import CameraIntrinsics, CameraPose, MultiViewScene, load_image
from .style_codec import FeatureExtractor, encode_style, pretrain_style_vae
from .trainer import STAGE1_FILE, TrainConfig, load_stage1, load_stage2, train_geometry, train_style
from .validation import check_image, check_is_fitted, check_latent


def make_extractor(vgg_weights=None, seed=0):
    """``None`` reads the weight-file environment variable; ``"random"`` gives
    the seeded non-pretrained extractor."""
    if vgg_weights == "random":
        return FeatureExtractor("random", seed=seed)
    return FeatureExtractor(vgg_weights)


def extractor_from_meta(meta, vgg_weights=None):
    """Rebuild the extractor a stage-2 checkpoint was trained with."""
    info = meta.get("extractor", {})
    if info.get("pretrained", True):
        return FeatureExtractor(None if vgg_weights in (None, "random") else vgg_weights)
    m = re.fullmatch(r"random\(seed=(\d+)\)", info.get("source", ""))
    kwargs = {k: info[k] for k in ("pool", "min_side") if k in info}
    if info.get("widths"):
        kwargs["widths"] = tuple(info["widths"])
    return FeatureExtractor("random", seed=int(m.group(1)) if m else 0, **kwargs)


def _load_style(image):
    if isinstance(image, (str, Path)):
        return load_image(image)
    return check_image(image, "style image")


def appearance_for_style(psi, vae, extractor, image=None, latent=None, size=256, sample_seed=None):
    """Flat appearance weights for a style image (or a precomputed latent).

    With neither, the hypernetwork's reference weights are returned, which
    render the photo-real scene.
    """
    with torch.no_grad():
        if latent is not None:
            z = check_latent(latent, psi.latent_dim)
        elif image is not None:
            z = torch.as_tensor(encode_style(_load_style(image), extractor, vae, size, sample_seed=sample_seed).z)
        else:
            return psi.reference.clone()
        return psi(z.to(psi.reference.dtype))


class GeometryReconstructor(BaseEstimator):
    """Stage-1 photo-real radiance field.

    Parameters mirror the stage-1 inputs; ``config`` defaults to the desk
    preset and ``out_dir`` to a temporary directory.
    """

    def __init__(self, config=None, out_dir=None, train_indices=None, resume=True, iterations=None):
        self.config = config
        self.out_dir = out_dir
        self.train_indices = train_indices
        self.resume = resume
        self.iterations = iterations

    def _config(self):
        return self.config if self.config is not None else TrainConfig.desk()

    def fit(self, scene: MultiViewScene, y=None):
        out_dir = self.out_dir or tempfile.mkdtemp(prefix="nerfstyle-geo-")
        config = self._config()
        field, path = train_geometry(scene, config, out_dir, self.train_indices, self.resume, self.iterations)
        self.field_ = field
        self.checkpoint_ = path
        self.strategy_ = config.strategy(jitter=False)
        return self

    @classmethod
    def from_checkpoint(cls, path):
        field, meta, _ = load_stage1(path)
        est = cls(config=TrainConfig.from_dict(meta["config"]), out_dir=str(Path(path).parent))
        est.field_ = field
        est.checkpoint_ = Path(path)
        est.strategy_ = est.config.strategy(jitter=False)
        return est

    def predict(self, rays: RayBatch):
        """``(N, 3)`` colours for a ray batch."""
        check_is_fitted(self, "field_")
        with torch.no_grad():
            return render(self.field_, rays.to(torch.float32), self.strategy_).color.numpy()

    def render_view(self, pose: CameraPose, intrinsics: CameraIntrinsics, tile_size=4096):
        check_is_fitted(self, "field_")
        return render_image(self.field_, pose, intrinsics, self.strategy_, tile_size)

    def score(self, scene: MultiViewScene, indices=None):
        """Mean PSNR (dB) over the given views of ``scene``."""
        check_is_fitted(self, "field_")
        indices = range(len(scene)) if indices is None else indices
        return float(np.mean([
            psnr(self.render_view(scene.poses[i], scene.intrinsics[i]).color, scene.images[i]) for i in indices
        ]))


class SceneStylizer(BaseEstimator, TransformerMixin):
    """Stage-2 hypernetwork over a frozen stage-1 field.

    ``fit(scene, styles)`` pretrains the style VAE on ``styles`` when none is
    given, then trains the hypernetwork. ``transform`` maps style images to
    flat appearance-weight vectors.
    """

    def __init__(self, stage1_checkpoint=None, config=None, out_dir=None, vgg_weights=None, vae=None,
                 view_indices=None, resume=True, iterations=None, seed=0):
        self.stage1_checkpoint = stage1_checkpoint
        self.config = config
        self.out_dir = out_dir
        self.vgg_weights = vgg_weights
        self.vae = vae
        self.view_indices = view_indices
        self.resume = resume
        self.iterations = iterations
        self.seed = seed

    def fit(self, scene: MultiViewScene, styles):
        if self.stage1_checkpoint is None:
            raise DependencyError("SceneStylizer needs stage1_checkpoint")
        config = self.config if self.config is not None else TrainConfig.desk()
        out_dir = self.out_dir or str(Path(self.stage1_checkpoint).parent)
        images = [_load_style(s) for s in styles]
        extractor = make_extractor(self.vgg_weights, self.seed)
        vae = self.vae
        if vae is None:
            vae = pretrain_style_vae(
                images, extractor, epochs=config.vae_epochs, beta_kl=config.vae_beta_kl, seed=config.seed,
                size=config.style_size, latent_dim=config.latent_dim, hidden=config.vae_hidden,
            )
        field, psi, path = train_style(
            scene, self.stage1_checkpoint, images, extractor, vae, config, out_dir, self.view_indices,
            self.resume, self.iterations,
        )
        self._set_fitted(field, psi, vae, extractor, config, path)
        return self

    def _set_fitted(self, field, psi, vae, extractor, config, path):
        self.field_ = field
        self.psi_ = psi
        self.vae_ = vae
        self.extractor_ = extractor
        self.checkpoint_ = Path(path)
        self.strategy_ = config.strategy(jitter=False)
        self.style_size_ = config.style_size

    @classmethod
    def from_checkpoint(cls, path, vgg_weights=None):
        field, psi, vae, meta = load_stage2(path)
        config = TrainConfig.from_dict(meta["config"])
        est = cls(Path(path).parent / STAGE1_FILE, config, str(Path(path).parent), vgg_weights)
        est._set_fitted(field, psi, vae, extractor_from_meta(meta, vgg_weights), config, path)
        return est

    def transform(self, style_images, sample_seed=None):
        """``(n_styles, n_appearance_params)`` appearance weights."""
        check_is_fitted(self, "psi_")
        return np.stack([
            appearance_for_style(self.psi_, self.vae_, self.extractor_, im, size=self.style_size_,
                                 sample_seed=sample_seed).numpy()
            for im in style_images
        ])

    def render_view(self, pose, intrinsics, style=None, latent=None, tile_size=4096):
        check_is_fitted(self, "psi_")
        w = appearance_for_style(self.psi_, self.vae_, self.extractor_, style, latent, self.style_size_)
        return render_image(self.field_, pose, intrinsics, self.strategy_, tile_size, w)
