"""Style information: a frozen VGG-19 feature extractor and the style VAE.

The VAE does not see pixels. It encodes the per-channel mean and standard
deviation of the relu1_1..relu4_1 activations (a 1920-vector for VGG-19),
i.e. exactly the statistics the style loss compares.
"""

import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted
from torch import nn

from .errors import SetupError, ShapeError

VGG_WEIGHTS_ENV = "NERFSTYLE_VGG19_WEIGHTS"
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
TAP_NAMES = ("relu1_1", "relu2_1", "relu3_1", "relu4_1")
VGG19_WIDTHS = (64, 128, 256, 512)

_DOWNLOAD_HELP = (
    "Pretrained VGG-19 weights are required. Download the torchvision checkpoint "
    "https://download.pytorch.org/models/vgg19-dcbb9e9d.pth and point the "
    f"{VGG_WEIGHTS_ENV} environment variable (or the `vgg_weights` config key) at it. "
    "For offline smoke tests only, pass weights='random' to get a seeded, "
    "non-pretrained extractor."
)

# convs per block of VGG-19 up to (and including) conv4_1
_BLOCK_CONVS = (2, 2, 4, 1)


def _vgg_layers(widths, pool):
    """Layer list mirroring ``torchvision.models.vgg19().features[:21]``."""
    layers, taps = [], []
    in_ch = 3
    for block, (n_conv, width) in enumerate(zip(_BLOCK_CONVS, widths)):
        for k in range(n_conv):
            layers.append(nn.Conv2d(in_ch, width, kernel_size=3, padding=1))
            layers.append(nn.ReLU(inplace=False))
            if k == 0:
                taps.append(len(layers) - 1)
            in_ch = width
        if block < 3:
            layers.append(nn.MaxPool2d(2, 2) if pool else nn.Identity())
    return layers, taps


class FeatureExtractor(nn.Module):
    """Frozen VGG-19 trunk tapped at relu1_1, relu2_1, relu3_1 and relu4_1.

    ``weights`` is a path to a torchvision VGG-19 state dict, ``None`` to read
    the path from ``NERFSTYLE_VGG19_WEIGHTS``, or ``"random"`` for a seeded
    non-pretrained extractor (tests and offline demos). ``widths`` and
    ``pool`` exist to build miniature extractors for gradient checks.
    """

    def __init__(self, weights=None, seed=0, widths=VGG19_WIDTHS, pool=True, min_side=32):
        super().__init__()
        layers, self.taps = _vgg_layers(widths, pool)
        self.features = nn.Sequential(*layers)
        self.widths = tuple(widths)
        self.pool = pool
        self.min_side = min_side
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

        if weights is None:
            weights = os.environ.get(VGG_WEIGHTS_ENV)
            if not weights:
                raise SetupError(_DOWNLOAD_HELP)
        if isinstance(weights, str) and weights == "random":
            self.pretrained = False
            self.source = f"random(seed={seed})"
            gen = torch.Generator().manual_seed(seed)
            for m in self.features:
                if isinstance(m, nn.Conv2d):
                    fan_out = m.out_channels * 9
                    with torch.no_grad():
                        m.weight.normal_(0.0, (2.0 / fan_out) ** 0.5, generator=gen)
                        m.bias.zero_()
        else:
            if not os.path.exists(weights):
                raise SetupError(f"VGG-19 weight file {weights!r} not found. " + _DOWNLOAD_HELP)
            state = torch.load(weights, map_location="cpu", weights_only=True)
            state = {k: v for k, v in state.items() if k.startswith("features.")}
            own = self.state_dict()
            missing = [k for k in own if k.startswith("features.") and k not in state]
            if missing:
                raise SetupError(f"{weights}: not a VGG-19 state dict (missing {missing[0]})")
            self.load_state_dict({**own, **state})
            self.pretrained = True
            self.source = str(weights)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode=True):
        # always frozen
        return super().train(False)

    def forward(self, images, upto=len(TAP_NAMES)) -> List[torch.Tensor]:
        """``images`` is ``(N, 3, H, W)`` in [0, 1]; returns the first ``upto`` tap outputs."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected (N, 3, H, W) images, got {tuple(images.shape)}")
        if min(images.shape[-2:]) < self.min_side:
            raise ShapeError(f"images need a min side of {self.min_side}px, got {tuple(images.shape[-2:])}")
        x = (images - self.mean.to(images.dtype)) / self.std.to(images.dtype)
        outs = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.taps:
                outs.append(x)
                if len(outs) == upto:
                    break
        return outs


def to_nchw(image):
    """``(H, W, 3)`` or ``(N, H, W, 3)`` array/tensor to an ``(N, 3, H, W)`` tensor."""
    t = torch.as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image)
    if t.ndim == 3:
        t = t[None]
    return t.permute(0, 3, 1, 2).contiguous()


def extract_features(extractor: FeatureExtractor, image) -> List[torch.Tensor]:
    if not isinstance(image, torch.Tensor) or image.ndim != 4 or image.shape[1] != 3:
        image = to_nchw(image)
    return extractor(image.to(extractor.mean.dtype) if image.dtype != extractor.mean.dtype else image)


@dataclass
class FeatureStats:
    means: List[torch.Tensor]
    stds: List[torch.Tensor]

    def vector(self):
        """``(N, 2 * sum(C_l))``: per layer, channel means then channel stds."""
        parts = []
        for m, s in zip(self.means, self.stds):
            parts.extend([m, s])
        return torch.cat(parts, dim=-1)


def channel_mean_std(feat):
    """Spatial mean and population std per channel of ``(N, C, H, W)`` maps."""
    flat = feat.flatten(2)
    mean = flat.mean(-1)
    var = ((flat - mean[..., None]) ** 2).mean(-1)
    positive = var > 0
    # sqrt has an infinite slope at 0; constant channels get std 0 and zero gradient
    std = torch.where(positive, torch.sqrt(torch.where(positive, var, torch.ones_like(var))), torch.zeros_like(var))
    return mean, std


def feature_stats(features: Sequence[torch.Tensor]) -> FeatureStats:
    means, stds = [], []
    for f in features:
        m, s = channel_mean_std(f)
        means.append(m)
        stds.append(s)
    return FeatureStats(means, stds)


def preprocess_style(image, size=256, rng=None):
    """Resize the shorter side to ``size`` then crop ``size x size``.

    The crop is centred when ``rng`` is None, otherwise uniformly random.
    Returns an ``(H, W, 3)`` float array.
    """
    img = torch.as_tensor(np.asarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    h, w = img.shape[-2:]
    scale = size / min(h, w)
    nh, nw = max(size, round(h * scale)), max(size, round(w * scale))
    if (nh, nw) != (h, w):
        img = F.interpolate(img, size=(nh, nw), mode="bilinear", align_corners=False, antialias=True)
    if rng is None:
        top, left = (nh - size) // 2, (nw - size) // 2
    else:
        top = int(rng.integers(0, nh - size + 1))
        left = int(rng.integers(0, nw - size + 1))
    out = img[0, :, top : top + size, left : left + size].permute(1, 2, 0)
    return out.clamp(0.0, 1.0).numpy()


def kl_divergence(mean, logvar):
    """KL(N(mean, exp(logvar)) || N(0, I)) summed over the latent axis."""
    return 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).sum(-1)


class _VAEModule(nn.Module):
    def __init__(self, in_dim, latent_dim, hidden):
        super().__init__()
        self.encoder = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU()
        )
        self.to_mean = nn.Linear(hidden, latent_dim)
        self.to_logvar = nn.Linear(hidden, latent_dim)
        self.decoder = nn.Sequential(
            nn.Linear(latent_dim, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(), nn.Linear(hidden, in_dim)
        )
        self.register_buffer("center", torch.zeros(in_dim))
        self.register_buffer("scale", torch.ones(in_dim))

    def encode(self, x):
        h = self.encoder((x - self.center) / self.scale)
        return self.to_mean(h), self.to_logvar(h)

    def decode(self, z):
        return self.decoder(z)


def vae_loss(module, x, beta_kl, generator=None):
    """Reconstruction MSE (standardized space) + beta * mean KL, and its parts."""
    mean, logvar = module.encode(x)
    eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    z = mean + torch.exp(0.5 * logvar) * eps
    target = (x - module.center) / module.scale
    recon = F.mse_loss(module.decode(z), target)
    kl = kl_divergence(mean, logvar).mean()
    return recon + beta_kl * kl, recon, kl


class StyleVAE(BaseEstimator, TransformerMixin):
    """Variational autoencoder over style statistics vectors.

    ``fit`` takes an ``(n_samples, n_features)`` matrix of statistics vectors;
    ``transform`` returns posterior means (the style latents).
    """

    def __init__(self, latent_dim=64, hidden=256, beta_kl=0.01, epochs=200, batch_size=64, lr=1e-3, seed=0):
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.beta_kl = beta_kl
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        torch.manual_seed(self.seed)
        module = _VAEModule(X.shape[1], self.latent_dim, self.hidden)
        center = X.mean(0)
        scale = X.std(0)
        scale[scale < 1e-6] = 1.0
        module.center.copy_(torch.as_tensor(center, dtype=torch.float32))
        module.scale.copy_(torch.as_tensor(scale, dtype=torch.float32))
        data = torch.as_tensor(X, dtype=torch.float32)
        opt = torch.optim.Adam(module.parameters(), lr=self.lr)
        gen = torch.Generator().manual_seed(self.seed)
        rng = np.random.default_rng(self.seed)
        self.loss_curve_ = []
        for _ in range(self.epochs):
            order = rng.permutation(len(data))
            total = 0.0
            for start in range(0, len(data), self.batch_size):
                batch = data[order[start : start + self.batch_size]]
                loss, recon, kl = vae_loss(module, batch, self.beta_kl, gen)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(batch)
            self.loss_curve_.append(total / len(data))
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)
        self.module_ = module
        self.n_features_in_ = X.shape[1]
        return self

    def _check(self, X):
        check_is_fitted(self, "module_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return torch.as_tensor(X, dtype=torch.float32)

    def transform(self, X):
        X = self._check(X)
        with torch.no_grad():
            mean, _ = self.module_.encode(X)
        return mean.numpy()

    def posterior(self, X):
        X = self._check(X)
        with torch.no_grad():
            mean, logvar = self.module_.encode(X)
        return mean.numpy(), logvar.numpy()

    def sample(self, X, seed=0):
        mean, logvar = self.posterior(X)
        eps = np.random.default_rng(seed).standard_normal(mean.shape)
        return mean + np.exp(0.5 * logvar) * eps

    def arrays(self, prefix="vae."):
        check_is_fitted(self, "module_")
        return {prefix + k: v.clone() for k, v in self.module_.state_dict().items()}

    @classmethod
    def from_arrays(cls, arrays, params, prefix="vae."):
        vae = cls(**params)
        in_dim = int(np.asarray(arrays[prefix + "center"]).shape[0])
        module = _VAEModule(in_dim, vae.latent_dim, vae.hidden)
        module.load_state_dict({k[len(prefix) :]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith(prefix)})
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)
        vae.module_ = module
        vae.n_features_in_ = in_dim
        vae.loss_curve_ = []
        return vae


@dataclass
class StyleLatent:
    z: np.ndarray
    mean: Optional[np.ndarray] = None
    logvar: Optional[np.ndarray] = None


def style_statistics(extractor, images) -> np.ndarray:
    """Statistics vectors ``(N, 2 * sum(C_l))`` for ``(H, W, 3)`` images of equal size."""
    batch = to_nchw(np.stack([np.asarray(im, dtype=np.float32) for im in images]))
    with torch.no_grad():
        stats = feature_stats(extract_features(extractor, batch))
    return stats.vector().double().numpy()


def encode_style(image, extractor, vae: StyleVAE, size=256, rng=None, sample_seed=None) -> StyleLatent:
    """Style latent of one image: posterior mean, or a reparameterized sample
    when ``sample_seed`` is given."""
    crop = preprocess_style(image, size, rng)
    stats = style_statistics(extractor, [crop])
    mean, logvar = vae.posterior(stats)
    z = mean[0]
    if sample_seed is not None:
        eps = np.random.default_rng(sample_seed).standard_normal(z.shape)
        z = z + np.exp(0.5 * logvar[0]) * eps
    return StyleLatent(z.astype(np.float32), mean[0], logvar[0])


def pretrain_style_vae(images, extractor, epochs=200, beta_kl=0.01, seed=0, crops_per_image=4, size=256, **params):
    """Fit a :class:`StyleVAE` on statistics of random crops of ``images``.

    ``images`` is a sequence of ``(H, W, 3)`` arrays or image paths.
    """
    from .scene_io import load_image

    rng = np.random.default_rng(seed)
    crops = []
    for im in images:
        arr = load_image(im) if isinstance(im, (str, os.PathLike)) else np.asarray(im)
        crops.append(preprocess_style(arr, size, None))
        for _ in range(crops_per_image - 1):
            crops.append(preprocess_style(arr, size, rng))
    stats = np.concatenate([style_statistics(extractor, crops[i : i + 8]) for i in range(0, len(crops), 8)])
    return StyleVAE(beta_kl=beta_kl, epochs=epochs, seed=seed, **params).fit(stats)
