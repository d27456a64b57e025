"""Input validation helpers shared by the estimators and the CLI."""

import numpy as np
import torch

from .errors import DataError, DomainError, ShapeError


def check_image(image, name="image"):
    """HxWx3 float array in [0, 1]."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise DataError(f"{name} contains non-finite values")
    if arr.min() < 0 or arr.max() > 1:
        raise DomainError(f"{name} values must lie in [0, 1]")
    return arr


def check_images(images, name="images"):
    images = [check_image(im, f"{name}[{i}]") for i, im in enumerate(images)]
    if not images:
        raise DataError(f"{name} is empty")
    return images


def check_unit_vectors(d, name="directions", atol=1e-4):
    t = torch.as_tensor(d)
    if t.ndim < 1 or t.shape[-1] != 3:
        raise ShapeError(f"{name} must have a trailing dimension of 3")
    if (t.norm(dim=-1) - 1).abs().max() > atol:
        raise DomainError(f"{name} must be unit length")
    return t


def check_indices(indices, n, name="indices"):
    out = [int(i) for i in indices]
    bad = [i for i in out if not 0 <= i < n]
    if bad:
        raise IndexError(f"{name} out of range for {n} items: {bad}")
    if len(set(out)) != len(out):
        raise DataError(f"{name} contains duplicates")
    return out


def check_latent(z, dim):
    t = torch.as_tensor(np.asarray(z, dtype=np.float32))
    if t.shape[-1] != dim:
        raise ShapeError(f"style latent must have dimension {dim}, got {tuple(t.shape)}")
    if not torch.isfinite(t).all():
        raise DataError("style latent contains non-finite values")
    return t


def check_is_fitted(estimator, attributes):
    from sklearn.utils.validation import check_is_fitted as _sk_check

    _sk_check(estimator, attributes)
