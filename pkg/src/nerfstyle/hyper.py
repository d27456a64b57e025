"""Hypernetwork mapping a style latent to the field's appearance weights.

The prediction is residual: ``W_app = W_app_ref + delta(z)`` where
``W_app_ref`` is the appearance captured after geometric training and the
per-layer output heads start at zero, so an untrained hypernetwork
reproduces the photo-real field exactly.
"""

from typing import Sequence

import torch
from torch import nn

from .errors import ShapeError
from .field import FieldSpec, RadianceField


def count_appearance_params(spec) -> int:
    """Flattened appearance-group length for a :class:`FieldSpec` (both volumes)."""
    if isinstance(spec, RadianceField):
        return spec.appearance_size
    return 2 * spec.app_spec().num_parameters()


def appearance_layout(spec: FieldSpec):
    """Size of each target layer (weight + bias) in flattening order."""
    sizes = []
    for _vol in ("fg", "bg"):
        for fan_in, fan_out in spec.app_spec().layer_shapes():
            sizes.append(fan_in * fan_out + fan_out)
    return sizes


class HyperNetwork(nn.Module):
    def __init__(self, reference_weights, layer_sizes: Sequence[int], latent_dim=64, hidden=(256, 256)):
        super().__init__()
        reference_weights = torch.as_tensor(reference_weights).detach().clone()
        if reference_weights.ndim != 1 or reference_weights.numel() != sum(layer_sizes):
            raise ShapeError(
                f"reference weights of length {reference_weights.numel()} do not match layout total {sum(layer_sizes)}"
            )
        self.latent_dim = latent_dim
        self.hidden = tuple(hidden)
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        trunk = []
        prev = latent_dim
        for width in self.hidden:
            trunk += [nn.Linear(prev, width), nn.ReLU()]
            prev = width
        self.trunk = nn.Sequential(*trunk)
        self.heads = nn.ModuleList(nn.Linear(prev, size) for size in self.layer_sizes)
        for head in self.heads:
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
        self.register_buffer("reference", reference_weights)

    @classmethod
    def for_field(cls, field: RadianceField, latent_dim=64, hidden=(256, 256)):
        return cls(field.flat_appearance(), appearance_layout(field.spec), latent_dim, hidden)

    @property
    def output_size(self):
        return sum(self.layer_sizes)

    def delta(self, z):
        h = self.trunk(z)
        return torch.cat([head(h) for head in self.heads], dim=-1)

    def forward(self, z):
        z = torch.as_tensor(z, dtype=self.reference.dtype)
        if z.shape[-1] != self.latent_dim:
            raise ShapeError(f"style latent has dimension {z.shape[-1]}, expected {self.latent_dim}")
        return self.reference + self.delta(z)


def predict_weights(psi: HyperNetwork, z):
    return psi(z)
