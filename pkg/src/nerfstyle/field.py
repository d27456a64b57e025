"""Two-branch radiance field with an inverted-sphere background copy.

Each volume (``fg`` inside the unit sphere, ``bg`` outside it) has three MLPs:
``base`` shared trunk over the encoded position, ``geo`` producing density and
``app`` producing view-dependent colour. ``base`` and ``geo`` form the geometry
group; ``app`` of both volumes forms the appearance group, which can be
replaced wholesale by an externally supplied flat weight vector.
"""

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DomainError, NumericError, ShapeError

VOLUMES = ("fg", "bg")


@dataclass(frozen=True)
class PositionalEncoding:
    num_frequencies: int
    include_input: bool = True

    def __post_init__(self):
        if self.num_frequencies < 0:
            raise ValueError("num_frequencies must be >= 0")

    def output_dim(self, input_dim):
        return input_dim * (2 * self.num_frequencies + (1 if self.include_input else 0))

    def __call__(self, p):
        return encode(p, self)


def encode(p, enc: PositionalEncoding):
    """``[p, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(L-1) pi p), cos(2^(L-1) pi p)]``."""
    p = torch.as_tensor(p)
    out = [p] if enc.include_input else []
    for k in range(enc.num_frequencies):
        freq = (2.0**k) * math.pi
        out.append(torch.sin(freq * p))
        out.append(torch.cos(freq * p))
    if not out:
        return p[..., :0]
    return torch.cat(out, dim=-1)


def invert_sphere(x):
    """Map points with ``|x| > 1`` to ``(x/r, y/r, z/r, 1/r)``."""
    x = torch.as_tensor(x)
    r = torch.linalg.norm(x, dim=-1, keepdim=True)
    if bool((r <= 1.0).any()):
        raise DomainError("invert_sphere needs |x| > 1; the point lies in the foreground volume")
    return torch.cat([x / r, 1.0 / r], dim=-1)


def uninvert_sphere(q):
    q = torch.as_tensor(q)
    return q[..., :3] / q[..., 3:4]


@dataclass(frozen=True)
class MlpSpec:
    """Layer input/output widths, per-layer activations and skip layers.

    A layer index listed in ``skips`` receives the network input concatenated
    to the previous layer's output.
    """

    in_dim: int
    widths: Tuple[int, ...]
    activations: Tuple[str, ...]
    skips: Tuple[int, ...] = ()
    extra_inputs: Dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.widths or any(w <= 0 for w in self.widths):
            raise ValueError("an MLP needs at least one layer with positive width")
        if len(self.activations) != len(self.widths):
            raise ValueError("one activation per layer")

    def layer_shapes(self):
        shapes = []
        prev = self.in_dim
        for i, w in enumerate(self.widths):
            fan_in = prev + (self.in_dim if i in self.skips and i > 0 else 0) + self.extra_inputs.get(i, 0)
            shapes.append((fan_in, w))
            prev = w
        return shapes

    def num_parameters(self):
        return sum(i * o + o for i, o in self.layer_shapes())


@dataclass(frozen=True)
class FieldSpec:
    """Architecture of one radiance field (both volumes share it)."""

    pos_freqs: int = 10
    dir_freqs: int = 4
    base_width: int = 256
    base_depth: int = 8
    skips: Tuple[int, ...] = (4,)
    app_hidden: int = 128
    density_activation: str = "softplus"

    def __post_init__(self):
        object.__setattr__(self, "skips", tuple(self.skips))
        if self.density_activation not in ("softplus", "relu"):
            raise ValueError(f"unknown density activation {self.density_activation!r}")

    @property
    def pos_encoding(self):
        return PositionalEncoding(self.pos_freqs, True)

    @property
    def dir_encoding(self):
        return PositionalEncoding(self.dir_freqs, True)

    def input_dim(self, volume):
        return self.pos_encoding.output_dim(3 if volume == "fg" else 4)

    def base_spec(self, volume):
        return MlpSpec(
            self.input_dim(volume),
            (self.base_width,) * self.base_depth,
            ("relu",) * self.base_depth,
            self.skips,
        )

    def geo_spec(self):
        return MlpSpec(self.base_width, (1,), (self.density_activation,))

    def app_spec(self):
        return MlpSpec(
            self.base_width,
            (self.app_hidden, 3),
            ("relu", "sigmoid"),
            extra_inputs={0: self.dir_encoding.output_dim(3)},
        )

    def to_dict(self):
        d = asdict(self)
        d["skips"] = list(self.skips)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["skips"] = tuple(d.get("skips", ()))
        return cls(**d)


_ACTIVATIONS = {
    "relu": F.relu,
    "softplus": F.softplus,
    "sigmoid": torch.sigmoid,
    "none": lambda x: x,
}


def _linear_stack(spec: MlpSpec):
    return nn.ModuleDict({f"l{i}": nn.Linear(i_, o_) for i, (i_, o_) in enumerate(spec.layer_shapes())})


class VolumeField(nn.Module):
    """``base``/``geo``/``app`` MLPs for one volume."""

    def __init__(self, spec: FieldSpec, volume: str):
        super().__init__()
        self.spec = spec
        self.volume = volume
        self.base_spec = spec.base_spec(volume)
        self.app_spec = spec.app_spec()
        self.base = _linear_stack(self.base_spec)
        self.geo = _linear_stack(spec.geo_spec())
        self.app = _linear_stack(self.app_spec)

    def embed_position(self, x):
        if self.volume == "bg" and x.shape[-1] == 3:
            x = invert_sphere(x)
        return encode(x, self.spec.pos_encoding)

    def features(self, x):
        """F_base over the encoded position."""
        x_enc = self.embed_position(x)
        h = x_enc
        for i in range(len(self.base_spec.widths)):
            if i in self.base_spec.skips and i > 0:
                h = torch.cat([h, x_enc], dim=-1)
            h = F.relu(self.base[f"l{i}"](h))
        return h

    def density_from_features(self, h):
        out = self.geo["l0"](h)[..., 0]
        return _ACTIVATIONS[self.spec.density_activation](out)

    def color_from_features(self, h, d, app_weights=None):
        """F_app; ``app_weights`` optionally overrides it with ``[(W, b), ...]``."""
        d_enc = encode(d, self.spec.dir_encoding)
        z = torch.cat([h, d_enc], dim=-1)
        n = len(self.app_spec.widths)
        for i in range(n):
            if app_weights is None:
                layer = self.app[f"l{i}"]
                W, b = layer.weight, layer.bias
            else:
                W, b = app_weights[i]
            z = F.linear(z, W, b)
            z = _ACTIVATIONS[self.app_spec.activations[i]](z)
        return z

    def forward(self, x, d, app_weights=None):
        h = self.features(x)
        return self.density_from_features(h), self.color_from_features(h, d, app_weights)


class RadianceField(nn.Module):
    """Foreground and background :class:`VolumeField` pair."""

    def __init__(self, spec: Optional[FieldSpec] = None):
        super().__init__()
        self.spec = spec or FieldSpec()
        self.fg = VolumeField(self.spec, "fg")
        self.bg = VolumeField(self.spec, "bg")

    def volume(self, name):
        if name not in VOLUMES:
            raise ValueError(f"volume must be 'fg' or 'bg', got {name!r}")
        return getattr(self, name)

    def appearance_names(self):
        return [n for n, _ in self.named_parameters() if ".app." in n]

    def geometry_names(self):
        return [n for n, _ in self.named_parameters() if ".app." not in n]

    def appearance_parameters(self):
        return [p for n, p in self.named_parameters() if ".app." in n]

    def geometry_parameters(self):
        return [p for n, p in self.named_parameters() if ".app." not in n]

    @property
    def appearance_size(self):
        return sum(p.numel() for p in self.appearance_parameters())

    def appearance_shapes(self):
        """``[(volume, layer_index, weight_shape, bias_shape), ...]`` in flattening order."""
        out = []
        for vol in VOLUMES:
            for i, (fan_in, fan_out) in enumerate(self.spec.app_spec().layer_shapes()):
                out.append((vol, i, (fan_out, fan_in), (fan_out,)))
        return out

    def flat_appearance(self):
        return torch.cat([p.detach().reshape(-1) for p in self.appearance_parameters()])

    def unflatten_appearance(self, w_app) -> Dict[str, List[Tuple[torch.Tensor, torch.Tensor]]]:
        """Split a flat appearance vector into per-volume ``[(W, b), ...]`` views."""
        if w_app.ndim != 1 or w_app.shape[0] != self.appearance_size:
            raise ShapeError(
                f"appearance vector has shape {tuple(w_app.shape)}, expected ({self.appearance_size},)"
            )
        out = {v: [] for v in VOLUMES}
        offset = 0
        for vol, _, wshape, bshape in self.appearance_shapes():
            nw = wshape[0] * wshape[1]
            W = w_app[offset : offset + nw].reshape(wshape)
            offset += nw
            b = w_app[offset : offset + bshape[0]]
            offset += bshape[0]
            out[vol].append((W, b))
        return out

    def set_appearance(self, w_app):
        """Copy of this field with the appearance group replaced by ``w_app``."""
        w_app = torch.as_tensor(w_app)
        views = self.unflatten_appearance(w_app)
        new = copy.deepcopy(self)
        with torch.no_grad():
            for vol in VOLUMES:
                vf = new.volume(vol)
                for i, (W, b) in enumerate(views[vol]):
                    vf.app[f"l{i}"].weight.copy_(W)
                    vf.app[f"l{i}"].bias.copy_(b)
        return new

    def check_finite(self):
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise NumericError(f"parameter {name} contains non-finite values")


def query_density(params: RadianceField, x, volume="fg"):
    params.check_finite()
    vf = params.volume(volume)
    return vf.density_from_features(vf.features(torch.as_tensor(x)))


def query_color(params: RadianceField, x, d, volume="fg", app_weights=None):
    params.check_finite()
    d = torch.as_tensor(d)
    norms = torch.linalg.norm(d, dim=-1)
    if bool(((norms - 1.0).abs() > 1e-6).any()):
        raise DomainError("view directions must be unit length")
    vf = params.volume(volume)
    return vf.color_from_features(vf.features(torch.as_tensor(x)), d, app_weights)


def set_appearance(params: RadianceField, w_app):
    return params.set_appearance(w_app)
