"""Ray batches shared by scene ingestion and the renderer."""

from dataclasses import dataclass, field
from typing import Optional

import torch


def intersect_unit_sphere(origins, directions):
    """Forward intersection interval of rays with the unit sphere.

    Solves ``|o + t d|^2 = 1`` for unit ``d``. Returns ``(t_near, t_far, hit)``
    with ``t_near`` clamped to zero for origins inside the sphere. Rays with no
    forward intersection have ``hit`` False and a degenerate interval placed at
    the point of closest approach, so downstream sampling stays finite.
    """
    origins = torch.as_tensor(origins)
    directions = torch.as_tensor(directions, dtype=origins.dtype)
    b = (origins * directions).sum(-1)
    c = (origins * origins).sum(-1) - 1.0
    disc = b * b - c
    hit = disc > 0
    root = torch.sqrt(torch.clamp(disc, min=0.0))
    t0 = -b - root
    t1 = -b + root
    hit = hit & (t1 > 0)
    closest = torch.clamp(-b, min=0.0)
    t_near = torch.where(hit, torch.clamp(t0, min=0.0), closest)
    t_far = torch.where(hit, t1, closest)
    return t_near, t_far, hit


@dataclass
class RayBatch:
    """A batch of camera rays.

    ``origins`` and ``directions`` are ``(M, 3)``; directions are unit length.
    ``pixels`` holds the ``(row, col)`` each ray was generated from, when known.
    """

    origins: torch.Tensor
    directions: torch.Tensor
    pixels: Optional[torch.Tensor] = None
    image_index: Optional[int] = None
    t_near: torch.Tensor = field(init=False)
    t_far: torch.Tensor = field(init=False)
    hits_foreground: torch.Tensor = field(init=False)

    def __post_init__(self):
        self.origins = torch.as_tensor(self.origins)
        self.directions = torch.as_tensor(self.directions, dtype=self.origins.dtype)
        if self.origins.shape != self.directions.shape or self.origins.shape[-1] != 3:
            raise ValueError(
                f"origins and directions must both be (M, 3), got {tuple(self.origins.shape)} "
                f"and {tuple(self.directions.shape)}"
            )
        self.t_near, self.t_far, self.hits_foreground = intersect_unit_sphere(
            self.origins, self.directions
        )

    def __len__(self):
        return self.origins.shape[0]

    def to(self, dtype):
        out = RayBatch(self.origins.to(dtype), self.directions.to(dtype), self.pixels, self.image_index)
        return out

    def __getitem__(self, idx):
        pixels = None if self.pixels is None else self.pixels[idx]
        return RayBatch(self.origins[idx], self.directions[idx], pixels, self.image_index)

    @staticmethod
    def concatenate(batches):
        pixels = None
        if all(b.pixels is not None for b in batches):
            pixels = torch.cat([b.pixels for b in batches])
        return RayBatch(
            torch.cat([b.origins for b in batches]),
            torch.cat([b.directions for b in batches]),
            pixels,
        )
