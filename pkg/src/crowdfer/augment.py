"""Random affine augmentation for square grayscale images.

Each output pixel is pulled back through the inverse transform and sampled
bilinearly; samples that fall outside the source read as 0.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class AffineParams:
    max_rotation: float = 15.0  # degrees
    max_scale_delta: float = 0.10  # fraction
    max_translate: float = 0.0  # pixels
    flip_horizontal: bool = True

    def __post_init__(self):
        for name in ("max_rotation", "max_scale_delta", "max_translate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def defaults(cls, image_size: int) -> "AffineParams":
        """Rotation 15 deg, scale 10%, translation 10% of the width, random flips."""
        return cls(15.0, 0.10, 0.10 * image_size, True)

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls(0.0, 0.0, 0.0, False)

    @property
    def is_identity(self) -> bool:
        return not (self.max_rotation or self.max_scale_delta or self.max_translate or self.flip_horizontal)

    def as_dict(self):
        return asdict(self)


def affine_matrix(angle_deg: float, scale: float, tx: float, ty: float, flip: bool, size: int) -> np.ndarray:
    """Forward 3x3 map from source (x, y) to destination, about the image centre."""
    c = (size - 1) / 2.0
    a = math.radians(angle_deg)
    cos, sin = math.cos(a) * scale, math.sin(a) * scale
    f = -1.0 if flip else 1.0
    # flip, then rotate+scale about the centre, then translate
    return np.array([
        [cos * f, -sin, c - cos * f * c + sin * c + tx],
        [sin * f, cos, c - sin * f * c - cos * c + ty],
        [0.0, 0.0, 1.0],
    ])


def warp_bilinear(image: np.ndarray, forward: np.ndarray) -> np.ndarray:
    h, w = image.shape
    inv = np.linalg.inv(forward)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    sy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    return sample_bilinear(image, sx, sy)


def sample_bilinear(image: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Bilinear lookup with zero fill outside the image."""
    h, w = image.shape
    padded = np.zeros((h + 2, w + 2), dtype=np.float64)
    padded[1:-1, 1:-1] = image
    # clip so far-away samples land in the zero border
    sx = np.clip(sx, -1.0, w) + 1.0
    sy = np.clip(sy, -1.0, h) + 1.0
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    x1 = np.minimum(x0 + 1, w + 1)
    y1 = np.minimum(y0 + 1, h + 1)
    top = padded[y0, x0] * (1 - fx) + padded[y0, x1] * fx
    bot = padded[y1, x0] * (1 - fx) + padded[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def sample_transform(params: AffineParams, rng: np.random.Generator):
    """Draw (angle, scale, tx, ty, flip). Always consumes five uniforms."""
    u = rng.random(5)
    angle = (2 * u[0] - 1) * params.max_rotation
    scale = 1.0 + (2 * u[1] - 1) * params.max_scale_delta
    tx = (2 * u[2] - 1) * params.max_translate
    ty = (2 * u[3] - 1) * params.max_translate
    flip = bool(params.flip_horizontal and u[4] < 0.5)
    return angle, scale, tx, ty, flip


def random_affine(image: np.ndarray, params: AffineParams, rng: np.random.Generator) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError(f"expected a square grayscale image, got shape {image.shape}")
    angle, scale, tx, ty, flip = sample_transform(params, rng)
    if angle == 0.0 and scale == 1.0 and tx == 0.0 and ty == 0.0 and not flip:
        return image.copy()
    out = warp_bilinear(image.astype(np.float64), affine_matrix(angle, scale, tx, ty, flip, image.shape[0]))
    return out.astype(image.dtype, copy=False)


def augment_batch(images: np.ndarray, params: Optional[AffineParams], rng: np.random.Generator) -> np.ndarray:
    """Apply an independent random transform to each (H, W) or (1, H, W) image."""
    if params is None or params.is_identity:
        return images
    squeeze = images.ndim == 4
    flat = images[:, 0] if squeeze else images
    out = np.stack([random_affine(img, params, rng) for img in flat])
    return out[:, None] if squeeze else out
