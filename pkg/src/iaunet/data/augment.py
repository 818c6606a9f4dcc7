"""Joint image/mask augmentation: flips, affine jitter, brightness/contrast."""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass
class AugmentationConfig:
    flip_prob: float = 0.5
    rotation_deg: float = 15.0
    scale_min: float = 0.9
    scale_max: float = 1.1
    translate_frac: float = 0.05
    brightness: float = 0.2
    contrast: float = 0.2
    seed: int = 0

    @classmethod
    def identity(cls):
        return cls(flip_prob=0.0, rotation_deg=0.0, scale_min=1.0, scale_max=1.0,
                   translate_frac=0.0, brightness=0.0, contrast=0.0)


def _affine_matrix(angle_deg, scale, shift, h, w):
    """Inverse map (output -> input coords) for rotation/scale about the centre plus shift."""
    t = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]]) / scale
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - rot @ (centre + np.asarray(shift))
    return rot, offset


def augment(image, mask, cfg, rng):
    """Augment ``image[C,H,W]`` (float, [0,1]) and ``mask[H,W]`` (or None) together.

    Geometric ops touch both (mask with nearest-neighbour, so no new labels);
    colour jitter touches only the image. Pixels mapped from outside the
    frame become 0 in the image and background in the mask.
    """
    img = np.asarray(image)
    m = None if mask is None else np.asarray(mask)
    h, w = img.shape[1:]

    if cfg.flip_prob > 0:
        if rng.random() < cfg.flip_prob:
            img = img[:, :, ::-1]
            m = None if m is None else m[:, ::-1]
        if rng.random() < cfg.flip_prob:
            img = img[:, ::-1, :]
            m = None if m is None else m[::-1, :]

    geometric = cfg.rotation_deg > 0 or cfg.scale_min != 1 or cfg.scale_max != 1 \
        or cfg.translate_frac > 0
    if geometric:
        angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
        scale = rng.uniform(cfg.scale_min, cfg.scale_max)
        shift = rng.uniform(-cfg.translate_frac, cfg.translate_frac, size=2) * np.array([h, w])
        mat, off = _affine_matrix(angle, scale, shift, h, w)
        img = np.stack([
            ndimage.affine_transform(c, mat, offset=off, order=1, mode="constant", cval=0.0)
            for c in img.astype(np.float64)]).astype(image.dtype)
        if m is not None:
            m = ndimage.affine_transform(m, mat, offset=off, order=0, mode="constant", cval=0)

    if cfg.brightness > 0 or cfg.contrast > 0:
        b = 1.0 + rng.uniform(-cfg.brightness, cfg.brightness)
        c = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast)
        mean = img.mean()
        img = np.clip((img * b - mean * b) * c + mean * b, 0.0, 1.0).astype(image.dtype)

    img = np.ascontiguousarray(img)
    return img, (None if m is None else np.ascontiguousarray(m))
