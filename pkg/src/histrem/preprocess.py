"""Image preprocessing: denoise -> per-channel color normalization -> resize,
plus exact dihedral (D4) augmentation applied at train time only.

All operations are pure functions of (input, seed). Color inconsistency is
handled by per-image channel standardization; angular variance by the eight
exact D4 transforms, which are label-preserving by construction; noise by a
3x3 median filter.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import median_filter

from .seeding import rng_for

logger = logging.getLogger(__name__)

#: Input sizes supported by the standard ablation; other values are allowed
#: but must be set explicitly.
STANDARD_SIZES = (224, 299, 512)

CLAMP_SIGMA = 4.0


@dataclass(frozen=True)
class PreprocessConfig:
    target_size: int = 224
    color_normalize: bool = True
    augment: bool = True
    denoise: bool = True
    seed: int = 0


def normalize_color(img: np.ndarray) -> np.ndarray:
    """Standardize each channel to zero mean, unit variance, clamp to +-4 sigma.

    A zero-variance channel comes back as all zeros and is flagged in the log
    rather than raised: a degenerate image is still a usable training sample.
    """
    x = np.asarray(img, dtype=np.float64)
    out = np.empty_like(x)
    for c in range(x.shape[2]):
        chan = x[:, :, c]
        std = chan.std()
        if std == 0.0:
            logger.warning("degenerate image: channel %d has zero variance", c)
            out[:, :, c] = 0.0
        else:
            out[:, :, c] = (chan - chan.mean()) / std
    np.clip(out, -CLAMP_SIGMA, CLAMP_SIGMA, out=out)
    return out.astype(np.float32)


def denoise(img: np.ndarray) -> np.ndarray:
    """3x3 median filter per channel (replicated edges)."""
    x = np.asarray(img, dtype=np.float32)
    return median_filter(x, size=(3, 3, 1), mode="nearest")


def resize(img: np.ndarray, target_size: int) -> np.ndarray:
    """Bilinear resize to a square, pixel-center aligned, edge-clamped.

    Output values are convex combinations of input values, so they never
    leave the input's [min, max] range. Resizing to the same size is exact.
    """
    x = np.asarray(img, dtype=np.float32)
    h, w = x.shape[:2]
    if h < 2 or w < 2:
        raise ValueError(f"input too small to resize: {x.shape}")
    if h == target_size and w == target_size:
        return x.copy()

    def axis_weights(n_src: int, n_dst: int):
        src = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
        i0 = np.floor(src).astype(np.int64)
        frac = src - i0
        i1 = np.clip(i0 + 1, 0, n_src - 1)
        i0 = np.clip(i0, 0, n_src - 1)
        return i0, i1, frac.astype(np.float32)

    y0, y1, fy = axis_weights(h, target_size)
    x0, x1, fx = axis_weights(w, target_size)
    top = x[y0][:, x0] * (1 - fx)[None, :, None] + x[y0][:, x1] * fx[None, :, None]
    bot = x[y1][:, x0] * (1 - fx)[None, :, None] + x[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


def apply_dihedral(img: np.ndarray, k: int, flip: bool) -> np.ndarray:
    """Element (k, flip) of D4: optional horizontal flip, then k quarter turns."""
    out = np.asarray(img)
    if flip:
        out = np.flip(out, axis=1)
    if k % 4:
        out = np.rot90(out, k=k % 4, axes=(0, 1))
    return np.ascontiguousarray(out)


def augment(img: np.ndarray, seed: int) -> np.ndarray:
    """Apply a uniformly sampled D4 element. Requires a square image."""
    if img.shape[0] != img.shape[1]:
        raise ValueError(f"augment requires a square image, got {img.shape}")
    element = int(rng_for(seed, "dihedral").integers(8))
    return apply_dihedral(img, k=element % 4, flip=element >= 4)


def preprocess_image(
    img: np.ndarray,
    cfg: PreprocessConfig,
    train: bool = False,
    seed: int = 0,
) -> np.ndarray:
    """Fixed composition: denoise -> normalize_color -> resize -> augment.

    Augmentation runs only when train=True; evaluation inputs are never
    augmented regardless of cfg.augment.
    """
    x = np.asarray(img, dtype=np.float32)
    if cfg.denoise:
        x = denoise(x)
    if cfg.color_normalize:
        x = normalize_color(x)
    x = resize(x, cfg.target_size)
    if train and cfg.augment:
        x = augment(x, seed)
    return x
