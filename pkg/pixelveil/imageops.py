"""Deterministic image transformations: median smoothing, crop, rotation, flip, blending"""

from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .data_io import ImageTensor, LabeledDataset
from .errors import DimensionMismatchError, ValidationError, WindowRangeError

AUGMENTATIONS = ("crop", "rotate", "flip")


def _quantize(values: np.ndarray) -> np.ndarray:
    # values are non-negative here, so floor(x + 0.5) is round-half-away-from-zero
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def median_smooth_batch(images: np.ndarray, window: int) -> np.ndarray:
    """
    Median filter every channel of an (N,H,W,C) batch.

    Borders replicate edge pixels. Even windows place the center cell at
    index ceil(w/2)-1 of the window and take the lower median.
    """
    h, w = images.shape[1:3]
    if not 1 <= window <= min(h, w):
        raise WindowRangeError(f"window must lie in [1, {min(h, w)}], got {window}")
    if window == 1:
        return images.copy()
    origin = -1 if window % 2 == 0 else 0
    return ndimage.rank_filter(
        images,
        rank=(window * window - 1) // 2,
        size=(1, window, window, 1),
        mode="nearest",
        origin=(0, origin, origin, 0),
    )


def median_smooth(image: ImageTensor, window: int) -> ImageTensor:
    return ImageTensor(median_smooth_batch(image.pixels[np.newaxis], window)[0])


def horizontal_flip(image: ImageTensor) -> ImageTensor:
    """Column c maps to W-1-c"""
    return ImageTensor(image.pixels[:, ::-1, :])


def _crop_array(pixels: np.ndarray, pad: int, offset: Tuple[int, int]) -> np.ndarray:
    h, w = pixels.shape[:2]
    padded = np.pad(pixels, ((pad, pad), (pad, pad), (0, 0)), mode="constant")
    row, col = offset
    return padded[row:row + h, col:col + w, :]


def random_crop(image: ImageTensor, pad: int, rng: np.random.Generator,
                offset: Optional[Tuple[int, int]] = None) -> ImageTensor:
    """
    Zero-pad by `pad` on every side, then cut an H×W window.

    The window offset is drawn uniformly from [0, 2*pad]^2 unless `offset`
    forces it.
    """
    if pad < 0:
        raise ValidationError(f"pad must be non-negative, got {pad}")
    if offset is None:
        offset = tuple(int(v) for v in rng.integers(0, 2 * pad + 1, size=2))
    return ImageTensor(_crop_array(image.pixels, pad, offset))


def _rotate_array(pixels: np.ndarray, degrees: float) -> np.ndarray:
    square = pixels.shape[0] == pixels.shape[1]
    if degrees % 180 == 0 or (square and degrees % 90 == 0):
        # grid-aligned turns are exact index maps
        return np.ascontiguousarray(np.rot90(pixels, k=int(degrees // 90) % 4, axes=(0, 1)))
    rotated = ndimage.rotate(
        pixels.astype(np.float64), degrees, axes=(1, 0), reshape=False,
        order=1, mode="grid-constant", cval=0.0,
    )
    return _quantize(rotated)


def rotate(image: ImageTensor, degrees: float) -> ImageTensor:
    """Rotate about the image center, bilinear interpolation, zero fill"""
    if not -180 <= degrees <= 180:
        raise ValidationError(f"degrees must lie in [-180, 180], got {degrees}")
    return ImageTensor(_rotate_array(image.pixels, degrees))


def blend_arrays(a: np.ndarray, b: np.ndarray, weight: float) -> np.ndarray:
    """round(weight*a + (1-weight)*b), broadcasting over leading axes"""
    return _quantize(weight * a.astype(np.float64) + (1.0 - weight) * b.astype(np.float64))


def blend(a: ImageTensor, b: ImageTensor, weight: float) -> ImageTensor:
    if a.shape != b.shape:
        raise DimensionMismatchError(f"cannot blend {a.shape} with {b.shape}")
    if not 0.0 <= weight <= 1.0:
        raise ValidationError(f"weight must lie in [0, 1], got {weight}")
    return ImageTensor(blend_arrays(a.pixels, b.pixels, weight))


def map_images(dataset: LabeledDataset,
               fn: Callable[[ImageTensor], ImageTensor]) -> LabeledDataset:
    """Apply a per-image transform, keeping labels and order"""
    if len(dataset) == 0:
        return dataset
    images = np.stack([fn(ImageTensor(img)).pixels for img in dataset.images])
    return dataset.replace(images=images)


def augment_batch(images: np.ndarray, kinds: Sequence[str], rng: np.random.Generator,
                  pad: int = 2, degrees: float = 5.0) -> np.ndarray:
    """
    Training-time augmentation of an (N,H,W,C) batch.

    crop: random offset per image; rotate: uniform angle in [-degrees, degrees];
    flip: horizontal flip with probability 1/2.
    """
    unknown = set(kinds) - set(AUGMENTATIONS)
    if unknown:
        raise ValidationError(f"unknown augmentation(s): {sorted(unknown)}")
    out = images.copy()
    n = len(out)
    if "crop" in kinds and pad > 0:
        offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
        for i in range(n):
            out[i] = _crop_array(out[i], pad, tuple(offsets[i]))
    if "rotate" in kinds and degrees > 0:
        angles = rng.uniform(-degrees, degrees, size=n)
        for i in range(n):
            out[i] = _rotate_array(out[i], float(angles[i]))
    if "flip" in kinds:
        flips = rng.random(n) < 0.5
        out[flips] = out[flips][:, :, ::-1, :]
    return out
