"""Image loading, train-time augmentation and eval-time resize/center-crop.

Images enter as 8-bit grayscale ``[H, W]`` arrays and leave as float32
``[C, S, S]`` arrays with intensities in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from cxrnet.errors import StateError

ROTATION_DEG = 7.0
AREA_RANGE = (0.08, 1.0)
ASPECT_RANGE = (3 / 4, 4 / 3)
CROP_ATTEMPTS = 10
EVAL_RESIZE = {224: 256, 448: 480}


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


def save_png(array: np.ndarray, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path, format="PNG")


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    img = np.asarray(image, dtype=np.float32)
    if img.shape == (height, width):
        return img.copy()
    return np.asarray(Image.fromarray(img).resize((width, height), Image.BILINEAR), dtype=np.float32)


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape
    if size > h or size > w:
        raise ValueError(f"crop {size} larger than image {h}x{w}")
    top, left = (h - size) // 2, (w - size) // 2
    return image[top: top + size, left: left + size]


def _finish(img: np.ndarray, channels: int) -> np.ndarray:
    out = np.clip(img / 255.0, 0.0, 1.0).astype(np.float32)[None]
    return np.repeat(out, channels, axis=0) if channels > 1 else out


def eval_resize_for(size: int) -> int:
    return EVAL_RESIZE.get(size, int(round(size * 256 / 224)))


def preprocess_eval(image: np.ndarray, size: int, channels: int = 1) -> np.ndarray:
    """Resize to 256x256 (S=224) or 480x480 (S=448), then take the central SxS."""
    r = eval_resize_for(size)
    return _finish(center_crop(resize_bilinear(image, r, r), size), channels)


@dataclass(frozen=True)
class AugmentParams:
    angle: float
    top: int
    left: int
    height: int
    width: int
    flip: bool


def sample_crop(rng: np.random.Generator, h: int, w: int) -> tuple[int, int, int, int]:
    """Random crop covering 8-100% of the area with aspect ratio uniform in [3/4, 4/3].

    After ``CROP_ATTEMPTS`` misses, falls back to the largest central crop
    whose aspect ratio is in range.
    """
    area = h * w
    for _ in range(CROP_ATTEMPTS):
        target = rng.uniform(*AREA_RANGE) * area
        aspect = rng.uniform(*ASPECT_RANGE)
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    ratio = w / h
    if ratio < ASPECT_RANGE[0]:
        cw, ch = w, int(round(w / ASPECT_RANGE[0]))
    elif ratio > ASPECT_RANGE[1]:
        ch, cw = h, int(round(h * ASPECT_RANGE[1]))
    else:
        ch, cw = h, w
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def sample_augment(rng: np.random.Generator, h: int, w: int) -> AugmentParams:
    angle = float(rng.uniform(-ROTATION_DEG, ROTATION_DEG))
    top, left, ch, cw = sample_crop(rng, h, w)
    flip = bool(rng.random() < 0.5)
    return AugmentParams(angle, top, left, ch, cw, flip)


def apply_augment(image: np.ndarray, params: AugmentParams, size: int, channels: int = 1) -> np.ndarray:
    """rotate -> crop -> flip -> bilinear resize -> scale to [0, 1]."""
    img = np.asarray(image, dtype=np.float32)
    if params.angle:
        # edge replication keeps a constant image constant under rotation
        img = ndimage.rotate(img, params.angle, reshape=False, order=1, mode="nearest")
    img = img[params.top: params.top + params.height, params.left: params.left + params.width]
    if params.flip:
        img = img[:, ::-1]
    img = resize_bilinear(np.ascontiguousarray(img), size, size)
    return _finish(img, channels)


def augment_train(image: np.ndarray, rng: np.random.Generator, size: int, channels: int = 1) -> np.ndarray:
    h, w = np.shape(image)
    return apply_augment(image, sample_augment(rng, h, w), size, channels)


def jitter(image: np.ndarray, rng: np.random.Generator, max_shift: int = 8) -> np.ndarray:
    """Cyclic shift of a ``[C, H, W]`` array by up to ``max_shift`` pixels per axis, then a
    horizontal flip with probability 0.5.

    Meant for tiny memorization runs, where a random crop would often cut a
    planted motif out of the picture.
    """
    dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
    out = np.roll(image, (int(dy), int(dx)), axis=(-2, -1))
    return out[..., ::-1] if rng.random() < 0.5 else out


class AgeScaler:
    """Affine map of the training-age range onto [0, 1], clamping outside it."""

    def __init__(self, min_age: float | None = None, max_age: float | None = None):
        self.min_age = min_age
        self.max_age = max_age
        if min_age is not None and max_age is not None and not min_age < max_age:
            raise ValueError(f"min_age {min_age} must be below max_age {max_age}")

    @classmethod
    def fit(cls, ages) -> "AgeScaler":
        ages = np.asarray(ages, dtype=np.float64)
        if ages.size == 0:
            raise ValueError("cannot fit an age scaler on no ages")
        return cls(float(ages.min()), float(ages.max()))

    @property
    def fitted(self) -> bool:
        return self.min_age is not None and self.max_age is not None

    def __call__(self, age):
        if not self.fitted:
            raise StateError("AgeScaler used before fit")
        scaled = (np.asarray(age, dtype=np.float64) - self.min_age) / (self.max_age - self.min_age)
        out = np.clip(scaled, 0.0, 1.0)
        return float(out) if np.ndim(out) == 0 else out

    def to_dict(self) -> dict:
        return {"min_age": self.min_age, "max_age": self.max_age}


def scale_age(age, scaler: AgeScaler):
    return scaler(age)
