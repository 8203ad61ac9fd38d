"""Image container and file IO.

Pixels live in ``[0, 1]`` as float64 ``(H, W, C)`` arrays from ingestion
onward; every boundary that can produce out-of-range values (decoders,
attention merges) clips before constructing an :class:`ImageSample`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

MIN_SIDE = 8


@dataclass
class ImageSample:
    """An image with pixels validated to the [0, 1] contract.

    Attributes
    ----------
    pixels : ndarray
        ``(H, W, C)`` float64 array, finite, within [0, 1], C in {1, 3}.
    source_id : str
        Opaque identifier; dataset-backed samples use the file stem.
    """

    pixels: np.ndarray
    source_id: str = field(default="unnamed")

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"image must be (H, W, C) with C in {{1, 3}}, got {px.shape}")
        if px.shape[0] < MIN_SIDE or px.shape[1] < MIN_SIDE:
            raise ValueError(f"image too small: {px.shape[0]}x{px.shape[1]}, minimum is {MIN_SIDE}x{MIN_SIDE}")
        if not np.all(np.isfinite(px)):
            raise ValueError("image contains non-finite pixels")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values outside [0, 1]")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @classmethod
    def clipped(cls, pixels: np.ndarray, source_id: str = "unnamed") -> "ImageSample":
        """Build a sample from unbounded values, clamping into [0, 1]."""
        return cls(np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0), source_id)


def load_image(path, size: tuple[int, int] | None = None, source_id: str | None = None) -> ImageSample:
    """Read an image file as an RGB (or grayscale) sample in [0, 1].

    ``size`` is ``(H, W)``; resizing is bilinear.
    """
    with Image.open(path) as im:
        if im.height < MIN_SIDE or im.width < MIN_SIDE:
            raise ValueError(f"image too small: {im.height}x{im.width}, "
                             f"minimum is {MIN_SIDE}x{MIN_SIDE}")
        im = im.convert("L") if im.mode in ("L", "1", "I;16") else im.convert("RGB")
        if size is not None:
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float64) / 255.0
    sid = source_id if source_id is not None else _stem(path)
    return ImageSample(arr, sid)


def save_image(sample, path) -> None:
    px = sample.pixels if isinstance(sample, ImageSample) else np.asarray(sample)
    arr = np.clip(np.round(px * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)


def _stem(path) -> str:
    name = str(path).replace("\\", "/").rsplit("/", 1)[-1]
    return name.rsplit(".", 1)[0]
