"""Minimal RGB8 raster support.

A raster is a numpy uint8 array of shape (height, width, 3). The only codec
is PNG (lossless), kept here at the edge; all other code works on arrays.
Crop resampling is nearest-neighbour over a uniform sample grid inside the
continuous box, which stretches the region to the target size directly.
"""

from __future__ import annotations

import numpy as np

from .geometry import BoundingBox, ImageSize, clip


class RasterError(ValueError):
    """Raised for malformed pixel buffers or unusable crop regions."""


def new_raster(size: ImageSize, fill: tuple[int, int, int] = (0, 0, 0)) -> np.ndarray:
    out = np.empty((size.height, size.width, 3), dtype=np.uint8)
    out[:, :] = fill
    return out


def check_raster(pixels: np.ndarray) -> np.ndarray:
    if not isinstance(pixels, np.ndarray) or pixels.ndim != 3 or pixels.shape[2] != 3:
        raise RasterError(f"expected an (h, w, 3) array, got {getattr(pixels, 'shape', None)}")
    if pixels.dtype != np.uint8:
        raise RasterError(f"expected uint8 pixels, got {pixels.dtype}")
    return pixels


def raster_size(pixels: np.ndarray) -> ImageSize:
    check_raster(pixels)
    return ImageSize(width=pixels.shape[1], height=pixels.shape[0])


def sample_indices(lo: float, hi: float, count: int, limit: int) -> np.ndarray:
    """Nearest-neighbour source indices for `count` samples spread over [lo, hi)."""
    centers = lo + (np.arange(count, dtype=np.float64) + 0.5) * ((hi - lo) / count)
    idx = np.floor(centers).astype(np.intp)
    return np.clip(idx, 0, limit - 1)


def crop_resample(pixels: np.ndarray, box: BoundingBox, out_size: ImageSize) -> np.ndarray:
    """Cut the box out of the raster and stretch it to `out_size`.

    The box is clipped to the image first; a box entirely outside raises.
    """
    check_raster(pixels)
    size = raster_size(pixels)
    clipped = clip(box, size)
    if clipped is None:
        raise RasterError(f"crop region {box.as_tuple()} lies outside the {size.width}x{size.height} image")
    xs = sample_indices(clipped.x_min, clipped.x_max, out_size.width, size.width)
    ys = sample_indices(clipped.y_min, clipped.y_max, out_size.height, size.height)
    return np.ascontiguousarray(pixels[np.ix_(ys, xs)])


def paint_box(pixels: np.ndarray, box: BoundingBox, color: tuple[int, int, int]) -> None:
    """Fill the integer pixel rectangle covered by the box (demo/fixture helper)."""
    check_raster(pixels)
    size = raster_size(pixels)
    clipped = clip(box, size)
    if clipped is None:
        return
    x0, y0 = int(np.floor(clipped.x_min)), int(np.floor(clipped.y_min))
    x1, y1 = int(np.ceil(clipped.x_max)), int(np.ceil(clipped.y_max))
    pixels[y0:y1, x0:x1] = color


def load_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def save_png(pixels: np.ndarray, path) -> None:
    from PIL import Image

    check_raster(pixels)
    Image.fromarray(pixels, mode="RGB").save(path, format="PNG")
