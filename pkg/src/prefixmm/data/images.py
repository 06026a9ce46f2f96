"""Image file I/O and preprocessing. Arrays are float [3, H, W] in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError


class ImageReadError(OSError):
    pass


def read_image(path: str | Path) -> np.ndarray:
    """Decode PPM (P6) or PNG to uint8 [H, W, 3]."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise ImageReadError(f"cannot read image {path}: {exc}") from exc


def write_image(path: str | Path, img: np.ndarray) -> None:
    """Write a [3, H, W] float image; PNG when the suffix says so, binary PPM otherwise."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    hwc = np.round(arr.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    path = Path(path)
    if path.suffix.lower() == ".png":
        Image.fromarray(hwc, "RGB").save(path, format="PNG")
    else:
        h, w, _ = hwc.shape
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            f.write(hwc.tobytes())


def center_crop_resize(raw: np.ndarray, size: int) -> np.ndarray:
    """Center square crop of uint8 [H, W, 3], then resize to ``size``; returns float [3, size, size]."""
    h, w = raw.shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    crop = raw[top:top + side, left:left + side]
    if side != size:
        crop = np.asarray(Image.fromarray(crop).resize((size, size), Image.BICUBIC))
    return np.clip(crop.astype(np.float32).transpose(2, 0, 1) / 255.0, 0.0, 1.0)


def preprocess_image(source, size: int = 32) -> np.ndarray:
    """Load (path or uint8 array) and center-crop/resize to ``size`` x ``size``."""
    raw = source if isinstance(source, np.ndarray) else read_image(source)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise ImageReadError(f"expected an RGB image, got array of shape {raw.shape}")
    return center_crop_resize(raw, size)
