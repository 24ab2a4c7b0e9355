"""PNG persistence for rasters and masks.

Rasters are float arrays (H, W, 3) in [0, 1] stored as 8-bit RGB. Masks are
(H, W) {0,1} arrays stored as single-channel 8-bit PNG with 0 -> 0 and
1 -> 255; decoding thresholds at 128 so the mask round trip is bit-exact.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidArgumentError
from .masks import Mask, validate_mask

Raster = np.ndarray  # (H, W, 3) float32 in [0, 1]


def validate_raster(img: np.ndarray) -> Raster:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidArgumentError(f"raster must be (H, W, 3), got {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise InvalidArgumentError("raster values must lie in [0, 1]")
    return img.astype(np.float32, copy=False)


def quantize(img: Raster) -> Raster:
    """Snap to the 8-bit grid so save/load round trips are exact."""
    img = validate_raster(img)
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


def encode_raster(img: Raster) -> bytes:
    img = validate_raster(img)
    data = np.round(img * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(data, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_raster(data: bytes) -> Raster:
    with Image.open(io.BytesIO(data)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_raster(path: str | Path, img: Raster) -> None:
    Path(path).write_bytes(encode_raster(img))


def load_raster(path: str | Path) -> Raster:
    return decode_raster(Path(path).read_bytes())


def encode_mask(m: Mask) -> bytes:
    m = validate_mask(m)
    buf = io.BytesIO()
    Image.fromarray(m * 255, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def decode_mask(data: bytes) -> Mask:
    with Image.open(io.BytesIO(data)) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= 128).astype(np.uint8)


def save_mask(path: str | Path, m: Mask) -> None:
    Path(path).write_bytes(encode_mask(m))


def load_mask(path: str | Path) -> Mask:
    return decode_mask(Path(path).read_bytes())
