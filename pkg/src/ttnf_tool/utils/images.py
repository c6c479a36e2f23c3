"""Image I/O: 8-bit binary PPM (P6) and PNG through Pillow."""

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from ttnf_tool.errors import ArtifactIOError

SUPPORTED_SUFFIXES = {".ppm": "PPM", ".png": "PNG"}


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path: Path, image: np.ndarray) -> Path:
    """Write an ``H x W x 3`` image in ``[0, 1]``; the format follows the suffix."""
    path = Path(path)
    fmt = SUPPORTED_SUFFIXES.get(path.suffix.lower())
    if fmt is None:
        raise ArtifactIOError(f"unsupported image format: {path.suffix}")
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        Image.fromarray(to_uint8(image)).save(path, format=fmt)
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc
    return path


def load_image(path: Path) -> np.ndarray:
    """Read an image as ``H x W x 3`` floats in ``[0, 1]``."""
    path = Path(path)
    if not path.exists():
        raise ArtifactIOError(f"image not found: {path}")
    try:
        with Image.open(path) as img:
            data = np.array(img.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError) as exc:
        raise ArtifactIOError(f"corrupt or unreadable image: {path}") from exc
    return data / 255.0
