from pathlib import Path

import numpy as np
from PIL import Image

from exceptions import DatasetIOError


def write_ppm(path: Path, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as binary P6."""
    try:
        Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), mode="RGB").save(path, format="PPM")
    except OSError as e:
        raise DatasetIOError(path, f"failed to write image ({e})")


def write_pgm(path: Path, mask: np.ndarray) -> None:
    """Write a {0,1} mask as binary P5 with values {0,255}."""
    data = (np.asarray(mask) > 0).astype(np.uint8) * 255
    try:
        Image.fromarray(data, mode="L").save(path, format="PPM")
    except OSError as e:
        raise DatasetIOError(path, f"failed to write mask ({e})")


def read_ppm(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.array(img.convert("RGB"), dtype=np.uint8)
    except (OSError, FileNotFoundError) as e:
        raise DatasetIOError(path, f"failed to read image ({e})")


def read_pgm(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return (np.array(img.convert("L"), dtype=np.uint8) > 127).astype(np.uint8)
    except (OSError, FileNotFoundError) as e:
        raise DatasetIOError(path, f"failed to read mask ({e})")
