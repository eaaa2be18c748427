import math
from typing import Tuple

import numpy as np

from models.scene import OrientedBox


def box_corners(box: OrientedBox) -> np.ndarray:
    """The four corners of the box as a (4, 2) array of (x, y)."""
    c, s = math.cos(box.angle), math.sin(box.angle)
    hw, hh = box.width / 2.0, box.height / 2.0
    local = np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([box.center_x, box.center_y])


def half_extents(width: float, height: float, angle: float) -> Tuple[float, float]:
    c, s = abs(math.cos(angle)), abs(math.sin(angle))
    return (width * c + height * s) / 2.0, (width * s + height * c) / 2.0


def axis_aligned_bounds(box: OrientedBox) -> Tuple[float, float, float, float]:
    corners = box_corners(box)
    return (
        float(corners[:, 0].min()),
        float(corners[:, 1].min()),
        float(corners[:, 0].max()),
        float(corners[:, 1].max()),
    )


def pixel_centers(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:height, 0:width]
    return xs + 0.5, ys + 0.5


def to_box_frame(box: OrientedBox, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Canvas coordinates -> box-local (u along width, v along height)."""
    c, s = math.cos(box.angle), math.sin(box.angle)
    dx, dy = x - box.center_x, y - box.center_y
    return c * dx + s * dy, -s * dx + c * dy


def inside_box(box: OrientedBox, x: np.ndarray, y: np.ndarray, dilation: float = 0.0) -> np.ndarray:
    u, v = to_box_frame(box, x, y)
    return (np.abs(u) <= box.width / 2.0 + dilation) & (np.abs(v) <= box.height / 2.0 + dilation)


def box_raster(box: OrientedBox, canvas_size: int, dilation: float = 0.0) -> np.ndarray:
    """Pixels whose centers lie inside the (optionally dilated) box."""
    x, y = pixel_centers(canvas_size, canvas_size)
    return inside_box(box, x, y, dilation).astype(np.uint8)
