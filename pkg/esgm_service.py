"""
Enhanced Shape Generation Module: crop instance masks by box, rotate and
reposition them on a blank canvas, and keep a per-category mask pool for
sampling-time shape conditions.
"""
import logging
import math
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from exceptions import (
    ContractError,
    CorruptDatasetError,
    DatasetIOError,
    DegenerateInstanceError,
    EmptyCategoryError,
    InvariantError,
    PoolMissError,
)
from models.scene import DatasetManifest, Layout, OrientedBox
from models.shapes import InstancePatchMask, MaskPool, SceneSample, ShapeMask
from scene_service import box_mask, read_dataset
from util.geometry import axis_aligned_bounds, inside_box, pixel_centers, to_box_frame
from util.json_log import read_json, write_json
from util.pnm import read_pgm, write_pgm

logger = logging.getLogger(__name__)


def _crop_window(box: OrientedBox, canvas_size: int) -> Tuple[int, int, int, int]:
    x0, y0, x1, y1 = axis_aligned_bounds(box)
    return (
        max(0, math.floor(x0)),
        max(0, math.floor(y0)),
        min(canvas_size, math.ceil(x1)),
        min(canvas_size, math.ceil(y1)),
    )


def extract_instance_mask(sample: SceneSample, index: int) -> InstancePatchMask:
    layout = sample.layout
    if not 0 <= index < len(layout.boxes):
        raise ContractError(f"instance index {index} out of range for {len(layout.boxes)} boxes")
    box = layout.boxes[index]
    x0, y0, x1, y1 = _crop_window(box, sample.composite_mask.size)
    patch = sample.instance_masks[index].pixels[y0:y1, x0:x1]
    if not patch.any():
        raise DegenerateInstanceError(layout.scene_id, index)
    return InstancePatchMask(
        pixels=patch.copy(), source_box=box, category_id=layout.category_ids[index], origin=(x0, y0)
    )


def _support(patch: InstancePatchMask) -> Tuple[np.ndarray, np.ndarray, float, float]:
    """Canvas-space pixel-center coordinates of the patch support and its snapped centroid."""
    ys, xs = np.nonzero(patch.pixels)
    px = xs + patch.origin[0] + 0.5
    py = ys + patch.origin[1] + 0.5
    # rotation center snapped to a pixel center so quarter turns permute the grid
    cx = math.floor(px.mean()) + 0.5
    cy = math.floor(py.mean()) + 0.5
    return px, py, cx, cy


def fit_scale(patch: InstancePatchMask, angle: float, target_box: OrientedBox) -> float:
    """
    Isotropic factor: the box-size ratio, shrunk further if the rotated support
    would leave the target box.
    """
    src = patch.source_box
    scale = min(target_box.width / src.width, target_box.height / src.height)
    px, py, cx, cy = _support(patch)
    c, s = math.cos(angle), math.sin(angle)
    dx, dy = px - cx, py - cy
    # rotated support, re-centered so the source box center maps to the target center
    qx = c * dx - s * dy + cx - src.center_x + target_box.center_x
    qy = s * dx + c * dy + cy - src.center_y + target_box.center_y
    u, v = to_box_frame(target_box, qx, qy)
    au, av = np.abs(u).max(), np.abs(v).max()
    if au > 0:
        scale = min(scale, target_box.width / 2.0 / au)
    if av > 0:
        scale = min(scale, target_box.height / 2.0 / av)
    return float(scale)


def augment_shape(
    patch: InstancePatchMask, angle: float, target_box: OrientedBox, canvas_size: int
) -> ShapeMask:
    """
    Rotate the patch about its centroid (nearest neighbor), rescale it
    isotropically to fit target_box and paste it at the target box position on
    a zeroed canvas.
    """
    x0, y0, x1, y1 = axis_aligned_bounds(target_box)
    if x0 < 0 or y0 < 0 or x1 > canvas_size or y1 > canvas_size:
        raise ContractError(f"target box {target_box.as_list()} is not inside the {canvas_size} canvas")

    src = patch.source_box
    scale = fit_scale(patch, angle, target_box)
    _, _, cx, cy = _support(patch)
    # rotation center's image on the output canvas
    ox = cx - src.center_x + target_box.center_x
    oy = cy - src.center_y + target_box.center_y

    x, y = pixel_centers(canvas_size, canvas_size)
    c, s = math.cos(angle), math.sin(angle)
    dx = (x - target_box.center_x) / scale + target_box.center_x - ox
    dy = (y - target_box.center_y) / scale + target_box.center_y - oy
    # inverse rotation back into the patch
    sx = c * dx + s * dy + cx - patch.origin[0]
    sy = -s * dx + c * dy + cy - patch.origin[1]
    col = np.floor(sx + 1e-9).astype(np.int64)
    row = np.floor(sy + 1e-9).astype(np.int64)
    h, w = patch.pixels.shape
    valid = (row >= 0) & (row < h) & (col >= 0) & (col < w)
    out = np.zeros((canvas_size, canvas_size), dtype=np.uint8)
    out[valid] = patch.pixels[row[valid], col[valid]]
    out &= inside_box(target_box, x, y, dilation=1.0).astype(np.uint8)

    if not out.any():
        raise InvariantError(f"augmentation emptied a nonempty patch (angle={angle}, scale={scale})")
    return ShapeMask(pixels=out)


def compose_condition(
    patches: Sequence[InstancePatchMask],
    angles: Sequence[float],
    target_boxes: Sequence[OrientedBox],
    canvas_size: int,
) -> ShapeMask:
    canvas = ShapeMask.zeros(canvas_size)
    for patch, angle, box in zip(patches, angles, target_boxes):
        canvas = canvas | augment_shape(patch, angle, box, canvas_size)
    return canvas


def training_shape_condition(sample: SceneSample, esgm_enabled: bool = True) -> ShapeMask:
    """
    Training-phase condition: the true masks re-pasted in place when ESGM is on,
    filled oriented boxes (the layout-only ablation) when off.
    """
    size = sample.composite_mask.size
    if not esgm_enabled:
        return layout_box_condition(sample.layout, size)
    patches = [extract_instance_mask(sample, i) for i in range(len(sample.layout.boxes))]
    return compose_condition(patches, [0.0] * len(patches), [p.source_box for p in patches], size)


def layout_box_condition(layout: Layout, canvas_size: int) -> ShapeMask:
    canvas = ShapeMask.zeros(canvas_size)
    for box in layout.boxes:
        canvas = canvas | box_mask(box, canvas_size)
    return canvas


def build_mask_pool(dataset: DatasetManifest) -> MaskPool:
    manifest, samples = read_dataset(Path(dataset.directory))
    if manifest.digest != dataset.digest:
        raise CorruptDatasetError(dataset.directory, "dataset digest differs from the requested manifest")
    entries: Dict[int, List[InstancePatchMask]] = {cid: [] for cid in manifest.category_ids}
    for sample in samples:
        for i in range(len(sample.layout.boxes)):
            patch = extract_instance_mask(sample, i)
            entries.setdefault(patch.category_id, []).append(patch)
    empty = [cid for cid, items in entries.items() if not items]
    if empty:
        raise EmptyCategoryError(empty)
    pool = MaskPool(entries=entries, provenance=manifest.digest, canvas_size=manifest.canvas_size)
    logger.info("mask pool built", extra={"counts": pool.counts(), "provenance": pool.provenance})
    return pool


def sample_shape_condition(layout: Layout, pool: MaskPool, seed: int) -> ShapeMask:
    """
    One augmented pool patch per layout box, rotated uniformly in [0, 2pi),
    OR-composed on a single canvas.
    """
    for cid in layout.category_ids:
        if not pool.entries.get(cid):
            raise PoolMissError(cid)
    rng = np.random.default_rng([seed, 7])
    patches, angles = [], []
    for cid in layout.category_ids:
        items = pool.entries[cid]
        patches.append(items[int(rng.integers(len(items)))])
        angles.append(float(rng.uniform(0.0, 2 * math.pi)))
    return compose_condition(patches, angles, layout.boxes, pool.canvas_size)


def save_mask_pool(pool: MaskPool, directory: Path) -> None:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetIOError(directory, f"cannot create pool directory ({e})")
    index: Dict[str, List[dict]] = {}
    for cid, items in sorted(pool.entries.items()):
        rows = []
        for i, patch in enumerate(items):
            name = f"cat{cid:03d}_{i:05d}.pgm"
            write_pgm(directory / name, patch.pixels)
            rows.append({"file": name, "source_box": patch.source_box.as_list(), "origin": list(patch.origin)})
        index[str(cid)] = rows
    write_json(
        directory / "index.json",
        {"provenance": pool.provenance, "canvas_size": pool.canvas_size, "entries": index},
    )


def load_mask_pool(directory: Path) -> MaskPool:
    directory = Path(directory)
    try:
        payload = read_json(directory / "index.json")
    except FileNotFoundError:
        raise DatasetIOError(directory / "index.json", "mask pool index not found")
    entries: Dict[int, List[InstancePatchMask]] = {}
    for cid, rows in payload["entries"].items():
        entries[int(cid)] = [
            InstancePatchMask(
                pixels=read_pgm(directory / row["file"]),
                source_box=OrientedBox.from_list(row["source_box"]),
                category_id=int(cid),
                origin=tuple(row["origin"]),
            )
            for row in rows
        ]
    return MaskPool(entries=entries, provenance=payload["provenance"], canvas_size=int(payload["canvas_size"]))
