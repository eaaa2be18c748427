"""
Procedural toy layout-to-image dataset: layouts of oriented boxes, rendered RGB
scenes and the exact per-instance masks the rasterizer produced.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from skimage.measure import points_in_poly

from exceptions import ContractError, CorruptDatasetError, DatasetIOError, LayoutSaturationError
from models.scene import BackgroundKind, Category, DatasetManifest, Glyph, Layout, OrientedBox, SceneSpec
from models.shapes import SceneSample, ShapeMask
from numerics import derive_seed
from util.digest import combined_digest, file_digest
from util.geometry import box_corners, box_raster, half_extents, inside_box, pixel_centers, to_box_frame
from util.json_log import dumps_line, read_json, read_jsonl, write_json
from util.pnm import read_pgm, read_ppm, write_pgm, write_ppm

logger = logging.getLogger(__name__)

MAX_PLACEMENT_ATTEMPTS = 1000

# Right half of a bilaterally symmetric airplane in box-normalized coordinates,
# nose toward -v. The left half is its mirror image.
_AIRPLANE_RIGHT = [
    (0.0, -0.5), (0.13, -0.34), (0.13, -0.12), (0.5, 0.04), (0.5, 0.2),
    (0.13, 0.1), (0.13, 0.28), (0.32, 0.38), (0.32, 0.5), (0.0, 0.46),
]
AIRPLANE_POLYGON = np.array(
    _AIRPLANE_RIGHT + [(-u, v) for u, v in reversed(_AIRPLANE_RIGHT[1:-1])], dtype=np.float64
)


def _box_dims(category: Category, size: float, rng: np.random.Generator) -> Tuple[float, float]:
    if category.glyph == Glyph.RECTANGLE:
        return size, size * rng.uniform(0.5, 1.0)
    return size, size


def _corners_inside(box: OrientedBox, canvas_size: int) -> bool:
    corners = box_corners(box)
    return bool((corners >= 0).all() and (corners < canvas_size).all())


def generate_layout(spec: SceneSpec, seed: int, scene_id: Optional[str] = None) -> Layout:
    """
    Sample a layout whose object count is uniform over num_objects_range.
    Boxes are rejection-sampled so every pair of centers is at least half the
    larger box's longer side apart.
    """
    rng = np.random.default_rng(seed)
    size = spec.canvas_size
    lo, hi = spec.num_objects_range
    count = int(rng.integers(lo, hi + 1))

    boxes: List[OrientedBox] = []
    category_ids: List[int] = []
    for _ in range(count):
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            category = spec.categories[int(rng.integers(len(spec.categories)))]
            side = float(rng.uniform(*category.size_range))
            width, height = _box_dims(category, side, rng)
            angle = float(rng.uniform(-math.pi / 2, math.pi / 2))
            ex, ey = half_extents(width, height, angle)
            if 2 * ex >= size or 2 * ey >= size:
                continue
            box = OrientedBox(
                center_x=float(rng.uniform(ex, size - ex)),
                center_y=float(rng.uniform(ey, size - ey)),
                width=width,
                height=height,
                angle=angle,
            )
            if not _corners_inside(box, size):
                continue
            reach = max(box.width, box.height)
            if all(
                math.hypot(box.center_x - b.center_x, box.center_y - b.center_y)
                >= 0.5 * max(reach, b.width, b.height)
                for b in boxes
            ):
                boxes.append(box)
                category_ids.append(category.id)
                break
        else:
            raise LayoutSaturationError(size, spec.num_objects_range, MAX_PLACEMENT_ATTEMPTS)

    return Layout(boxes=boxes, category_ids=category_ids, scene_id=scene_id or f"scene-{seed}")


def glyph_mask(glyph: Glyph, box: OrientedBox, canvas_size: int) -> np.ndarray:
    """Exact coverage of a glyph: pixels whose centers fall inside the shape."""
    x, y = pixel_centers(canvas_size, canvas_size)
    if glyph == Glyph.RECTANGLE:
        covered = inside_box(box, x, y)
    elif glyph == Glyph.CIRCLE:
        r = min(box.width, box.height) / 2.0
        covered = (x - box.center_x) ** 2 + (y - box.center_y) ** 2 <= r * r
    else:
        u, v = to_box_frame(box, x, y)
        points = np.stack([(u / box.width).ravel(), (v / box.height).ravel()], axis=1)
        covered = points_in_poly(points, AIRPLANE_POLYGON).reshape(x.shape)
    return covered.astype(np.uint8)


def box_mask(box: OrientedBox, canvas_size: int) -> ShapeMask:
    """Filled oriented box, the layout-only stand-in for a shape."""
    return ShapeMask(pixels=box_raster(box, canvas_size))


def category_color(category_id: int) -> np.ndarray:
    """A stable color per category, spread around the hue circle."""
    hue = (category_id * 0.61803398875 + 0.1) % 1.0
    k = np.array([5.0, 3.0, 1.0])
    channel = (k + hue * 6.0) % 6.0
    rgb = 1.0 - np.clip(np.minimum(channel, 4.0 - channel), 0.0, 1.0)
    return 0.25 + 0.65 * rgb


def _background(kind: BackgroundKind, size: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.2, 0.45, size=3)
    image = np.broadcast_to(base, (size, size, 3)).copy()
    if kind == BackgroundKind.GRADIENT:
        theta = rng.uniform(0.0, 2 * math.pi)
        x, y = pixel_centers(size, size)
        ramp = (math.cos(theta) * x + math.sin(theta) * y) / size
        image += 0.2 * (ramp - ramp.mean())[..., None]
    elif kind == BackgroundKind.SPECKLE:
        image += rng.uniform(-0.08, 0.08, size=(size, size, 3))
    return image


def render_scene(layout: Layout, spec: SceneSpec, seed: int) -> SceneSample:
    size = spec.canvas_size
    for box in layout.boxes:
        if not _corners_inside(box, size):
            raise ContractError(f"layout {layout.scene_id} has a box outside the {size}x{size} canvas")

    rng = np.random.default_rng([seed, 1])
    image = _background(spec.background_kind, size, rng)

    instance_masks: List[ShapeMask] = []
    composite = np.zeros((size, size), dtype=np.uint8)
    for box, category_id in zip(layout.boxes, layout.category_ids):
        category = spec.category(category_id)
        mask = glyph_mask(category.glyph, box, size)
        color = category_color(category_id) + rng.normal(0.0, 0.04, size=3)
        texture = rng.normal(0.0, 0.02, size=(size, size, 3))
        covered = mask.astype(bool)
        image[covered] = (color + texture)[covered]
        instance_masks.append(ShapeMask(pixels=mask))
        composite |= mask

    quantized = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return SceneSample(
        image=_u8_to_tensor(quantized),
        layout=layout,
        instance_masks=instance_masks,
        composite_mask=ShapeMask(pixels=composite),
    )


def _u8_to_tensor(rgb: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(rgb.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()


def tensor_to_u8(image: torch.Tensor) -> np.ndarray:
    arr = image.detach().to(torch.float64).clamp(0.0, 1.0).permute(1, 2, 0).cpu().numpy()
    return np.round(arr * 255.0).astype(np.uint8)


def generate_dataset(
    spec: SceneSpec, count: int, seed: int, prefix: str = "scene", workers: int = 1
) -> List[SceneSample]:
    def _one(index: int) -> SceneSample:
        scene_seed = derive_seed(seed, index)
        layout = generate_layout(spec, scene_seed, scene_id=f"{prefix}-{index:05d}")
        return render_scene(layout, spec, scene_seed)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_one, range(count)))
    return [_one(i) for i in range(count)]


def write_layouts(path: Path, layouts: Iterable[Layout]) -> None:
    with open(path, "wb") as fh:
        for layout in layouts:
            fh.write(dumps_line(layout.to_record()))


def read_layouts(path: Path) -> List[Layout]:
    try:
        return [Layout.from_record(r) for r in read_jsonl(path)]
    except FileNotFoundError:
        raise DatasetIOError(path, "layouts file not found")


def _instance_mask_name(scene_id: str, index: int) -> str:
    return f"masks/{scene_id}_{index:03d}.pgm"


def composite_mask_name(scene_id: str) -> str:
    return f"masks/{scene_id}_composite.pgm"


def write_dataset(
    samples: Sequence[SceneSample],
    directory: Path,
    seed: Optional[int] = None,
    spec: Optional[SceneSpec] = None,
) -> DatasetManifest:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        if any(directory.iterdir()):
            raise DatasetIOError(directory, "dataset directory is not empty")
        (directory / "images").mkdir()
        (directory / "masks").mkdir()
    except OSError as e:
        raise DatasetIOError(directory, f"cannot create dataset directory ({e})")

    written: List[str] = []
    for sample in samples:
        sid = sample.layout.scene_id
        write_ppm(directory / f"images/{sid}.ppm", tensor_to_u8(sample.image))
        written.append(f"images/{sid}.ppm")
        for i, mask in enumerate(sample.instance_masks):
            write_pgm(directory / _instance_mask_name(sid, i), mask.pixels)
            written.append(_instance_mask_name(sid, i))
        write_pgm(directory / composite_mask_name(sid), sample.composite_mask.pixels)
        written.append(composite_mask_name(sid))
    write_layouts(directory / "layouts.jsonl", [s.layout for s in samples])
    written.append("layouts.jsonl")

    files = {name: file_digest(directory / name) for name in written}
    if spec is not None:
        category_ids = sorted(c.id for c in spec.categories)
    else:
        category_ids = sorted({cid for s in samples for cid in s.layout.category_ids})
    manifest = DatasetManifest(
        directory=str(directory),
        count=len(samples),
        seed=seed,
        digest=combined_digest(files),
        canvas_size=spec.canvas_size if spec else (samples[0].image.shape[-1] if samples else None),
        category_ids=category_ids,
        scene_ids=[s.layout.scene_id for s in samples],
        files=files,
    )
    write_json(directory / "manifest.json", manifest.model_dump(exclude={"directory"}))
    logger.info("dataset written", extra={"path": str(directory), "count": manifest.count, "digest": manifest.digest})
    return manifest


def load_manifest(directory: Path) -> DatasetManifest:
    directory = Path(directory)
    try:
        payload = read_json(directory / "manifest.json")
    except FileNotFoundError:
        raise DatasetIOError(directory / "manifest.json", "dataset manifest not found")
    return DatasetManifest(directory=str(directory), **payload)


def verify_dataset(directory: Path) -> DatasetManifest:
    """Recompute every file digest; any drift fails closed."""
    manifest = load_manifest(directory)
    directory = Path(directory)
    on_disk = {
        str(p.relative_to(directory)).replace("\\", "/")
        for sub in ("images", "masks")
        if (directory / sub).is_dir()
        for p in (directory / sub).iterdir()
    } | {"layouts.jsonl"}
    if on_disk != set(manifest.files):
        raise CorruptDatasetError(directory, "file set differs from manifest")
    actual = {}
    for name in manifest.files:
        try:
            actual[name] = file_digest(directory / name)
        except FileNotFoundError:
            raise CorruptDatasetError(directory, f"missing {name}")
    if actual != manifest.files or combined_digest(actual) != manifest.digest:
        raise CorruptDatasetError(directory, "digest mismatch")
    return manifest


def read_dataset(directory: Path) -> Tuple[DatasetManifest, List[SceneSample]]:
    directory = Path(directory)
    manifest = verify_dataset(directory)
    samples = []
    for layout in read_layouts(directory / "layouts.jsonl"):
        sid = layout.scene_id
        masks = [ShapeMask(pixels=read_pgm(directory / _instance_mask_name(sid, i))) for i in range(len(layout.boxes))]
        samples.append(
            SceneSample(
                image=_u8_to_tensor(read_ppm(directory / f"images/{sid}.ppm")),
                layout=layout,
                instance_masks=masks,
                composite_mask=ShapeMask(pixels=read_pgm(directory / composite_mask_name(sid))),
            )
        )
    return manifest, samples
