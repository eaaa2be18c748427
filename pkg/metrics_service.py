"""
Object-shape fidelity metrics on edge maps of padded instance crops, plus a
kernel two-sample statistic over image features.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import ndimage
from scipy.spatial.distance import cdist, pdist

from exceptions import DatasetIOError, MetricError
from models.metrics import (
    METRIC_ORDER,
    Aggregate,
    EdgeMap,
    HorizontalBox,
    InstanceScore,
    ShapeFidelityReport,
)
from models.run_config import EvalConfig
from models.scene import Layout, OrientedBox
from util.geometry import axis_aligned_bounds
from scene_service import composite_mask_name
from util.pnm import read_pgm, read_ppm

logger = logging.getLogger(__name__)

LUMA = (0.299, 0.587, 0.114)
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def luminance(images: torch.Tensor) -> torch.Tensor:
    """(..., 3, H, W) -> (..., H, W)"""
    r, g, b = images.unbind(dim=-3)
    return LUMA[0] * r + LUMA[1] * g + LUMA[2] * b


def image_to_gray(image) -> np.ndarray:
    """Channel-last (H, W, 3) or channel-first tensor (3, H, W) to an (H, W) float64 raster."""
    if isinstance(image, torch.Tensor):
        return luminance(image.to(torch.float64)).numpy()
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    return arr[..., 0] * LUMA[0] + arr[..., 1] * LUMA[1] + arr[..., 2] * LUMA[2]


def rbox_to_hbox(box: OrientedBox) -> HorizontalBox:
    x0, y0, x1, y1 = axis_aligned_bounds(box)
    return HorizontalBox(x_min=x0, y_min=y0, x_max=x1, y_max=y1)


def padded_box(hbox: HorizontalBox, padding_frac: float) -> HorizontalBox:
    """Grows each side by padding_frac of the box extent along that axis."""
    px = padding_frac * (hbox.x_max - hbox.x_min)
    py = padding_frac * (hbox.y_max - hbox.y_min)
    return HorizontalBox(x_min=hbox.x_min - px, y_min=hbox.y_min - py, x_max=hbox.x_max + px, y_max=hbox.y_max + py)


def crop_and_resize(
    image: np.ndarray, hbox: HorizontalBox, padding_frac: float = 0.2, out_size: int = 64
) -> np.ndarray:
    """
    Pads the box, clamps it to the image and bilinearly resamples the window
    to out_size x out_size using pixel-center alignment.
    """
    image = np.asarray(image, dtype=np.float64)
    height, width = image.shape[:2]
    window = padded_box(hbox, padding_frac)
    x0, x1 = max(window.x_min, 0.0), min(window.x_max, float(width))
    y0, y1 = max(window.y_min, 0.0), min(window.y_max, float(height))
    if x0 >= x1 or y0 >= y1:
        raise MetricError("box outside image")
    centers = (np.arange(out_size) + 0.5) / out_size
    xs = x0 + centers * (x1 - x0) - 0.5
    ys = y0 + centers * (y1 - y0) - 0.5
    rows, cols = np.meshgrid(ys, xs, indexing="ij")
    if image.ndim == 2:
        return ndimage.map_coordinates(image, [rows, cols], order=1, mode="nearest")
    return np.stack(
        [ndimage.map_coordinates(image[..., c], [rows, cols], order=1, mode="nearest") for c in range(image.shape[2])],
        axis=-1,
    )


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _non_maximum_suppression(magnitude: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    padded = np.pad(magnitude, 1)
    h, w = magnitude.shape

    def shifted(dr: int, dc: int) -> np.ndarray:
        return padded[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]

    horizontal = (angle < 22.5) | (angle >= 157.5)
    diagonal = (angle >= 22.5) & (angle < 67.5)
    vertical = (angle >= 67.5) & (angle < 112.5)
    anti = (angle >= 112.5) & (angle < 157.5)

    keep = np.zeros_like(magnitude, dtype=bool)
    for mask, (a, b) in (
        (horizontal, ((0, -1), (0, 1))),
        (diagonal, ((-1, -1), (1, 1))),
        (vertical, ((-1, 0), (1, 0))),
        (anti, ((-1, 1), (1, -1))),
    ):
        local = (magnitude >= shifted(*a)) & (magnitude >= shifted(*b))
        keep |= mask & local
    return np.where(keep & (magnitude > 0), magnitude, 0.0)


def canny_edges(patch: np.ndarray, low_thresh: float = 100.0, high_thresh: float = 200.0) -> EdgeMap:
    """
    Canny on an 8-bit-scale patch: luminance, 5x5 Gaussian (sigma 1.4), Sobel,
    four-direction non-maximum suppression, hysteresis with 8-connectivity.
    """
    gray = image_to_gray(patch)
    blurred = ndimage.convolve(gray, _gaussian_kernel(5, 1.4), mode="nearest")
    gx = ndimage.sobel(blurred, axis=1, mode="nearest")
    gy = ndimage.sobel(blurred, axis=0, mode="nearest")
    thin = _non_maximum_suppression(np.hypot(gx, gy), gx, gy)
    strong = thin >= high_thresh
    weak = thin >= low_thresh
    labels, count = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    if count == 0:
        return EdgeMap(pixels=np.zeros(gray.shape, dtype=np.uint8))
    connected = np.zeros(count + 1, dtype=bool)
    connected[np.unique(labels[strong])] = True
    connected[0] = False
    return EdgeMap(pixels=connected[labels].astype(np.uint8))


def edge_overlap(a: EdgeMap, b: EdgeMap) -> Tuple[float, float]:
    if a.pixels.shape != b.pixels.shape:
        raise MetricError(f"edge maps differ in size: {a.pixels.shape} vs {b.pixels.shape}")
    pa, pb = a.pixels.astype(bool), b.pixels.astype(bool)
    inter = int((pa & pb).sum())
    union = int((pa | pb).sum())
    if union == 0:
        return 1.0, 1.0
    return inter / union, 2.0 * inter / (int(pa.sum()) + int(pb.sum()))


def _nearest(a: EdgeMap, b: EdgeMap) -> Tuple[np.ndarray, np.ndarray]:
    if a.is_empty() or b.is_empty():
        raise MetricError("undefined distance for empty edge set")
    dist = cdist(a.points(), b.points())
    return dist.min(axis=1), dist.min(axis=0)


def chamfer(a: EdgeMap, b: EdgeMap) -> float:
    ab, ba = _nearest(a, b)
    return float(0.5 * (ab.mean() + ba.mean()))


def hausdorff(a: EdgeMap, b: EdgeMap) -> float:
    ab, ba = _nearest(a, b)
    return float(max(ab.max(), ba.max()))


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5) -> float:
    """
    Single-scale SSIM over every fully-contained Gaussian window position.
    Inputs smaller than the window shrink it to the largest odd size that fits.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise MetricError(f"ssim needs equal 2-D inputs, got {a.shape} and {b.shape}")
    size = min(window, *a.shape)
    if size % 2 == 0:
        size -= 1
    kernel = _gaussian_kernel(size, sigma)
    r = size // 2
    valid = (slice(r, a.shape[0] - r), slice(r, a.shape[1] - r))

    def local_mean(x: np.ndarray) -> np.ndarray:
        return ndimage.correlate(x, kernel, mode="constant")[valid]

    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a**2
    var_b = local_mean(b * b) - mu_b**2
    cov = local_mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())


def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    pooled = np.concatenate([np.asarray(a, np.float64), np.asarray(b, np.float64)])
    distances = pdist(pooled)
    positive = distances[distances > 0]
    return float(np.median(positive)) if positive.size else 1.0


def _mmd_from_kernel(kernel: np.ndarray, m: int) -> float:
    n = kernel.shape[0] - m
    kxx, kyy, kxy = kernel[:m, :m], kernel[m:, m:], kernel[:m, m:]
    xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(xx + yy - 2.0 * kxy.mean())


def _rbf(pooled: np.ndarray, bandwidth: float) -> np.ndarray:
    sq = cdist(pooled, pooled, "sqeuclidean")
    return np.exp(-sq / (2.0 * bandwidth**2))


def mmd_rbf(features_a: np.ndarray, features_b: np.ndarray, bandwidth: Optional[float] = None) -> float:
    """Unbiased squared MMD with an RBF kernel; median heuristic when bandwidth is unset."""
    a = np.asarray(features_a, np.float64)
    b = np.asarray(features_b, np.float64)
    if len(a) < 2 or len(b) < 2:
        raise MetricError("mmd needs at least two samples per set")
    h = bandwidth or median_bandwidth(a, b)
    return _mmd_from_kernel(_rbf(np.concatenate([a, b]), h), len(a))


def mmd_permutation_test(
    features_a: np.ndarray,
    features_b: np.ndarray,
    n_permutations: int = 200,
    seed: int = 0,
    bandwidth: Optional[float] = None,
) -> Dict[str, float]:
    """Observed MMD^2, the spread of the permutation null and the permutation p-value."""
    a = np.asarray(features_a, np.float64)
    b = np.asarray(features_b, np.float64)
    if len(a) < 2 or len(b) < 2:
        raise MetricError("mmd needs at least two samples per set")
    h = bandwidth or median_bandwidth(a, b)
    kernel = _rbf(np.concatenate([a, b]), h)
    m = len(a)
    observed = _mmd_from_kernel(kernel, m)
    rng = np.random.default_rng(seed)
    null = np.empty(n_permutations)
    for i in range(n_permutations):
        order = rng.permutation(kernel.shape[0])
        null[i] = _mmd_from_kernel(kernel[np.ix_(order, order)], m)
    stderr = float(null.std()) if n_permutations else 0.0
    p_value = float((1 + (null >= observed).sum()) / (1 + n_permutations))
    return {"mmd": observed, "stderr": stderr, "p_value": p_value, "bandwidth": h}


def _load_image(directory: Path, scene_id: str) -> Optional[np.ndarray]:
    path = Path(directory) / "images" / f"{scene_id}.ppm"
    if not path.exists():
        return None
    try:
        return read_ppm(path).astype(np.float64)
    except DatasetIOError:
        logger.warning("unreadable image", extra={"path": str(path)})
        return None


def _load_mask(directory: Path, scene_id: str) -> Optional[np.ndarray]:
    path = Path(directory) / composite_mask_name(scene_id)
    if not path.exists():
        return None
    try:
        return read_pgm(path).astype(np.float64) * 255.0
    except DatasetIOError:
        logger.warning("unreadable mask", extra={"path": str(path)})
        return None


def score_instance(
    generated: np.ndarray, reference: np.ndarray, box: OrientedBox, config: EvalConfig
) -> Dict[str, Optional[float]]:
    hbox = rbox_to_hbox(box)
    edges = []
    for image in (generated, reference):
        patch = crop_and_resize(image, hbox, config.padding_frac, config.out_size)
        edges.append(canny_edges(patch, config.low_threshold, config.high_threshold))
    iou, dice = edge_overlap(*edges)
    scores: Dict[str, Optional[float]] = {
        "iou": iou,
        "dice": dice,
        "ssim": ssim(edges[0].pixels, edges[1].pixels),
        "cd": None,
        "hd": None,
    }
    if not (edges[0].is_empty() or edges[1].is_empty()):
        scores["cd"] = chamfer(*edges)
        scores["hd"] = hausdorff(*edges)
    return scores


def _mean(values: List[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def aggregate(rows: Sequence[InstanceScore]) -> Aggregate:
    if not rows:
        return Aggregate()
    return Aggregate(count=len(rows), **{name: _mean([getattr(r, name) for r in rows]) for name in METRIC_ORDER})


def evaluate_pairs(
    generated_dir: Path,
    reference_dir: Path,
    layouts: Sequence[Layout],
    config: EvalConfig = EvalConfig(),
    workers: int = 1,
    reference: Literal["image", "mask"] = "image",
) -> ShapeFidelityReport:
    """
    Compares every layout instance between the two directories. The reference
    side is either its rendered images or its ground-truth composite masks.
    Scenes missing on either side are skipped and listed; rows are ordered by
    (scene id, instance index) whatever the worker count.
    """
    load_reference = _load_mask if reference == "mask" else _load_image
    jobs = []
    skipped = []
    for layout in sorted(layouts, key=lambda lay: lay.scene_id):
        generated = _load_image(generated_dir, layout.scene_id)
        target = load_reference(reference_dir, layout.scene_id)
        if generated is None or target is None:
            skipped.append(layout.scene_id)
            continue
        for i, box in enumerate(layout.boxes):
            jobs.append((layout.scene_id, i, layout.category_ids[i], generated, target, box))

    def run(job) -> InstanceScore:
        scene_id, index, category_id, generated, target, box = job
        scores = score_instance(generated, target, box, config)
        return InstanceScore(
            scene_id=scene_id, index=index, category_id=category_id, empty_edge=scores["cd"] is None, **scores
        )

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        rows = list(pool.map(run, jobs))

    per_category: Dict[int, Aggregate] = {}
    for cid in sorted({r.category_id for r in rows}):
        per_category[cid] = aggregate([r for r in rows if r.category_id == cid])
    report = ShapeFidelityReport(
        instances=rows,
        overall=aggregate(rows),
        per_category=per_category,
        skipped=skipped,
        empty_edge_count=sum(r.empty_edge for r in rows),
    )
    if skipped:
        logger.warning("scenes skipped", extra={"count": len(skipped)})
    return report


def report_table(report: ShapeFidelityReport) -> str:
    """Aligned text table: IoU, Dice, CD, HD, SSIM per scope."""
    header = ["scope", "count", "IoU", "Dice", "CD", "HD", "SSIM"]
    lines = [("overall", report.overall)] + [(f"category {cid}", agg) for cid, agg in report.per_category.items()]

    def fmt(value: Optional[float]) -> str:
        return "-" if value is None else f"{value:.4f}"

    rows = [header] + [
        [scope, str(agg.count)] + [fmt(getattr(agg, name)) for name in METRIC_ORDER] for scope, agg in lines
    ]
    widths = [max(len(row[c]) for row in rows) for c in range(len(header))]
    text = "\n".join("  ".join(cell.ljust(widths[c]) for c, cell in enumerate(row)).rstrip() for row in rows)
    footer = [f"empty-edge instances: {report.empty_edge_count}", f"skipped scenes: {len(report.skipped)}"]
    if report.mmd is not None:
        footer.append(f"MMD^2: {report.mmd:.6f} (stderr {report.mmd_stderr:.6f}, p {report.mmd_p_value:.4f})")
    return text + "\n" + "\n".join(footer) + "\n"
