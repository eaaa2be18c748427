import numpy as np
import pytest
import torch

from exceptions import ContractError, CorruptDatasetError, DatasetIOError, LayoutSaturationError
from models.scene import Glyph, Layout, OrientedBox, SceneSpec
from scene_service import (
    AIRPLANE_POLYGON,
    box_mask,
    generate_dataset,
    generate_layout,
    glyph_mask,
    read_dataset,
    read_layouts,
    render_scene,
    verify_dataset,
    write_dataset,
    write_layouts,
)
from util.geometry import box_corners


def test_layout_is_deterministic_and_inside_canvas():
    spec = SceneSpec()
    a = generate_layout(spec, seed=42)
    b = generate_layout(spec, seed=42)
    assert a == b
    lo, hi = spec.num_objects_range
    assert lo <= len(a.boxes) <= hi
    for box in a.boxes:
        corners = box_corners(box)
        assert (corners >= 0).all() and (corners < spec.canvas_size).all()
        assert -np.pi / 2 <= box.angle < np.pi / 2


def test_layout_saturation_names_the_spec():
    spec = SceneSpec(canvas_size=16, num_objects_range=(32, 32))
    with pytest.raises(LayoutSaturationError) as err:
        generate_layout(spec, seed=0)
    assert "canvas_size=16" in str(err.value)
    assert "[32, 32]" in str(err.value)


def test_invalid_angle_rejected():
    with pytest.raises(ValueError):
        OrientedBox(center_x=8, center_y=8, width=4, height=4, angle=np.pi / 2)


def test_render_masks_match_layout():
    spec = SceneSpec()
    layout = generate_layout(spec, seed=3)
    sample = render_scene(layout, spec, seed=3)
    assert tuple(sample.image.shape) == (3, 32, 32)
    assert float(sample.image.min()) >= 0.0 and float(sample.image.max()) <= 1.0
    assert len(sample.instance_masks) == len(layout.boxes)
    union = np.zeros((32, 32), dtype=np.uint8)
    for mask in sample.instance_masks:
        assert mask.count() > 0
        union |= mask.pixels
    np.testing.assert_array_equal(union, sample.composite_mask.pixels)


def test_render_is_deterministic():
    spec = SceneSpec()
    layout = generate_layout(spec, seed=9)
    assert torch.equal(render_scene(layout, spec, 9).image, render_scene(layout, spec, 9).image)


def test_render_rejects_box_outside_canvas():
    spec = SceneSpec()
    layout = Layout(boxes=[OrientedBox(center_x=1, center_y=1, width=8, height=8)], category_ids=[0])
    with pytest.raises(ContractError):
        render_scene(layout, spec, seed=0)


def test_axis_aligned_rectangle_coverage_is_exact():
    box = OrientedBox(center_x=10, center_y=10, width=6, height=4)
    mask = glyph_mask(Glyph.RECTANGLE, box, 32)
    assert mask.sum() == 24
    assert mask[8:12, 7:13].all()
    assert box_mask(box, 32).count() == 24


def test_dataset_round_trip(tmp_path):
    spec = SceneSpec()
    samples = generate_dataset(spec, 4, seed=7)
    manifest = write_dataset(samples, tmp_path / "d", seed=7, spec=spec)
    loaded_manifest, loaded = read_dataset(tmp_path / "d")
    assert loaded_manifest.digest == manifest.digest
    assert [s.layout for s in loaded] == [s.layout for s in samples]
    for a, b in zip(samples, loaded):
        assert torch.equal(a.image, b.image)
        assert a.composite_mask == b.composite_mask


def test_same_seed_same_digest(tmp_path):
    spec = SceneSpec()
    a = write_dataset(generate_dataset(spec, 5, seed=7), tmp_path / "a", seed=7, spec=spec)
    b = write_dataset(generate_dataset(spec, 5, seed=7), tmp_path / "b", seed=7, spec=spec)
    assert a.digest == b.digest


def test_empty_dataset_is_valid(tmp_path):
    spec = SceneSpec()
    manifest = write_dataset([], tmp_path / "empty", seed=1, spec=spec)
    assert manifest.count == 0
    _, samples = read_dataset(tmp_path / "empty")
    assert samples == []


def test_tampered_dataset_fails_closed(tmp_path):
    spec = SceneSpec()
    samples = generate_dataset(spec, 2, seed=1)
    write_dataset(samples, tmp_path / "d", seed=1, spec=spec)
    image = tmp_path / "d" / "images" / f"{samples[0].layout.scene_id}.ppm"
    data = bytearray(image.read_bytes())
    data[-1] ^= 0xFF
    image.write_bytes(bytes(data))
    with pytest.raises(CorruptDatasetError):
        verify_dataset(tmp_path / "d")


def test_write_refuses_non_empty_directory(tmp_path):
    (tmp_path / "d").mkdir()
    (tmp_path / "d" / "stray.txt").write_text("x")
    with pytest.raises(DatasetIOError):
        write_dataset([], tmp_path / "d")


def test_layout_jsonl_round_trip(tmp_path):
    spec = SceneSpec()
    layouts = [generate_layout(spec, seed=s, scene_id=f"s{s}") for s in range(3)]
    write_layouts(tmp_path / "layouts.jsonl", layouts)
    assert read_layouts(tmp_path / "layouts.jsonl") == layouts


def _canvas_polygon(local: np.ndarray, box: OrientedBox) -> np.ndarray:
    c, s = np.cos(box.angle), np.sin(box.angle)
    u, v = local[:, 0], local[:, 1]
    return np.stack([box.center_x + c * u - s * v, box.center_y + s * u + c * v], axis=1)


def _even_odd(polygon: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    inside = np.zeros(x.shape, dtype=bool)
    for (x1, y1), (x2, y2) in zip(polygon, np.roll(polygon, -1, axis=0)):
        if y1 == y2:
            continue
        spans = (y1 > y) != (y2 > y)
        crossing = x < x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= spans & crossing
    return inside


def _reference_mask(glyph: Glyph, box: OrientedBox, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    if glyph == Glyph.CIRCLE:
        r = min(box.width, box.height) / 2.0
        return (xs - box.center_x) ** 2 + (ys - box.center_y) ** 2 <= r * r
    if glyph == Glyph.RECTANGLE:
        hw, hh = box.width / 2.0, box.height / 2.0
        local = np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])
    else:
        local = AIRPLANE_POLYGON * np.array([box.width, box.height])
    return _even_odd(_canvas_polygon(local, box), xs, ys)


def test_instance_masks_match_an_independent_rasterizer():
    spec = SceneSpec()
    samples = generate_dataset(spec, 60, seed=77)
    for sample in samples:
        for box, cid, mask in zip(sample.layout.boxes, sample.layout.category_ids, sample.instance_masks):
            expected = _reference_mask(spec.category(cid).glyph, box, spec.canvas_size)
            np.testing.assert_array_equal(mask.pixels.astype(bool), expected, err_msg=sample.layout.scene_id)


def test_instance_masks_stay_inside_their_boxes():
    spec = SceneSpec()
    ys, xs = np.mgrid[0:32, 0:32] + 0.5
    for sample in generate_dataset(spec, 60, seed=78):
        for box, mask in zip(sample.layout.boxes, sample.instance_masks):
            dilated = OrientedBox(
                center_x=box.center_x, center_y=box.center_y, width=box.width + 2, height=box.height + 2, angle=box.angle
            )
            hw, hh = dilated.width / 2.0, dilated.height / 2.0
            local = np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])
            allowed = _even_odd(_canvas_polygon(local, dilated), xs, ys)
            assert mask.count() > 0
            assert not (mask.pixels.astype(bool) & ~allowed).any()


def test_disk_area_matches_pi_r_squared():
    rng = np.random.default_rng(12)
    for _ in range(50):
        r = float(rng.uniform(10, 25))
        box = OrientedBox(
            center_x=float(rng.uniform(r + 1, 63 - r)),
            center_y=float(rng.uniform(r + 1, 63 - r)),
            width=2 * r,
            height=2 * r,
            angle=float(rng.uniform(-np.pi / 2, np.pi / 2)),
        )
        area = glyph_mask(Glyph.CIRCLE, box, 64).sum()
        assert abs(area - np.pi * r * r) <= 0.03 * np.pi * r * r


def test_ten_thousand_boxes_stay_inside_a_64_canvas():
    spec = SceneSpec(canvas_size=64, num_objects_range=(5, 5))
    boxes = [box for seed in range(2000) for box in generate_layout(spec, seed=seed).boxes]
    assert len(boxes) == 10_000
    corners = np.stack([box_corners(box) for box in boxes])
    assert (corners >= 0).all() and (corners < 64).all()
    assert all(-np.pi / 2 <= box.angle < np.pi / 2 for box in boxes)
