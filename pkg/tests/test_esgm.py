import math

import numpy as np
import pytest
from scipy import ndimage

from esgm_service import (
    augment_shape,
    build_mask_pool,
    compose_condition,
    extract_instance_mask,
    fit_scale,
    layout_box_condition,
    load_mask_pool,
    sample_shape_condition,
    save_mask_pool,
    training_shape_condition,
)
from exceptions import ContractError, CorruptDatasetError, EmptyCategoryError, PoolMissError
from models.scene import Category, DatasetManifest, Glyph, Layout, OrientedBox, SceneSpec
from models.shapes import InstancePatchMask, MaskPool
from scene_service import generate_dataset, generate_layout, glyph_mask, load_manifest, render_scene, write_dataset
from util.geometry import inside_box, pixel_centers


def _patch(glyph: Glyph, box: OrientedBox, category_id: int = 0) -> InstancePatchMask:
    pixels = glyph_mask(glyph, box, 32)
    ys, xs = np.nonzero(pixels)
    x0, y0 = int(xs.min()), int(ys.min())
    return InstancePatchMask(
        pixels=pixels[y0:ys.max() + 1, x0:xs.max() + 1], source_box=box, category_id=category_id, origin=(x0, y0)
    )


def _pool_dataset(directory, seed: int = 21):
    spec = SceneSpec(num_objects_range=(3, 4))
    return write_dataset(generate_dataset(spec, 12, seed=seed), directory, seed=seed, spec=spec)


def test_training_condition_reproduces_composite():
    spec = SceneSpec()
    for sample in generate_dataset(spec, 10, seed=4):
        assert training_shape_condition(sample) == sample.composite_mask


def test_extract_crop_matches_instance_mask():
    spec = SceneSpec()
    sample = generate_dataset(spec, 1, seed=8)[0]
    patch = extract_instance_mask(sample, 0)
    assert patch.pixels.sum() == sample.instance_masks[0].count()
    with pytest.raises(ContractError):
        extract_instance_mask(sample, len(sample.layout.boxes))


def test_identity_augmentation_is_exact():
    box = OrientedBox(center_x=15, center_y=14, width=10, height=7, angle=0.3)
    patch = _patch(Glyph.RECTANGLE, box)
    out = augment_shape(patch, 0.0, box, 32)
    np.testing.assert_array_equal(out.pixels, glyph_mask(Glyph.RECTANGLE, box, 32))


@pytest.mark.parametrize("turns", [1, 2, 3])
def test_quarter_turns_preserve_pixel_count(turns):
    box = OrientedBox(center_x=16, center_y=16, width=10, height=10, angle=0.0)
    inner = OrientedBox(center_x=16, center_y=16, width=6, height=4, angle=0.0)
    pixels = glyph_mask(Glyph.RECTANGLE, inner, 32)
    ys, xs = np.nonzero(pixels)
    patch = InstancePatchMask(
        pixels=pixels[ys.min():ys.max() + 1, xs.min():xs.max() + 1],
        source_box=box,
        category_id=0,
        origin=(int(xs.min()), int(ys.min())),
    )
    out = augment_shape(patch, turns * math.pi / 2, box, 32)
    assert out.count() == pixels.sum()


def test_arbitrary_angle_area_within_tolerance():
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(200):
        src = OrientedBox(
            center_x=16, center_y=16, width=float(rng.uniform(10, 11)), height=float(rng.uniform(10, 11)),
            angle=float(rng.uniform(-math.pi / 2, math.pi / 2)),
        )
        target = OrientedBox(
            center_x=float(rng.uniform(12, 20)), center_y=float(rng.uniform(12, 20)),
            width=float(rng.uniform(11, 13)), height=float(rng.uniform(11, 13)),
            angle=float(rng.uniform(-math.pi / 2, math.pi / 2)),
        )
        patch = _patch(Glyph.CIRCLE, src)
        angle = float(rng.uniform(0, 2 * math.pi))
        scale = fit_scale(patch, angle, target)
        expected = patch.pixels.sum() * scale**2
        if expected < 100:
            continue
        out = augment_shape(patch, angle, target, 32)
        assert abs(out.count() - expected) <= 0.1 * expected
        checked += 1
    assert checked > 40


def test_augmented_mask_stays_inside_dilated_target():
    rng = np.random.default_rng(1)
    spec = SceneSpec()
    samples = generate_dataset(spec, 5, seed=2)
    x, y = pixel_centers(32, 32)
    for sample in samples:
        for i in range(len(sample.layout.boxes)):
            patch = extract_instance_mask(sample, i)
            target = OrientedBox(
                center_x=float(rng.uniform(11, 21)),
                center_y=float(rng.uniform(11, 21)),
                width=patch.source_box.width,
                height=patch.source_box.height,
                angle=float(rng.uniform(-math.pi / 2, math.pi / 2)),
            )
            out = augment_shape(patch, float(rng.uniform(0, 2 * math.pi)), target, 32)
            assert out.count() > 0
            outside = out.pixels.astype(bool) & ~inside_box(target, x, y, dilation=1.0)
            assert not outside.any()


def test_target_box_outside_canvas_rejected():
    box = OrientedBox(center_x=16, center_y=16, width=8, height=8)
    patch = _patch(Glyph.CIRCLE, box)
    with pytest.raises(ContractError):
        augment_shape(patch, 0.0, OrientedBox(center_x=2, center_y=2, width=8, height=8), 32)


def test_compose_is_union():
    a_box = OrientedBox(center_x=8, center_y=8, width=6, height=6)
    b_box = OrientedBox(center_x=22, center_y=22, width=8, height=8)
    a, b = _patch(Glyph.CIRCLE, a_box), _patch(Glyph.RECTANGLE, b_box)
    composed = compose_condition([a, b], [0.0, 0.0], [a_box, b_box], 32)
    separate = augment_shape(a, 0.0, a_box, 32) | augment_shape(b, 0.0, b_box, 32)
    assert composed == separate


def test_layout_box_condition_fills_boxes():
    box = OrientedBox(center_x=10, center_y=10, width=6, height=4)
    condition = layout_box_condition(Layout(boxes=[box], category_ids=[0]), 32)
    assert condition.count() == 24


def test_pool_build_save_load_and_sample(tmp_path):
    manifest = _pool_dataset(tmp_path / "data")
    pool = build_mask_pool(manifest)
    assert pool.provenance == manifest.digest
    assert pool.categories() == [0, 1, 2]
    instances = [f for f in manifest.files if f.startswith("masks/") and not f.endswith("_composite.pgm")]
    assert sum(pool.counts().values()) == len(instances)

    save_mask_pool(pool, tmp_path / "pool")
    loaded = load_mask_pool(tmp_path / "pool")
    assert loaded.counts() == pool.counts()
    assert loaded.canvas_size == pool.canvas_size

    cid = loaded.categories()[0]
    layout = Layout(boxes=[OrientedBox(center_x=16, center_y=16, width=12, height=12)], category_ids=[cid])
    a = sample_shape_condition(layout, loaded, seed=3)
    b = sample_shape_condition(layout, loaded, seed=3)
    assert a == b and a.count() > 0


def test_pool_miss_and_empty_category(tmp_path):
    pool = MaskPool(entries={}, provenance="x", canvas_size=32)
    layout = Layout(boxes=[OrientedBox(center_x=16, center_y=16, width=8, height=8)], category_ids=[1])
    with pytest.raises(PoolMissError) as err:
        sample_shape_condition(layout, pool, seed=0)
    assert err.value.category_id == 1

    spec = SceneSpec(categories=[Category(id=0, glyph=Glyph.CIRCLE, size_range=(5, 8)),
                                 Category(id=9, glyph=Glyph.RECTANGLE, size_range=(6, 8))])
    only_circles = SceneSpec(categories=[spec.categories[0]])
    samples = [render_scene(generate_layout(only_circles, seed=s), only_circles, s) for s in range(2)]
    manifest = write_dataset(samples, tmp_path / "d", seed=0, spec=spec)
    with pytest.raises(EmptyCategoryError) as err:
        build_mask_pool(manifest)
    assert err.value.category_ids == [9]


def test_pool_digest_mismatch(dataset_dir):
    manifest = load_manifest(dataset_dir)
    stale = DatasetManifest(**{**manifest.model_dump(), "digest": "0" * 64})
    with pytest.raises(CorruptDatasetError):
        build_mask_pool(stale)


def test_empty_layout_gives_empty_condition():
    pool = MaskPool(entries={}, provenance="x", canvas_size=32)
    assert sample_shape_condition(Layout(), pool, seed=0).count() == 0
    assert layout_box_condition(Layout(), 32).count() == 0


def test_single_box_condition_is_one_8_connected_component(tmp_path):
    pool = build_mask_pool(_pool_dataset(tmp_path / "data"))
    checked = 0
    for sample in generate_dataset(SceneSpec(), 40, seed=31):
        for i, (box, cid) in enumerate(zip(sample.layout.boxes, sample.layout.category_ids)):
            condition = sample_shape_condition(Layout(boxes=[box], category_ids=[cid]), pool, seed=100 + i)
            _, count = ndimage.label(condition.pixels, structure=np.ones((3, 3), dtype=int))
            assert count == 1, (sample.layout.scene_id, i)
            checked += 1
    assert checked >= 40
