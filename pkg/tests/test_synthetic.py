import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coordemb.detector import BoundingBox, jaccard
from coordemb.synthetic import (BACKGROUND, EDGE_MARGIN, AffineError, AffineTransform, CoordTaskSample,
                                SceneGenerationError, ShapeScene, SceneObject, affine_from_params,
                                apply_affine, coord_classification_eval, coord_regression_eval,
                                gen_coord_dataset, gen_shape_dataset, gen_shape_scene, read_raster,
                                read_scenes, size_tier, warp_image, write_raster, write_scenes)


def test_quadrant_2x2_example():
    train, test = gen_coord_dataset(2, 2, "quadrant", 0)
    assert [s.coordinate for s in test] == [(1, 1)]
    assert sorted(s.coordinate for s in train) == [(0, 0), (0, 1), (1, 0)]


def test_quadrant_16x16_counts():
    train, test = gen_coord_dataset(16, 16, "quadrant", 0)
    assert (len(train), len(test)) == (192, 64)
    assert all(r >= 8 and c >= 8 for r, c in (s.coordinate for s in test))


@pytest.mark.parametrize("split", ["quadrant", "uniform"])
def test_partition_sweep(split):
    for h in range(4, 17):
        for w in range(4, 17):
            train, test = gen_coord_dataset(h, w, split, seed=h * 31 + w)
            a = {s.coordinate for s in train}
            b = {s.coordinate for s in test}
            assert not a & b
            assert len(a) + len(b) == len(train) + len(test) == h * w
    train, test = gen_coord_dataset(8, 8, "uniform", 0)
    assert len(train) == 48


def test_uniform_split_deterministic():
    a = gen_coord_dataset(8, 8, "uniform", 5)
    b = gen_coord_dataset(8, 8, "uniform", 5)
    assert [s.coordinate for s in a[0]] == [s.coordinate for s in b[0]]
    assert [s.coordinate for s in a[1]] == [s.coordinate for s in b[1]]


def test_tiny_grid_rejected():
    with pytest.raises(ValueError):
        gen_coord_dataset(1, 3, "uniform", 0)


def test_sample_invariants():
    s = CoordTaskSample.at(2, 3, 4, 5)
    assert s.class_index == 13
    assert s.onehot_image.sum() == 1 and s.onehot_image[2, 3, 0] == 1


def test_classification_eval_oracle_and_constant():
    h = w = 8
    _, test = gen_coord_dataset(h, w, "uniform", 1)
    full = [CoordTaskSample.at(r, c, h, w) for r in range(h) for c in range(w)]

    def oracle(inputs):
        cols = np.rint((inputs[:, 0] + 1) * (w - 1) / 2).astype(int)
        rows = np.rint((inputs[:, 1] + 1) * (h - 1) / 2).astype(int)
        return np.eye(h * w)[rows * w + cols]

    assert coord_classification_eval(oracle, test, h, w) == 1.0

    def constant(inputs):
        return np.zeros((len(inputs), h * w))

    # ties go to index 0, so exactly one of the 64 one-per-class samples is right
    assert coord_classification_eval(constant, full, h, w) == 1 / 64
    assert coord_classification_eval(constant, test, h, w) == sum(s.class_index == 0 for s in test) / len(test)
    with pytest.raises(ValueError):
        coord_classification_eval(oracle, [], h, w)


def test_regression_eval_examples():
    test = [CoordTaskSample.at(0, 0, 3, 3)]
    assert math.isclose(coord_regression_eval(lambda im: np.zeros((len(im), 2)), test, 3, 3),
                        math.sqrt(2), abs_tol=1e-12)
    samples = [CoordTaskSample.at(r, c, 5, 7) for r in range(5) for c in range(7)]
    exact = np.array([s.normalized(5, 7) for s in samples])
    assert coord_regression_eval(lambda im: exact, samples, 5, 7) <= 1e-12


def test_single_object_scene():
    for seed in range(20):
        scene = gen_shape_scene(64, 64, 1, seed)
        assert len(scene.objects) == 1
        b = scene.objects[0].box
        assert 0 <= b.x1 < b.x2 <= 64 and 0 <= b.y1 < b.y2 <= 64
        assert scene.image.shape == (64, 64, 3)
        assert np.all(np.abs(scene.image) <= 1)


def test_edge_bias_places_small_objects_in_margin():
    n_small = 0
    for seed in range(100):
        scene = gen_shape_scene(64, 64, 3, seed, edge_bias=1.0)
        for o in scene.objects:
            if o.tier == "small":
                n_small += 1
                cx, cy = o.box.center
                assert (cx < EDGE_MARGIN * 64 or cx > (1 - EDGE_MARGIN) * 64
                        or cy < EDGE_MARGIN * 64 or cy > (1 - EDGE_MARGIN) * 64)
    assert n_small > 20


def test_scene_determinism_and_nonoverlap():
    a = gen_shape_scene(64, 64, 4, 123, 0.5)
    b = gen_shape_scene(64, 64, 4, 123, 0.5)
    assert a.image.tobytes() == b.image.tobytes()
    assert [o.box for o in a.objects] == [o.box for o in b.objects]
    for scene in gen_shape_dataset(50, seed=3):
        boxes = [o.box for o in scene.objects]
        for i in range(len(boxes)):
            for j in range(i):
                assert jaccard(boxes[i], boxes[j]) < 0.1
        for o in scene.objects:
            assert o.tier == size_tier(o.box.area, 64, 64)


def test_boxes_are_tight_to_rendered_pixels():
    for seed in range(10):
        scene = gen_shape_scene(64, 64, 1, seed)
        b = scene.objects[0].box
        # shape colors sit far from the textured background, which stays within 0.25 of it
        inside = np.abs(scene.image - BACKGROUND).max(axis=-1) > 0.4
        rows, cols = np.nonzero(inside)
        assert (cols.min(), rows.min(), cols.max() + 1, rows.max() + 1) == (b.x1, b.y1, b.x2, b.y2)


def test_all_tiers_present_in_dataset():
    tiers = {o.tier for s in gen_shape_dataset(100, seed=0) for o in s.objects}
    assert tiers == {"small", "medium", "large"}


def test_overcrowded_scene_fails():
    with pytest.raises(SceneGenerationError):
        gen_shape_scene(8, 8, 30, 0)


def _scene():
    return gen_shape_scene(32, 32, 3, 11)


def test_identity_affine_is_exact():
    scene = _scene()
    out = apply_affine(scene, AffineTransform.identity())
    assert np.max(np.abs(out.image - scene.image)) <= 1e-12
    assert [(o.box, o.class_id) for o in out.objects] == [(o.box, o.class_id) for o in scene.objects]


def test_translation_shifts_boxes():
    scene = ShapeScene(np.zeros((16, 16, 3)), [SceneObject(BoundingBox(2, 3, 6, 8), 1, "small"),
                                               SceneObject(BoundingBox(10, 10, 15, 15), 0, "small")])
    out = apply_affine(scene, AffineTransform.translation(2, 3))
    assert out.objects[0].box == BoundingBox(4, 6, 8, 11)
    # second box shifted to (12,13,17,18), clipped to (12,13,16,16): 12/25 of its area survives
    assert out.objects[1].box == BoundingBox(12, 13, 16, 16)


def test_rotation_90_about_center_hand_example():
    t = affine_from_params(1.0, 0.0, 90.0, 0.0, 0.0, 8, 8)
    scene = ShapeScene(np.zeros((8, 8, 3)), [SceneObject(BoundingBox(1, 2, 3, 4), 0, "small")])
    box = apply_affine(scene, t).objects[0].box
    # (x, y) -> (8 - y, x) about (4, 4): corners (1,2),(3,2),(1,4),(3,4) -> (6,1),(6,3),(4,1),(4,3)
    assert np.allclose(box.as_list(), [4, 1, 6, 3], rtol=0, atol=1e-12)


def test_singular_transform_rejected():
    with pytest.raises(AffineError):
        apply_affine(_scene(), AffineTransform.from_array([[1, 2, 0], [2, 4, 0]]))


def _roundtrip(t, box):
    scene = ShapeScene(np.zeros((64, 64, 3)), [SceneObject(box, 2, "medium")])
    fwd = apply_affine(scene, t)
    return apply_affine(ShapeScene(fwd.image, fwd.objects), t.inverse()).objects[0].box


@settings(max_examples=100, deadline=None)
@given(st.floats(0.7, 1.3), st.sampled_from([0.0, 90.0, 180.0, -90.0]),
       st.floats(-3, 3), st.floats(-3, 3))
def test_inverse_composition_restores_boxes(s, ang, tx, ty):
    # axis-preserving maps send boxes to boxes, so the hull step loses nothing
    box = BoundingBox(26.5, 25.0, 37.0, 35.25)
    back = _roundtrip(affine_from_params(s, 0.0, ang, tx, ty, 64, 64), box)
    assert np.allclose(back.as_list(), box.as_list(), rtol=0, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.7, 1.3), st.floats(-0.3, 0.3), st.floats(-180, 180),
       st.floats(-3, 3), st.floats(-3, 3))
def test_inverse_composition_contains_box(s, sh, ang, tx, ty):
    box = BoundingBox(28, 26, 36, 35)
    back = _roundtrip(affine_from_params(s, sh, ang, tx, ty, 64, 64), box)
    assert back.x1 <= box.x1 + 1e-9 and back.y1 <= box.y1 + 1e-9
    assert back.x2 >= box.x2 - 1e-9 and back.y2 >= box.y2 - 1e-9


def test_affine_about_center_keeps_center_fixed():
    t = affine_from_params(1.2, 0.1, 33.0, 0.0, 0.0, 48, 64)
    x, y = t.apply(np.array([32.0]), np.array([24.0]))
    assert abs(x[0] - 32) < 1e-12 and abs(y[0] - 24) < 1e-12


def test_warp_fills_background_outside():
    img = np.ones((8, 8, 3))
    out = warp_image(img, AffineTransform.translation(100, 0), fill=-0.6)
    assert np.all(out == -0.6)


def test_raster_roundtrip_and_format(tmp_path):
    arr = np.random.default_rng(0).normal(size=(3, 4, 2))
    path = tmp_path / "x.celf"
    write_raster(path, arr)
    raw = path.read_bytes()
    assert raw[:4] == b"CELF"
    assert np.frombuffer(raw[4:16], dtype="<u4").tolist() == [3, 4, 2]
    assert len(raw) == 16 + 8 * 24
    assert read_raster(path).tobytes() == arr.tobytes()
    path.write_bytes(b"XELF" + raw[4:])
    with pytest.raises(ValueError):
        read_raster(path)


def test_scene_serialization_roundtrip(tmp_path):
    scenes = gen_shape_dataset(5, 32, 32, seed=2)
    write_scenes(tmp_path, scenes)
    back = read_scenes(tmp_path)
    for a, b in zip(scenes, back):
        assert a.image.tobytes() == b.image.tobytes()
        assert a.objects == b.objects
    rec = (tmp_path / "scenes.jsonl").read_text().splitlines()[0]
    assert set(json.loads(rec)) == {"image", "boxes", "class_ids", "tiers"}
