import json

import numpy as np
import pytest

from instcolor.colorspace import LabImage, lab_to_rgb, normalize_ab
from instcolor.data import (SHAPE_COLORS, generate_samples, instance_pairs, load_dataset,
                            write_fixture)


def test_generator_is_deterministic():
    a, b = generate_samples(3, 32, seed=7), generate_samples(3, 32, seed=7)
    for x, y in zip(a, b):
        assert np.array_equal(x.rgb, y.rgb) and x.boxes == y.boxes


def test_object_color_follows_class():
    # object lightness is 60 +- 15, so every object pixel takes one of two colors per class
    palette = {k: {tuple(lab_to_rgb(LabImage(np.array([[L]]), np.array([[[a]], [[b]]])),
                                    as_uint8=True)[0, 0]) for L in (45.0, 75.0)}
               for k, (a, b) in SHAPE_COLORS.items()}
    for s in generate_samples(6, 64, seed=1):
        for box, mask in zip(s.boxes, s.masks):
            assert {tuple(p) for p in s.rgb[mask]} <= palette[box.label]


def test_boxes_cover_masks():
    for s in generate_samples(6, 64, seed=2):
        assert 1 <= len(s.boxes) <= 3
        for box, mask in zip(s.boxes, s.masks):
            ys, xs = np.nonzero(mask)
            if ys.size:
                assert box.x0 <= xs.min() and xs.max() < box.x1
                assert box.y0 <= ys.min() and ys.max() < box.y1
            assert 0.3 <= box.confidence <= 1.0


def test_fixture_roundtrip(tmp_path):
    path = write_fixture(tmp_path, n=3, size=32, seed=4)
    doc = json.loads(path.read_text())
    assert len(doc["images"]) == 3
    loaded = load_dataset(path, load_masks=True)
    original = generate_samples(3, 32, seed=4)
    for x, y in zip(loaded, original):
        assert np.array_equal(x.rgb, y.rgb)
        assert [b.as_list() for b in x.boxes] == [b.as_list() for b in y.boxes]
        for m, n in zip(x.masks, y.masks):
            assert np.array_equal(m, n)


def test_load_resizes_images_and_boxes(tmp_path):
    path = write_fixture(tmp_path, n=2, size=64, seed=0)
    small = load_dataset(path, resolution=32)
    assert small[0].rgb.shape == (32, 32, 3)
    full = load_dataset(path)
    for s, f in zip(small, full):
        for bs, bf in zip(s.boxes, f.boxes):
            assert abs(bs.x0 - bf.x0 / 2) <= 0.5 and abs(bs.x1 - bf.x1 / 2) <= 0.5


def test_load_checks_image_size(tmp_path):
    path = write_fixture(tmp_path, n=1, size=32, seed=0)
    doc = json.loads(path.read_text())
    doc["images"][0]["width"] = 40
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        load_dataset(path)


def test_instance_pairs_shapes():
    s = generate_samples(1, 32, seed=0)[0]
    pairs = instance_pairs(s, s.boxes, 16)
    assert len(pairs) == len(s.boxes)
    for L, ab in pairs:
        assert L.shape == (1, 16, 16) and ab.shape == (2, 16, 16)
    assert float(s.ab.abs().max()) <= normalize_ab(128.0)
