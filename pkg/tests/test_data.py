import collections

import numpy as np
import pytest

from fine_imitate.data import (DatasetSpec, Sample, format_kitti_line,
                               generate, load_jsonl, load_kitti_labels,
                               make_splits, parse_kitti_line, render_sample,
                               save_jsonl)
from fine_imitate.geometry import Box


def test_same_seed_same_dataset():
    spec = DatasetSpec(seed=3, num_images=12)
    a, b = generate(spec), generate(spec)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.gts == y.gts


def test_different_seed_differs():
    a = generate(DatasetSpec(seed=1, num_images=3))
    b = generate(DatasetSpec(seed=2, num_images=3))
    assert any(x.image.tobytes() != y.image.tobytes() for x, y in zip(a, b))


def test_per_image_seeding_is_order_independent():
    spec = DatasetSpec(seed=5, num_images=6)
    full = generate(spec)
    assert render_sample(spec, 4).image.tobytes() == full[4].image.tobytes()


def test_boxes_in_bounds_and_pixels_valid():
    spec = DatasetSpec(seed=0, num_images=100)
    for s in generate(spec):
        assert s.image.shape == (64, 64, 1)
        assert s.image.min() >= 0 and s.image.max() <= 1
        for b in s.gts:
            assert 0 <= b.x1 < b.x2 <= 64 and 0 <= b.y1 < b.y2 <= 64
            assert b.class_id in (0, 1, 2)


def test_class_frequencies_uniform():
    counts = collections.Counter(b.class_id for s in generate(DatasetSpec(seed=11, num_images=1000))
                                 for b in s.gts)
    total = sum(counts.values())
    for c in range(3):
        assert abs(counts[c] / total - 1 / 3) < 0.05


def test_crowding_produces_overlaps():
    def overlapping(spec):
        n = 0
        for s in generate(spec):
            for i, a in enumerate(s.gts):
                for b in s.gts[i + 1:]:
                    if min(a.x2, b.x2) > max(a.x1, b.x1) and min(a.y2, b.y2) > max(a.y1, b.y1):
                        n += 1
        return n

    assert overlapping(DatasetSpec(num_images=100, crowding=0.9)) > overlapping(
        DatasetSpec(num_images=100, crowding=0.0))


def test_splits_are_disjoint():
    train, test = make_splits(DatasetSpec(num_images=5), 3)
    assert len(train) == 5 and len(test) == 3
    assert not {s.image_id for s in train} & {s.image_id for s in test}


@pytest.mark.parametrize("kw", [dict(min_objects=3, max_objects=2), dict(crowding=1.5),
                                dict(classes=("hexagon",)), dict(min_size=80)])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        DatasetSpec(**kw)


def test_jsonl_empty(tmp_path):
    path = tmp_path / "a.jsonl"
    path.write_text("")
    assert load_jsonl(path) == []


def test_jsonl_one_line(tmp_path):
    path = tmp_path / "a.jsonl"
    path.write_text('{"image": "x.png", "boxes": [[1, 2, 3, 4, 0]]}\n')
    [s] = load_jsonl(path)
    assert s.gts == [Box(1, 2, 3, 4, 0)]
    assert s.image is None and s.image_path.endswith("x.png")


def test_jsonl_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "a.jsonl"
    path.write_text('{"image": "x.png", "boxes": []}\n{"image": "y.png", "boxes": [[1, 2]]}\n')
    with pytest.raises(ValueError, match=":2:"):
        load_jsonl(path)


def test_jsonl_round_trip_with_pixels(tmp_path):
    samples = generate(DatasetSpec(seed=4, num_images=5))
    save_jsonl(samples, tmp_path / "train.jsonl", image_dir=tmp_path / "images")
    loaded = load_jsonl(tmp_path / "train.jsonl")
    assert [s.image_id for s in loaded] == [s.image_id for s in samples]
    assert [s.gts for s in loaded] == [s.gts for s in samples]
    for a, b in zip(loaded, samples):
        assert a.image is None
        np.testing.assert_array_equal(a.load(), b.image)


KITTI = """Car 0.00 0 -1.58 10 20 110 220 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59
DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10
Pedestrian 0.00 0 0.21 423.17 173.67 433.17 224.03 1.87 0.50 0.90 -5.87 1.63 23.11 -0.04
Truck 0.00 0 -1.58 1 2 30 40 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59
"""


def test_kitti_labels(tmp_path):
    (tmp_path / "000001.txt").write_text(KITTI)
    [s] = load_kitti_labels(tmp_path)
    assert s.image_id == "000001"
    assert s.gts == [Box(10, 20, 110, 220, 0), Box(423.17, 173.67, 433.17, 224.03, 1)]


def test_kitti_bad_line(tmp_path):
    (tmp_path / "000002.txt").write_text("Car 0 0\n")
    with pytest.raises(ValueError, match="000002.txt:1"):
        load_kitti_labels(tmp_path)


def test_kitti_line_round_trip():
    for line in KITTI.strip().splitlines():
        obj = parse_kitti_line(line)
        again = parse_kitti_line(format_kitti_line(obj))
        assert again.type == obj.type
        assert again.bbox == obj.bbox
        assert [float(v) for v in line.split()[4:8]] == list(again.bbox)


def test_sample_without_pixels_raises():
    with pytest.raises(ValueError):
        Sample("x", []).load()
