import json
import math
import random

import numpy as np
import pytest

from soilseg import coco_data
from soilseg.coco_data import (
    SplitSpec,
    generate_synthetic_dataset,
    load_coco_dataset,
    polygon_to_mask,
    rasterize_polygons,
    split_dataset,
    train_count,
    validate_dataset,
    write_coco_layout,
)
from soilseg.errors import (
    DanglingReference,
    DegeneratePolygon,
    EmptyInput,
    MissingFile,
    SchemaError,
)

from conftest import square_annotation, write_layout
from oracles import rasterize_scalar


# -- loading ------------------------------------------------------------------

def test_load_synthetic_train(synth_root):
    ds = load_coco_dataset(synth_root, "train")
    assert len(ds.images) == 8
    assert len(ds.annotations) == 8
    assert [c.name for c in ds.categories] == ["soil"]
    assert ds.split == "train"


def test_load_78_image_layout(tmp_path):
    root = generate_synthetic_dataset(78, 32, seed=3, out_root=tmp_path / "d78")
    ds = load_coco_dataset(root, "train")
    assert len(ds.images) == 78


def test_load_missing_annotation_file(tmp_path):
    (tmp_path / "train2017").mkdir()
    with pytest.raises(MissingFile):
        load_coco_dataset(tmp_path, "train")


def test_load_missing_image_dir(tmp_path):
    write_layout(tmp_path, [{"id": 1, "file_name": "a.png", "width": 32, "height": 32}],
                 [square_annotation()])
    (tmp_path / "train2017" / "a.png").unlink()
    import shutil
    shutil.rmtree(tmp_path / "train2017")
    with pytest.raises(MissingFile):
        load_coco_dataset(tmp_path, "train")


def test_load_empty_images_is_schema_error(tmp_path):
    write_layout(tmp_path, [], [])
    with pytest.raises(SchemaError):
        load_coco_dataset(tmp_path, "train")


def test_load_wrong_type_is_schema_error(tmp_path):
    write_layout(tmp_path,
                 [{"id": "one", "file_name": "a.png", "width": 32, "height": 32}],
                 [])
    with pytest.raises(SchemaError):
        load_coco_dataset(tmp_path, "train")


def test_load_dangling_image_reference(tmp_path):
    write_layout(tmp_path, [{"id": 1, "file_name": "a.png", "width": 32, "height": 32}],
                 [square_annotation(image_id=99)])
    with pytest.raises(DanglingReference):
        load_coco_dataset(tmp_path, "train")
    # lenient mode leaves it to the validator
    ds = load_coco_dataset(tmp_path, "train", strict=False)
    codes = {v.code for v in validate_dataset(ds)}
    assert "dangling-image-ref" in codes


def test_load_missing_image_file(tmp_path):
    write_layout(tmp_path, [{"id": 1, "file_name": "a.png", "width": 32, "height": 32}],
                 [square_annotation()])
    (tmp_path / "train2017" / "a.png").unlink()
    with pytest.raises(MissingFile):
        load_coco_dataset(tmp_path, "train")


# -- validation ----------------------------------------------------------------

def test_validate_clean_synthetic(synth_train):
    assert validate_dataset(synth_train) == []


def test_validate_two_vertex_polygon(tmp_path):
    ann = square_annotation()
    ann["segmentation"] = [[2.0, 2.0, 10.0, 10.0]]  # 2 vertices
    write_layout(tmp_path, [{"id": 1, "file_name": "a.png", "width": 32, "height": 32}],
                 [ann])
    report = validate_dataset(load_coco_dataset(tmp_path, "train"))
    assert len(report) == 1
    assert report[0].code == "degenerate-polygon"
    assert report[0].annotation_id == 1


def test_validate_bbox_smaller_than_polygon(tmp_path):
    ann = square_annotation(x0=4.0, side=12.0)
    ann["bbox"] = [6.0, 6.0, 8.0, 8.0]  # clearly smaller than the vertex extent
    write_layout(tmp_path, [{"id": 1, "file_name": "a.png", "width": 32, "height": 32}],
                 [ann])
    report = validate_dataset(load_coco_dataset(tmp_path, "train"))
    # the independent check: vertex min/max computed directly
    xs = ann["segmentation"][0][0::2]
    ys = ann["segmentation"][0][1::2]
    x, y, w, h = ann["bbox"]
    assert x > min(xs) or y > min(ys) or x + w < max(xs) or y + h < max(ys)
    assert [v.code for v in report] == ["bbox-too-small"]
    assert report[0].annotation_id == 1


def test_validate_unannotated_image(tmp_path):
    write_layout(tmp_path,
                 [{"id": 1, "file_name": "a.png", "width": 32, "height": 32},
                  {"id": 2, "file_name": "b.png", "width": 32, "height": 32}],
                 [square_annotation(image_id=1)])
    report = validate_dataset(load_coco_dataset(tmp_path, "train"))
    assert [v.code for v in report] == ["unannotated-image"]
    assert report[0].image_id == 2


def test_validate_extra_category(tmp_path):
    write_layout(tmp_path, [{"id": 1, "file_name": "a.png", "width": 32, "height": 32}],
                 [square_annotation()],
                 categories=[{"id": 1, "name": "soil"}, {"id": 2, "name": "rock"}])
    codes = {v.code for v in validate_dataset(load_coco_dataset(tmp_path, "train"))}
    assert "bad-categories" in codes


def test_validate_out_of_bounds_polygon(tmp_path):
    ann = square_annotation(x0=28.0, side=10.0)  # exceeds the 32px image
    write_layout(tmp_path, [{"id": 1, "file_name": "a.png", "width": 32, "height": 32}],
                 [ann])
    codes = [v.code for v in validate_dataset(load_coco_dataset(tmp_path, "train"))]
    assert "out-of-bounds-polygon" in codes


def test_validate_reports_every_violation(tmp_path):
    bad_poly = square_annotation(ann_id=1, image_id=1)
    bad_poly["segmentation"] = [[1.0, 1.0, 5.0, 5.0]]
    bad_area = square_annotation(ann_id=2, image_id=1)
    bad_area["area"] = 0.0
    write_layout(tmp_path,
                 [{"id": 1, "file_name": "a.png", "width": 32, "height": 32},
                  {"id": 2, "file_name": "b.png", "width": 32, "height": 32}],
                 [bad_poly, bad_area])
    codes = sorted(v.code for v in validate_dataset(load_coco_dataset(tmp_path, "train")))
    assert codes == ["degenerate-polygon", "non-positive-area", "unannotated-image"]


# -- splitting -------------------------------------------------------------------

def test_split_111_at_70_30():
    train, val = split_dataset(list(range(1, 112)), SplitSpec(ratio=0.7, seed=42))
    assert (len(train), len(val)) == (78, 33)


def test_split_deterministic():
    ids = list(range(10))
    a = split_dataset(ids, SplitSpec(ratio=0.7, seed=9))
    b = split_dataset(ids, SplitSpec(ratio=0.7, seed=9))
    assert a == b
    c = split_dataset(ids, SplitSpec(ratio=0.7, seed=10))
    assert a != c  # overwhelmingly likely for 10 ids


def test_split_single_id():
    train, val = split_dataset([7], SplitSpec(ratio=0.7, seed=0))
    assert train == [7] and val == []


def test_split_empty_raises():
    with pytest.raises(EmptyInput):
        split_dataset([], SplitSpec(ratio=0.7, seed=0))


def test_split_duplicate_ids_raise():
    with pytest.raises(ValueError):
        split_dataset([1, 1, 2], SplitSpec(ratio=0.5, seed=0))


def test_split_ratio_validation():
    with pytest.raises(ValueError):
        SplitSpec(ratio=1.5, seed=0)
    with pytest.raises(ValueError):
        SplitSpec(ratio=0.0, seed=0)


def test_split_partition_property():
    rng = random.Random(123)
    for _ in range(40):
        n = rng.randint(1, 200)
        ratio = rng.choice([0.5, 0.7, 0.9])
        ids = rng.sample(range(10_000), n)
        train, val = split_dataset(ids, SplitSpec(ratio=ratio, seed=rng.randint(0, 99)))
        assert sorted(train + val) == sorted(ids)
        assert set(train).isdisjoint(val)
        assert len(train) == train_count(n, ratio) == math.floor(ratio * n + 0.5)


# -- rasterization ------------------------------------------------------------------

def test_rectangle_mask_against_point_in_rect():
    poly = [2.0, 2.0, 6.0, 2.0, 6.0, 5.0, 2.0, 5.0]
    mask = rasterize_polygons([poly], 8, 8)
    expected = np.zeros((8, 8), dtype=np.uint8)
    for row in range(8):
        for col in range(8):
            cx, cy = col + 0.5, row + 0.5
            if 2.0 < cx < 6.0 and 2.0 < cy < 5.0:
                expected[row, col] = 1
    assert np.array_equal(mask, expected)
    assert mask.sum() == 12


def test_full_image_polygon_is_all_ones():
    poly = [0.0, 0.0, 8.0, 0.0, 8.0, 8.0, 0.0, 8.0]
    assert rasterize_polygons([poly], 8, 8).all()


def test_degenerate_polygon_raises():
    with pytest.raises(DegeneratePolygon):
        rasterize_polygons([[1.0, 1.0, 4.0, 4.0]], 8, 8)
    with pytest.raises(DegeneratePolygon):
        rasterize_polygons([[1.0, 1.0, 4.0, 4.0, 2.0]], 8, 8)


def test_polygon_union_of_two_squares():
    a = [1.0, 1.0, 3.0, 1.0, 3.0, 3.0, 1.0, 3.0]
    b = [5.0, 5.0, 7.0, 5.0, 7.0, 7.0, 5.0, 7.0]
    mask = rasterize_polygons([a, b], 8, 8)
    assert mask.sum() == 8  # two 2x2 blocks
    assert mask[2, 2] == 1 and mask[6, 6] == 1 and mask[4, 4] == 0


def _random_polygon(rng: np.random.Generator, size: int) -> list[float]:
    n = int(rng.integers(3, 9))
    pts = rng.uniform(0.3, size - 0.3, (n, 2))
    return [float(v) for xy in pts for v in xy]


def test_rasterization_matches_bruteforce_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(50):
        w = int(rng.integers(4, 33))
        h = int(rng.integers(4, 33))
        polys = [_random_polygon(rng, min(w, h))
                 for _ in range(int(rng.integers(1, 3)))]
        assert np.array_equal(rasterize_polygons(polys, w, h),
                              rasterize_scalar(polys, w, h))


def test_mask_area_close_to_annotation_area(synth_train):
    for ann in synth_train.annotations:
        img = synth_train.image_by_id(ann.image_id)
        mask = polygon_to_mask(ann, img.width, img.height)
        perimeter = sum(coco_data.polygon_perimeter(p) for p in ann.segmentation)
        assert abs(int(mask.sum()) - ann.area) <= perimeter


# -- round trip and synthesis ---------------------------------------------------------

def test_round_trip_identity(synth_root, tmp_path):
    ds = load_coco_dataset(synth_root, "train")
    write_coco_layout(ds, tmp_path / "copy", "train")
    again = load_coco_dataset(tmp_path / "copy", "train")
    assert again.images == ds.images
    assert again.annotations == ds.annotations
    assert again.categories == ds.categories


def test_generate_synthetic_structure(tmp_path):
    root = generate_synthetic_dataset(20, 128, seed=7, out_root=tmp_path / "g")
    payload = json.loads(
        coco_data.annotation_file(root, "train").read_text(encoding="utf-8"))
    assert len(payload["images"]) == 20
    assert len(payload["annotations"]) == 20
    assert payload["categories"] == [{"id": 1, "name": "soil"}]
    for split in ("train", "val"):
        ds = load_coco_dataset(root, split)
        assert validate_dataset(ds) == []


def test_generate_synthetic_deterministic(tmp_path):
    a = generate_synthetic_dataset(5, 64, seed=3, out_root=tmp_path / "a")
    b = generate_synthetic_dataset(5, 64, seed=3, out_root=tmp_path / "b")
    for split in ("train", "val"):
        assert (coco_data.annotation_file(a, split).read_bytes()
                == coco_data.annotation_file(b, split).read_bytes())


def test_generate_synthetic_rejects_zero(tmp_path):
    with pytest.raises(EmptyInput):
        generate_synthetic_dataset(0, 64, seed=0, out_root=tmp_path / "z")
