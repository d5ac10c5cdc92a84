import numpy as np
import pytest

from soilseg.coco_data import load_coco_dataset, polygon_to_mask
from soilseg.errors import EmptyIntersection, NoSoilDetected, ShapeMismatch
from soilseg.evaluation import OracleModel
from soilseg.model_core import DetectionResult, ModelConfig
from soilseg.postprocess import (
    CropRect,
    apply_mask_whiten,
    binarize_mask,
    compose_artifact,
    detection_box_to_rect,
    min_circumscribed_rect,
    segment_image,
    select_primary_detection,
)


def _det(score=0.9, label=1, box=(1.0, 1.0, 6.0, 6.0), mask=None, size=8):
    if mask is None:
        mask = np.zeros((size, size))
        mask[2:5, 2:5] = 1.0
    return DetectionResult(box=box, score=score, label=label, mask_prob=mask)


# -- binarize ---------------------------------------------------------------------

def test_binarize_extremes():
    assert binarize_mask(np.full((3, 3), 0.9)).all()
    assert not binarize_mask(np.full((3, 3), 0.1)).any()


def test_binarize_boundary_inclusive():
    assert binarize_mask(np.full((2, 2), 0.5), threshold=0.5).all()


def test_binarize_monotone_in_threshold():
    rng = np.random.default_rng(3)
    prob = rng.uniform(0, 1, (10, 10))
    previous = binarize_mask(prob, 0.1)
    for thr in (0.3, 0.5, 0.7, 0.9):
        current = binarize_mask(prob, thr)
        assert np.all(current <= previous)  # raising the threshold never adds pixels
        previous = current


# -- primary detection --------------------------------------------------------------

def test_select_highest_score():
    dets = [_det(score=0.91), _det(score=0.40)]
    assert select_primary_detection(dets) is dets[0]


def test_select_empty_raises():
    with pytest.raises(NoSoilDetected):
        select_primary_detection([])


def test_select_tie_keeps_input_order():
    dets = [_det(score=0.8), _det(score=0.8)]
    assert select_primary_detection(dets) is dets[0]


def test_select_respects_threshold_and_label():
    with pytest.raises(NoSoilDetected):
        select_primary_detection([_det(score=0.49)], score_threshold=0.5)
    with pytest.raises(NoSoilDetected):
        select_primary_detection([_det(score=0.9, label=2)])


# -- whitening -----------------------------------------------------------------------

def _image(size=8):
    rng = np.random.default_rng(1)
    return rng.integers(0, 255, (size, size, 3), dtype=np.uint8)


def test_whiten_all_ones_keeps_original():
    image = _image()
    out = apply_mask_whiten(image, np.ones(image.shape[:2], dtype=np.uint8))
    assert np.array_equal(out, image)


def test_whiten_all_zeros_is_white():
    image = _image()
    out = apply_mask_whiten(image, np.zeros(image.shape[:2], dtype=np.uint8))
    assert np.all(out == 255)


def test_whiten_checkerboard_matches_scalar_loop():
    image = _image(6)
    mask = np.indices((6, 6)).sum(axis=0) % 2
    out = apply_mask_whiten(image, mask.astype(np.uint8))
    for r in range(6):
        for c in range(6):
            for ch in range(3):
                want = image[r, c, ch] if mask[r, c] else 255
                assert out[r, c, ch] == want


def test_whiten_idempotent():
    image = _image()
    mask = (np.arange(64).reshape(8, 8) % 3 == 0).astype(np.uint8)
    once = apply_mask_whiten(image, mask)
    twice = apply_mask_whiten(once, mask)
    assert np.array_equal(once, twice)


def test_whiten_partition_random():
    rng = np.random.default_rng(9)
    for _ in range(10):
        image = rng.integers(0, 255, (7, 5, 3), dtype=np.uint8)
        mask = rng.integers(0, 2, (7, 5)).astype(np.uint8)
        out = apply_mask_whiten(image, mask)
        assert np.array_equal(out[mask == 1], image[mask == 1])
        assert np.all(out[mask == 0] == 255)


def test_whiten_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        apply_mask_whiten(_image(8), np.zeros((4, 4)))
    with pytest.raises(ShapeMismatch):
        apply_mask_whiten(np.zeros((4, 4)), np.zeros((4, 4)))


# -- crop rectangle ---------------------------------------------------------------------

def test_rect_full_mask_full_box():
    mask = np.ones((8, 8), dtype=np.uint8)
    rect = min_circumscribed_rect(mask, CropRect(0, 0, 8, 8))
    assert rect == CropRect(0, 0, 8, 8)


def test_rect_single_pixel():
    mask = np.zeros((10, 10), dtype=np.uint8)
    mask[7, 3] = 1
    rect = min_circumscribed_rect(mask, CropRect(0, 0, 10, 10))
    assert rect == CropRect(3, 7, 4, 8)


def test_rect_l_shape_clipped_to_vertical_arm():
    mask = np.zeros((12, 12), dtype=np.uint8)
    mask[2:10, 2:4] = 1   # vertical arm
    mask[8:10, 2:9] = 1   # horizontal arm
    box = CropRect(1, 1, 5, 11)  # covers only the vertical arm
    rect = min_circumscribed_rect(mask, box)
    # oracle: scan every set pixel inside the box
    rows = [r for r in range(12) for c in range(12)
            if mask[r, c] and box.x1 <= c < box.x2 and box.y1 <= r < box.y2]
    cols = [c for r in range(12) for c in range(12)
            if mask[r, c] and box.x1 <= c < box.x2 and box.y1 <= r < box.y2]
    assert rect == CropRect(min(cols), min(rows), max(cols) + 1, max(rows) + 1)


def test_rect_empty_intersection():
    mask = np.zeros((8, 8), dtype=np.uint8)
    mask[0, 0] = 1
    with pytest.raises(EmptyIntersection):
        min_circumscribed_rect(mask, CropRect(4, 4, 8, 8))


def test_rect_minimality_and_containment_random():
    rng = np.random.default_rng(31)
    for _ in range(25):
        mask = (rng.uniform(0, 1, (12, 12)) < 0.2).astype(np.uint8)
        x1, y1 = rng.integers(0, 6, 2)
        x2 = int(rng.integers(x1 + 2, 13))
        y2 = int(rng.integers(y1 + 2, 13))
        box = CropRect(int(x1), int(y1), x2, y2)
        inside = mask.copy()
        inside[:box.y1] = 0
        inside[box.y2:] = 0
        inside[:, :box.x1] = 0
        inside[:, box.x2:] = 0
        if not inside.any():
            with pytest.raises(EmptyIntersection):
                min_circumscribed_rect(mask, box)
            continue
        rect = min_circumscribed_rect(mask, box)
        # containment in box and image
        assert box.x1 <= rect.x1 < rect.x2 <= box.x2
        assert box.y1 <= rect.y1 < rect.y2 <= box.y2
        # every border row/column of the rect holds at least one set pixel,
        # so shrinking any side would drop one
        assert inside[rect.y1, rect.x1:rect.x2].any()
        assert inside[rect.y2 - 1, rect.x1:rect.x2].any()
        assert inside[rect.y1:rect.y2, rect.x1].any()
        assert inside[rect.y1:rect.y2, rect.x2 - 1].any()


def test_crop_rect_validation():
    with pytest.raises(ValueError):
        CropRect(3, 3, 3, 5)


def test_detection_box_to_rect_clips():
    rect = detection_box_to_rect((-2.5, 1.2, 4.8, 9.9), width=8, height=8)
    assert rect == CropRect(0, 1, 5, 8)


# -- full composition ----------------------------------------------------------------------

def test_compose_artifact_invariants():
    image = _image(8)
    det = _det(score=0.95)
    artifact = compose_artifact(image, [det], 0.5, 0.5)
    mask = binarize_mask(det.mask_prob, 0.5)
    assert np.array_equal(artifact.composite[mask == 1], image[mask == 1])
    assert np.all(artifact.composite[mask == 0] == 255)
    rect = artifact.crop_rect
    assert artifact.cropped.shape == (rect.height, rect.width, 3)
    assert np.array_equal(artifact.cropped,
                          artifact.composite[rect.y1:rect.y2, rect.x1:rect.x2])
    assert artifact.score == 0.95
    assert artifact.mask_area == int(mask.sum())


def test_compose_artifact_empty_mask_raises_no_soil():
    image = _image(8)
    det = _det(score=0.9, mask=np.zeros((8, 8)))
    with pytest.raises(NoSoilDetected):
        compose_artifact(image, [det], 0.5, 0.5)


def test_segment_image_with_oracle(synth_root):
    ds = load_coco_dataset(synth_root, "train")
    oracle = OracleModel.from_dataset(ds)
    img_rec = ds.images[0]
    image = ds.load_image(img_rec.id)
    artifact = segment_image(oracle, image, ModelConfig(pretrained_backbone=False))
    gt_mask = polygon_to_mask(ds.annotations_for(img_rec.id)[0],
                              img_rec.width, img_rec.height)
    # oracle mask is the GT mask: composite is exact
    assert np.array_equal(artifact.composite[gt_mask == 1], image[gt_mask == 1])
    assert np.all(artifact.composite[gt_mask == 0] == 255)
    # the crop covers the ground-truth blob
    covered = gt_mask[artifact.crop_rect.y1:artifact.crop_rect.y2,
                      artifact.crop_rect.x1:artifact.crop_rect.x2].sum()
    assert covered >= 0.95 * gt_mask.sum()


def test_segment_image_no_detection(synth_root):
    ds = load_coco_dataset(synth_root, "train")
    image = ds.load_image(ds.images[0].id)
    with pytest.raises(NoSoilDetected):
        segment_image(OracleModel(), image, ModelConfig(pretrained_backbone=False))
