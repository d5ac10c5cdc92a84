import json
from pathlib import Path

import numpy as np
import pytest

from soilseg import coco_data


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory) -> Path:
    """A small clean synthetic dataset shared by read-only tests."""
    root = tmp_path_factory.mktemp("synth") / "ds"
    coco_data.generate_synthetic_dataset(8, 96, seed=11, out_root=root, n_val=3)
    return root


@pytest.fixture(scope="session")
def synth_train(synth_root) -> coco_data.CocoDataset:
    return coco_data.load_coco_dataset(synth_root, "train")


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory) -> Path:
    """A very small, very low resolution dataset for training-loop tests."""
    root = tmp_path_factory.mktemp("tiny") / "ds"
    coco_data.generate_synthetic_dataset(6, 64, seed=5, out_root=root, n_val=2)
    return root


def write_layout(root: Path, images, annotations, categories=None,
                 split="train", image_size=32) -> Path:
    """Write an arbitrary (possibly broken) dataset tree for negative tests."""
    categories = categories if categories is not None else [
        {"id": 1, "name": "soil"}]
    ann_path = coco_data.annotation_file(root, split)
    ann_path.parent.mkdir(parents=True, exist_ok=True)
    ann_path.write_text(json.dumps({
        "images": images, "annotations": annotations, "categories": categories,
    }), encoding="utf-8")
    image_dir = root / f"{split}2017"
    image_dir.mkdir(parents=True, exist_ok=True)
    from PIL import Image
    for rec in images:
        if isinstance(rec, dict) and "file_name" in rec:
            arr = np.zeros((rec.get("height", image_size),
                            rec.get("width", image_size), 3), dtype=np.uint8)
            Image.fromarray(arr).save(image_dir / rec["file_name"])
    return root


def square_annotation(ann_id=1, image_id=1, x0=2.0, y0=2.0, side=10.0):
    poly = [x0, y0, x0 + side, y0, x0 + side, y0 + side, x0, y0 + side]
    return {
        "id": ann_id, "image_id": image_id, "category_id": 1,
        "segmentation": [poly],
        "bbox": [x0, y0, side, side],
        "area": side * side, "iscrowd": 0,
    }
