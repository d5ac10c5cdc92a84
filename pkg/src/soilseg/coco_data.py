"""COCO2017-format dataset handling for single-class soil segmentation.

Covers loading and validating the on-disk layout::

    root/annotations/instances_train2017.json
    root/annotations/instances_val2017.json
    root/train2017/*.png|jpg
    root/val2017/*.png|jpg

plus the 7:3 random split, polygon rasterization, and a synthetic dataset
generator used for desk-scale testing when the real soil photos are not
available.
"""

from __future__ import annotations

import json
import logging
import math
import random
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    DanglingReference,
    DegeneratePolygon,
    EmptyInput,
    MissingFile,
    SchemaError,
)

logger = logging.getLogger(__name__)

SOIL_CATEGORY_ID = 1
SOIL_CATEGORY_NAME = "soil"

SPLITS = ("train", "val")


# -- domain types --------------------------------------------------------------

@dataclass(frozen=True)
class ImageRecord:
    """One entry of the COCO "images" array."""

    id: int
    file_name: str
    width: int
    height: int


@dataclass(frozen=True)
class PolygonAnnotation:
    """One entry of the COCO "annotations" array (polygon segmentation only).

    ``segmentation`` is a list of polygons, each a flat ``[x1, y1, x2, y2, ...]``
    list in pixel coordinates; ``bbox`` is ``(x, y, w, h)``.
    """

    id: int
    image_id: int
    category_id: int
    segmentation: tuple[tuple[float, ...], ...]
    bbox: tuple[float, float, float, float]
    area: float
    iscrowd: int = 0


@dataclass(frozen=True)
class CategoryDef:
    id: int
    name: str


@dataclass
class CocoDataset:
    """In-memory view of one split of a COCO-format dataset."""

    images: list[ImageRecord]
    annotations: list[PolygonAnnotation]
    categories: list[CategoryDef]
    root: Path | None = None
    split: str | None = None

    def image_by_id(self, image_id: int) -> ImageRecord:
        return self._image_index[image_id]

    def annotations_for(self, image_id: int) -> list[PolygonAnnotation]:
        return [a for a in self.annotations if a.image_id == image_id]

    @property
    def _image_index(self) -> dict[int, ImageRecord]:
        return {img.id: img for img in self.images}

    def image_dir(self) -> Path:
        if self.root is None or self.split is None:
            raise ValueError("dataset has no on-disk location")
        return Path(self.root) / f"{self.split}2017"

    def image_path(self, image_id: int) -> Path:
        return self.image_dir() / self.image_by_id(image_id).file_name

    def load_image(self, image_id: int) -> np.ndarray:
        """Load one image as an RGB uint8 array of shape (H, W, 3)."""
        with Image.open(self.image_path(image_id)) as im:
            return np.asarray(im.convert("RGB"))


@dataclass(frozen=True)
class SplitSpec:
    """Random train/val split: ``ratio`` is the train fraction."""

    ratio: float
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.ratio < 1.0:
            raise ValueError(f"split ratio must be in (0, 1), got {self.ratio}")


@dataclass(frozen=True)
class Violation:
    """One dataset invariant violation found by validate_dataset."""

    code: str
    message: str
    image_id: int | None = None
    annotation_id: int | None = None

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


ValidationReport = list  # list[Violation]; empty report means the dataset is valid


# -- loading -------------------------------------------------------------------

def annotation_file(root: Path | str, split: str) -> Path:
    return Path(root) / "annotations" / f"instances_{split}2017.json"


def _require(record: dict, key: str, kinds: type | tuple, where: str):
    if key not in record:
        raise SchemaError(f"{where}: missing required key '{key}'")
    value = record[key]
    if isinstance(value, bool) or not isinstance(value, kinds):
        raise SchemaError(
            f"{where}: key '{key}' has type {type(value).__name__}, expected "
            f"{kinds if isinstance(kinds, type) else '/'.join(k.__name__ for k in kinds)}"
        )
    return value


def _parse_polygons(raw, where: str) -> tuple[tuple[float, ...], ...]:
    if not isinstance(raw, list) or not all(isinstance(p, list) for p in raw):
        raise SchemaError(f"{where}: 'segmentation' must be a list of polygons")
    polygons = []
    for poly in raw:
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in poly):
            raise SchemaError(f"{where}: polygon coordinates must be numbers")
        polygons.append(tuple(float(v) for v in poly))
    return tuple(polygons)


def load_coco_dataset(root: Path | str, split: str, strict: bool = True) -> CocoDataset:
    """Load one split of a COCO2017-layout dataset.

    Args:
        root: dataset root containing ``annotations/`` and ``{split}2017/``.
        split: ``"train"`` or ``"val"``.
        strict: when True (default), dangling references and missing image
            files raise immediately; when False they are left for
            :func:`validate_dataset` to report, so a damaged tree can still
            be inspected.

    Returns:
        A cross-referenced :class:`CocoDataset`.

    Raises:
        MissingFile: annotation file or image directory absent (always), or a
            referenced image file absent (strict only).
        SchemaError: required key missing, wrong type, or empty images list.
        DanglingReference: annotation references an unknown image or category
            (strict only).
    """
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    root = Path(root)
    ann_path = annotation_file(root, split)
    image_dir = root / f"{split}2017"
    if not ann_path.is_file():
        raise MissingFile(f"annotation file not found: {ann_path}")
    if not image_dir.is_dir():
        raise MissingFile(f"image directory not found: {image_dir}")

    try:
        with ann_path.open(encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{ann_path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise SchemaError(f"{ann_path}: top level must be a JSON object")

    for key in ("images", "annotations", "categories"):
        if key not in data or not isinstance(data[key], list):
            raise SchemaError(f"{ann_path}: missing or non-list top-level key '{key}'")
    if not data["images"]:
        raise SchemaError(f"{ann_path}: 'images' list is empty")

    images = []
    for i, rec in enumerate(data["images"]):
        where = f"{ann_path} images[{i}]"
        images.append(ImageRecord(
            id=_require(rec, "id", int, where),
            file_name=_require(rec, "file_name", str, where),
            width=_require(rec, "width", int, where),
            height=_require(rec, "height", int, where),
        ))

    categories = []
    for i, rec in enumerate(data["categories"]):
        where = f"{ann_path} categories[{i}]"
        categories.append(CategoryDef(
            id=_require(rec, "id", int, where),
            name=_require(rec, "name", str, where),
        ))

    annotations = []
    for i, rec in enumerate(data["annotations"]):
        where = f"{ann_path} annotations[{i}]"
        bbox = _require(rec, "bbox", list, where)
        if len(bbox) != 4 or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in bbox
        ):
            raise SchemaError(f"{where}: 'bbox' must be [x, y, w, h]")
        annotations.append(PolygonAnnotation(
            id=_require(rec, "id", int, where),
            image_id=_require(rec, "image_id", int, where),
            category_id=_require(rec, "category_id", int, where),
            segmentation=_parse_polygons(_require(rec, "segmentation", list, where), where),
            bbox=tuple(float(v) for v in bbox),
            area=float(_require(rec, "area", (int, float), where)),
            iscrowd=int(rec.get("iscrowd", 0)),
        ))

    ds = CocoDataset(images=images, annotations=annotations, categories=categories,
                     root=root, split=split)

    if strict:
        image_ids = {img.id for img in images}
        category_ids = {cat.id for cat in categories}
        for ann in annotations:
            if ann.image_id not in image_ids:
                raise DanglingReference(
                    f"annotation {ann.id} references unknown image_id {ann.image_id}")
            if ann.category_id not in category_ids:
                raise DanglingReference(
                    f"annotation {ann.id} references unknown category_id {ann.category_id}")
        for img in images:
            path = image_dir / img.file_name
            if not path.is_file():
                raise MissingFile(f"image file not found: {path}")

    logger.debug("loaded %s split from %s: %d images, %d annotations",
                 split, root, len(images), len(annotations))
    return ds


# -- validation ----------------------------------------------------------------

def validate_dataset(ds: CocoDataset) -> list[Violation]:
    """Check every dataset invariant and report all violations found.

    Violations are data, not exceptions: an empty report means the dataset is
    valid. Checks cover id uniqueness, positive image sizes, image file
    existence (when the dataset has an on-disk root), reference integrity,
    the frozen single "soil" category, polygon vertex counts, coordinate
    bounds, bbox coverage of the polygon vertices, positive areas, and that
    every image carries at least one annotation (every soil photo contains
    soil).
    """
    report: list[Violation] = []

    image_ids = [img.id for img in ds.images]
    if len(image_ids) != len(set(image_ids)):
        report.append(Violation("duplicate-image-id", "image ids are not unique"))
    ann_ids = [a.id for a in ds.annotations]
    if len(ann_ids) != len(set(ann_ids)):
        report.append(Violation("duplicate-annotation-id", "annotation ids are not unique"))

    for img in ds.images:
        if img.id < 1:
            report.append(Violation("bad-image-id", f"image id {img.id} is not positive",
                                    image_id=img.id))
        if img.width < 1 or img.height < 1:
            report.append(Violation(
                "bad-image-size",
                f"image {img.id} has non-positive size {img.width}x{img.height}",
                image_id=img.id))
        if ds.root is not None and ds.split is not None:
            path = ds.image_dir() / img.file_name
            if not path.is_file():
                report.append(Violation(
                    "missing-image-file", f"image {img.id}: file not found: {path}",
                    image_id=img.id))

    expected = [CategoryDef(id=SOIL_CATEGORY_ID, name=SOIL_CATEGORY_NAME)]
    if ds.categories != expected:
        report.append(Violation(
            "bad-categories",
            f"categories must be exactly [{{id: 1, name: 'soil'}}], got "
            f"{[(c.id, c.name) for c in ds.categories]}"))

    known_images = {img.id: img for img in ds.images}
    known_categories = {c.id for c in ds.categories}
    annotated = set()
    for ann in ds.annotations:
        if ann.id < 1:
            report.append(Violation("bad-annotation-id",
                                    f"annotation id {ann.id} is not positive",
                                    annotation_id=ann.id))
        if ann.image_id not in known_images:
            report.append(Violation(
                "dangling-image-ref",
                f"annotation {ann.id} references unknown image_id {ann.image_id}",
                annotation_id=ann.id))
            continue
        annotated.add(ann.image_id)
        if ann.category_id not in known_categories:
            report.append(Violation(
                "dangling-category-ref",
                f"annotation {ann.id} references unknown category_id {ann.category_id}",
                annotation_id=ann.id))
        img = known_images[ann.image_id]
        report.extend(_check_geometry(ann, img))

    for img in ds.images:
        if img.id not in annotated:
            report.append(Violation(
                "unannotated-image", f"image {img.id} has no annotations",
                image_id=img.id))

    return report


def _check_geometry(ann: PolygonAnnotation, img: ImageRecord) -> list[Violation]:
    report = []
    if not ann.segmentation:
        report.append(Violation("empty-segmentation",
                                f"annotation {ann.id} has no polygons",
                                annotation_id=ann.id))
    all_x: list[float] = []
    all_y: list[float] = []
    for p_idx, poly in enumerate(ann.segmentation):
        if len(poly) < 6 or len(poly) % 2 != 0:
            report.append(Violation(
                "degenerate-polygon",
                f"annotation {ann.id} polygon {p_idx} has {len(poly)} numbers; "
                f"need an even count >= 6 (3 vertices)",
                annotation_id=ann.id))
            continue
        xs, ys = poly[0::2], poly[1::2]
        all_x.extend(xs)
        all_y.extend(ys)
        if min(xs) < 0 or max(xs) > img.width or min(ys) < 0 or max(ys) > img.height:
            report.append(Violation(
                "out-of-bounds-polygon",
                f"annotation {ann.id} polygon {p_idx} exceeds the "
                f"[0, {img.width}] x [0, {img.height}] image extent",
                annotation_id=ann.id))
    if all_x:
        x, y, w, h = ann.bbox
        tol = 1e-6  # float slack so [min, min, max-min, max-min] boxes never flag
        if w <= 0 or h <= 0:
            report.append(Violation(
                "degenerate-bbox",
                f"annotation {ann.id} bbox has non-positive extent {w}x{h}",
                annotation_id=ann.id))
        elif not (x <= min(all_x) + tol and y <= min(all_y) + tol
                  and x + w >= max(all_x) - tol and y + h >= max(all_y) - tol):
            report.append(Violation(
                "bbox-too-small",
                f"annotation {ann.id} bbox {ann.bbox} does not contain its "
                f"polygon vertices (extent x [{min(all_x)}, {max(all_x)}], "
                f"y [{min(all_y)}, {max(all_y)}])",
                annotation_id=ann.id))
    if ann.area <= 0:
        report.append(Violation("non-positive-area",
                                f"annotation {ann.id} area {ann.area} is not > 0",
                                annotation_id=ann.id))
    if ann.iscrowd != 0:
        report.append(Violation("crowd-annotation",
                                f"annotation {ann.id} has iscrowd={ann.iscrowd}; "
                                f"crowd annotations are not supported",
                                annotation_id=ann.id))
    return report


# -- splitting -------------------------------------------------------------------

def train_count(n: int, ratio: float) -> int:
    """Train-set size for an n-image pool: round(ratio * n), ties rounding up.

    111 images at ratio 0.7 give 78 (77.7 rounds up); floor would give 77.
    """
    return int(math.floor(ratio * n + 0.5))


def split_dataset(image_ids: list[int], spec: SplitSpec) -> tuple[list[int], list[int]]:
    """Randomly partition image ids into train and val sets.

    Deterministic for a fixed seed. The train set holds
    ``round(spec.ratio * len(image_ids))`` ids; the rest go to val.

    Raises:
        EmptyInput: no ids given.
        ValueError: duplicate ids.
    """
    if not image_ids:
        raise EmptyInput("cannot split an empty id list")
    if len(set(image_ids)) != len(image_ids):
        raise ValueError("image_ids contains duplicates")
    shuffled = list(image_ids)
    random.Random(spec.seed).shuffle(shuffled)
    n_train = train_count(len(shuffled), spec.ratio)
    return shuffled[:n_train], shuffled[n_train:]


# -- rasterization ---------------------------------------------------------------

def rasterize_polygons(polygons, width: int, height: int) -> np.ndarray:
    """Rasterize polygons to a binary mask (union, even-odd rule).

    A pixel (row, col) is set iff its center ``(col + 0.5, row + 0.5)`` lies
    inside any polygon under the even-odd (crossing parity) rule, tested with
    a ray cast in the +x direction.

    Args:
        polygons: iterable of flat ``[x1, y1, x2, y2, ...]`` coordinate lists.
        width, height: mask extent in pixels.

    Returns:
        uint8 array of shape (height, width) with values in {0, 1}.

    Raises:
        DegeneratePolygon: any polygon has fewer than 3 vertices.
    """
    mask = np.zeros((height, width), dtype=np.uint8)
    py = np.arange(height, dtype=np.float64)[:, None] + 0.5
    px = np.arange(width, dtype=np.float64)[None, :] + 0.5
    for poly in polygons:
        coords = np.asarray(poly, dtype=np.float64)
        if coords.size < 6 or coords.size % 2 != 0:
            raise DegeneratePolygon(
                f"polygon has {coords.size} numbers; need an even count >= 6")
        xs = coords[0::2]
        ys = coords[1::2]
        crossings = np.zeros((height, width), dtype=np.int64)
        n = len(xs)
        for i in range(n):
            x1, y1 = xs[i], ys[i]
            x2, y2 = xs[(i + 1) % n], ys[(i + 1) % n]
            if y1 == y2:
                continue  # horizontal edge never crosses a horizontal ray
            straddles = (y1 > py) != (y2 > py)  # (H, 1)
            x_at_py = x1 + (py - y1) * (x2 - x1) / (y2 - y1)  # (H, 1)
            crossings += straddles & (px < x_at_py)
        mask |= (crossings % 2 == 1).astype(np.uint8)
    return mask


def polygon_to_mask(ann: PolygonAnnotation, width: int, height: int) -> np.ndarray:
    """Rasterize one annotation's polygon list to a binary mask."""
    return rasterize_polygons(ann.segmentation, width, height)


# -- serialization ---------------------------------------------------------------

def dataset_to_json_dict(ds: CocoDataset) -> dict:
    return {
        "images": [
            {"id": i.id, "file_name": i.file_name, "width": i.width, "height": i.height}
            for i in ds.images
        ],
        "annotations": [
            {
                "id": a.id,
                "image_id": a.image_id,
                "category_id": a.category_id,
                "segmentation": [list(p) for p in a.segmentation],
                "bbox": list(a.bbox),
                "area": a.area,
                "iscrowd": a.iscrowd,
            }
            for a in ds.annotations
        ],
        "categories": [{"id": c.id, "name": c.name} for c in ds.categories],
    }


def _dump_json(payload: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_coco_layout(ds: CocoDataset, out_root: Path | str, split: str,
                      image_source: Path | None = None) -> Path:
    """Materialize a dataset as the standard on-disk layout under out_root.

    Image files are copied from ``image_source`` (default: the dataset's own
    image directory). Returns out_root.
    """
    out_root = Path(out_root)
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    if image_source is None:
        image_source = ds.image_dir()
    _dump_json(dataset_to_json_dict(ds), annotation_file(out_root, split))
    image_dir = out_root / f"{split}2017"
    image_dir.mkdir(parents=True, exist_ok=True)
    for img in ds.images:
        src = Path(image_source) / img.file_name
        if not src.is_file():
            raise MissingFile(f"image file not found: {src}")
        shutil.copyfile(src, image_dir / img.file_name)
    return out_root


# -- synthetic data ----------------------------------------------------------------

def _blob_polygon(rng: np.random.Generator, size: int) -> list[float]:
    """One irregular, non-self-intersecting star polygon roughly centered."""
    n_vert = int(rng.integers(12, 19))
    cx = size / 2 + rng.uniform(-0.05, 0.05) * size
    cy = size / 2 + rng.uniform(-0.05, 0.05) * size
    base_r = rng.uniform(0.36, 0.46) * size
    step = 2 * math.pi / n_vert
    angles = np.arange(n_vert) * step + rng.uniform(-0.3, 0.3, n_vert) * step
    radii = base_r * (1.0 + rng.uniform(-0.20, 0.20, n_vert))
    # light smoothing keeps the outline irregular but not spiky
    radii = (radii + np.roll(radii, 1) + np.roll(radii, -1)) / 3.0
    xs = np.clip(cx + radii * np.cos(angles), 1.0, size - 1.0)
    ys = np.clip(cy + radii * np.sin(angles), 1.0, size - 1.0)
    coords: list[float] = []
    for x, y in zip(xs, ys):
        coords.extend((round(float(x), 2), round(float(y), 2)))
    return coords


def shoelace_area(poly) -> float:
    xs = np.asarray(poly[0::2], dtype=np.float64)
    ys = np.asarray(poly[1::2], dtype=np.float64)
    return float(abs(np.dot(xs, np.roll(ys, -1)) - np.dot(ys, np.roll(xs, -1))) / 2.0)


def polygon_perimeter(poly) -> float:
    xs = np.asarray(poly[0::2], dtype=np.float64)
    ys = np.asarray(poly[1::2], dtype=np.float64)
    return float(np.sum(np.hypot(np.roll(xs, -1) - xs, np.roll(ys, -1) - ys)))


def _render_image(rng: np.random.Generator, size: int, mask: np.ndarray) -> np.ndarray:
    """Soil-colored blob on a noisy gray-green background."""
    bg_base = np.array([104.0, 112.0, 96.0]) + rng.uniform(-12, 12, 3)
    image = bg_base[None, None, :] + rng.normal(0.0, 16.0, (size, size, 3))
    soil_base = np.array([152.0, 92.0, 66.0]) + rng.uniform(-14, 14, 3)
    soil = soil_base[None, None, :] + rng.normal(0.0, 9.0, (size, size, 3))
    image = np.where(mask[:, :, None].astype(bool), soil, image)
    return np.clip(image, 0, 255).astype(np.uint8)


def _synthesize_split(rng: np.random.Generator, n_images: int, image_size: int,
                      out_root: Path, split: str, first_id: int) -> None:
    image_dir = out_root / f"{split}2017"
    image_dir.mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    for i in range(n_images):
        rec_id = first_id + i
        poly = _blob_polygon(rng, image_size)
        mask = rasterize_polygons([poly], image_size, image_size)
        pixels = _render_image(rng, image_size, mask)
        file_name = f"soil_{rec_id:04d}.png"
        Image.fromarray(pixels).save(image_dir / file_name)
        xs, ys = poly[0::2], poly[1::2]
        # floor/ceil to 2 decimals so the box always contains every vertex
        x = math.floor(min(xs) * 100) / 100
        y = math.floor(min(ys) * 100) / 100
        bbox = [x, y,
                math.ceil((max(xs) - x) * 100) / 100,
                math.ceil((max(ys) - y) * 100) / 100]
        images.append({"id": rec_id, "file_name": file_name,
                       "width": image_size, "height": image_size})
        annotations.append({
            "id": rec_id,
            "image_id": rec_id,
            "category_id": SOIL_CATEGORY_ID,
            "segmentation": [poly],
            "bbox": bbox,
            "area": round(shoelace_area(poly), 2),
            "iscrowd": 0,
        })
    payload = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": SOIL_CATEGORY_ID, "name": SOIL_CATEGORY_NAME}],
    }
    _dump_json(payload, annotation_file(out_root, split))


def generate_synthetic_dataset(n_images: int, image_size: int, seed: int,
                               out_root: Path | str, n_val: int | None = None) -> Path:
    """Write a synthetic soil-like dataset in the standard layout.

    The train split holds ``n_images`` images; a val split of ``n_val``
    images (default: scaled to the 7:3 train/val proportion, at least 1)
    is generated as well so the tree is complete. Each image is one
    irregular soil-colored blob on a textured background, with a polygon
    annotation that exactly matches the rendered blob. Deterministic for a
    fixed seed, down to the annotation-file bytes.

    Raises:
        EmptyInput: n_images < 1.
        OSError: out_root not writable.
    """
    if n_images < 1:
        raise EmptyInput(f"n_images must be >= 1, got {n_images}")
    if image_size < 16:
        raise ValueError(f"image_size must be >= 16, got {image_size}")
    if n_val is None:
        n_val = max(1, train_count(n_images, 3 / 7))
    out_root = Path(out_root)
    rng = np.random.default_rng(seed)
    _synthesize_split(rng, n_images, image_size, out_root, "train", first_id=1)
    _synthesize_split(rng, n_val, image_size, out_root, "val", first_id=n_images + 1)
    logger.info("synthetic dataset written to %s (%d train, %d val)",
                out_root, n_images, n_val)
    return out_root
