"""Mask post-processing: whiten the background, crop the tight soil rectangle.

The composite keeps original pixels where the binary mask is set and paints
everything else white (255, 255, 255). The final crop is the minimum
circumscribed rectangle: the tight axis-aligned bound of the mask pixels
that survive clipping to the predicted detection box.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from math import ceil, floor
from pathlib import Path

import numpy as np
from PIL import Image

from . import model_core
from .errors import EmptyIntersection, NoSoilDetected, ShapeMismatch
from .model_core import DetectionResult, ModelConfig

WHITE = 255


@dataclass(frozen=True)
class CropRect:
    """Integer pixel rectangle, inclusive x1/y1 and exclusive x2/y2."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self) -> None:
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate crop rect {self}")

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass
class SegmentationArtifact:
    """Final segmentation output for one image.

    ``composite`` is the whitened full-frame image, ``cropped`` is the
    composite restricted to ``crop_rect``, and ``score`` is the detection
    confidence that produced the mask.
    """

    composite: np.ndarray
    crop_rect: CropRect
    cropped: np.ndarray
    score: float
    mask_area: int = 0


def binarize_mask(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold a probability map into a {0, 1} uint8 mask.

    The boundary is inclusive: a pixel exactly at the threshold is set, so a
    maximally uncertain map still binarizes deterministically.
    """
    prob = np.asarray(prob)
    return (prob >= threshold).astype(np.uint8)


def select_primary_detection(dets: list[DetectionResult],
                             score_threshold: float = 0.5) -> DetectionResult:
    """The highest-scoring soil detection at or above the threshold.

    Score ties keep the earliest detection in input order. Soil photos carry
    one dominant region, so a single detection drives the whole output.

    Raises:
        NoSoilDetected: nothing with the soil label clears the threshold.
    """
    best: DetectionResult | None = None
    for det in dets:
        if det.label != model_core.SOIL_LABEL or det.score < score_threshold:
            continue
        if best is None or det.score > best.score:
            best = det
    if best is None:
        raise NoSoilDetected(
            f"no soil detection with score >= {score_threshold} "
            f"among {len(dets)} detections")
    return best


def apply_mask_whiten(original: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Keep original pixels where the mask is set; paint the rest white.

    Element-wise masking of each channel: where mask=1 the output equals the
    original exactly, where mask=0 all three channels become 255.
    """
    original = np.asarray(original)
    mask = np.asarray(mask)
    if original.ndim != 3 or original.shape[2] != 3:
        raise ShapeMismatch(f"expected an (H, W, 3) image, got {original.shape}")
    if mask.shape != original.shape[:2]:
        raise ShapeMismatch(
            f"mask {mask.shape} does not match image {original.shape[:2]}")
    composite = original.copy()
    composite[mask == 0] = WHITE
    return composite


def min_circumscribed_rect(mask: np.ndarray, predicted_box: CropRect) -> CropRect:
    """Tight bounding rectangle of the mask pixels inside the predicted box.

    The mask is clipped to the box first; the result is the min/max row and
    column of the surviving set pixels, so the crop is always contained in
    the box and cannot be shrunk without losing a set pixel.

    Raises:
        EmptyIntersection: no set pixel inside the box.
    """
    mask = np.asarray(mask)
    h, w = mask.shape
    x1 = max(0, predicted_box.x1)
    y1 = max(0, predicted_box.y1)
    x2 = min(w, predicted_box.x2)
    y2 = min(h, predicted_box.y2)
    if x1 >= x2 or y1 >= y2:
        raise EmptyIntersection("predicted box lies outside the image")
    clipped = mask[y1:y2, x1:x2]
    rows = np.any(clipped, axis=1)
    cols = np.any(clipped, axis=0)
    if not rows.any():
        raise EmptyIntersection("no mask pixel inside the predicted box")
    r_idx = np.where(rows)[0]
    c_idx = np.where(cols)[0]
    return CropRect(x1=x1 + int(c_idx[0]), y1=y1 + int(r_idx[0]),
                    x2=x1 + int(c_idx[-1]) + 1, y2=y1 + int(r_idx[-1]) + 1)


def detection_box_to_rect(box: tuple[float, float, float, float],
                          width: int, height: int) -> CropRect:
    """Continuous detection box -> integer pixel rect clipped to the image."""
    x1 = max(0, floor(box[0]))
    y1 = max(0, floor(box[1]))
    x2 = min(width, ceil(box[2]))
    y2 = min(height, ceil(box[3]))
    return CropRect(x1=x1, y1=y1, x2=max(x2, x1 + 1), y2=max(y2, y1 + 1))


def compose_artifact(image: np.ndarray, dets: list[DetectionResult],
                     score_threshold: float = 0.5,
                     mask_threshold: float = 0.5) -> SegmentationArtifact:
    """Post-processing stage of segment_image, starting from raw detections."""
    det = select_primary_detection(dets, score_threshold)
    mask = binarize_mask(det.mask_prob, mask_threshold)
    composite = apply_mask_whiten(image, mask)
    h, w = image.shape[:2]
    box_rect = detection_box_to_rect(det.box, w, h)
    try:
        crop_rect = min_circumscribed_rect(mask, box_rect)
    except EmptyIntersection as exc:
        raise NoSoilDetected(
            "detection cleared the score threshold but its binarized mask "
            "is empty inside the predicted box") from exc
    cropped = composite[crop_rect.y1:crop_rect.y2, crop_rect.x1:crop_rect.x2].copy()
    return SegmentationArtifact(composite=composite, crop_rect=crop_rect,
                                cropped=cropped, score=det.score,
                                mask_area=int(mask.sum()))


def segment_image(model, image: np.ndarray,
                  cfg: ModelConfig | None = None) -> SegmentationArtifact:
    """Full single-image pipeline: detect, whiten the background, crop.

    Raises:
        NoSoilDetected: no usable soil region in the image.
    """
    if cfg is None:
        cfg = getattr(model, "config", None) or ModelConfig(pretrained_backbone=False)
    dets = model_core.predict(model, image)
    return compose_artifact(image, dets, cfg.score_threshold, cfg.mask_threshold)


def save_artifact(artifact: SegmentationArtifact, out_dir: Path | str, stem: str,
                  seconds: float | None = None) -> dict[str, Path]:
    """Write {stem}_composite.png, {stem}_crop.png and {stem}_meta.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "composite": out_dir / f"{stem}_composite.png",
        "crop": out_dir / f"{stem}_crop.png",
        "meta": out_dir / f"{stem}_meta.json",
    }
    Image.fromarray(artifact.composite).save(paths["composite"])
    Image.fromarray(artifact.cropped).save(paths["crop"])
    meta = {
        "crop_rect": list(artifact.crop_rect.as_tuple()),
        "score": artifact.score,
        "mask_area": artifact.mask_area,
        "seconds": seconds,
    }
    with paths["meta"].open("w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return paths
