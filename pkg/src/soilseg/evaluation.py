"""Segmentation-quality metrics (mask IoU, AP@0.5) and the latency benchmark.

AP follows the COCO convention used by the dataset format: predictions are
matched to ground truths greedily in descending score order at a fixed mask
IoU threshold, and average precision is the mean of interpolated precision
over 101 evenly spaced recall points. With a single "soil" category the
reported mAP equals that AP.
"""

from __future__ import annotations

import hashlib
import json
import logging
import statistics
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import coco_data, model_core, postprocess
from .coco_data import CocoDataset
from .errors import NoSoilDetected, ShapeMismatch
from .model_core import DetectionResult, ModelConfig

logger = logging.getLogger(__name__)

# Published results for the original full-scale soil dataset (TITAN V GPU).
# Informational reference targets only: never asserted on other data/hardware.
REFERENCE_TRAIN_LOSS = 0.1999
REFERENCE_SEGM_MAP50 = 0.8804
REFERENCE_GPU_LATENCY_SECONDS = 0.06

RECALL_POINTS = np.linspace(0.0, 1.0, 101)


# -- data types -------------------------------------------------------------------

@dataclass(frozen=True)
class MaskPrediction:
    image_id: int
    score: float
    mask: np.ndarray


@dataclass(frozen=True)
class MaskGroundTruth:
    image_id: int
    mask: np.ndarray


@dataclass
class MatchResult:
    """Greedy matching outcome: one TP/FP flag per prediction.

    ``scores`` and ``tp_flags`` are aligned and globally sorted by descending
    score (ties keep input order); each ground truth is matched at most once.
    """

    scores: list[float]
    tp_flags: list[bool]
    num_gts: int

    @property
    def num_unmatched_gts(self) -> int:
        return self.num_gts - sum(self.tp_flags)


@dataclass
class PrCurve:
    """Cumulative precision/recall plus the non-increasing precision envelope."""

    recalls: np.ndarray
    precisions: np.ndarray
    interpolated: np.ndarray

    def __post_init__(self) -> None:
        if np.any(np.diff(self.recalls) < 0):
            raise ValueError("recall points must be non-decreasing")
        if np.any(np.diff(self.interpolated) > 0):
            raise ValueError("interpolated precision must be non-increasing")


@dataclass
class EvalReport:
    """Headline segm AP@0.5 plus per-image match details."""

    ap50: float | None
    num_images: int
    num_predictions: int
    num_gts: int
    per_image: list[dict] = field(default_factory=list)
    split: str | None = None

    def to_json_dict(self) -> dict:
        return {
            "ap50": self.ap50,
            "num_images": self.num_images,
            "num_predictions": self.num_predictions,
            "num_gts": self.num_gts,
            "per_image": self.per_image,
            "split": self.split,
        }


@dataclass
class TimingReport:
    """Latency benchmark result; the median is over measured runs only."""

    warmup_runs: int
    measured_runs: int
    per_run_seconds: list[float]
    median_seconds: float
    mean_seconds: float
    device: str

    def to_json_dict(self) -> dict:
        return asdict(self)


# -- metrics ------------------------------------------------------------------------

def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks.

    Defined as 0 when both masks are empty (the case never arises in
    matching because images without ground truth are invalid, but the
    function stays total). Symmetric, in [0, 1].
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def match_predictions(predictions: list[MaskPrediction],
                      ground_truths: list[MaskGroundTruth],
                      iou_threshold: float = 0.5) -> MatchResult:
    """Greedily match predictions to ground truths at an IoU threshold.

    Predictions are processed in descending score order (ties broken by
    input order); each takes the not-yet-matched ground truth of its own
    image with the highest IoU, and counts as a true positive iff that IoU
    reaches the threshold. Matching never crosses images.
    """
    gts_by_image: dict[int, list[MaskGroundTruth]] = {}
    for gt in ground_truths:
        gts_by_image.setdefault(gt.image_id, []).append(gt)
    order = sorted(range(len(predictions)), key=lambda i: -predictions[i].score)
    matched: dict[int, set[int]] = {img: set() for img in gts_by_image}
    scores: list[float] = []
    tp_flags: list[bool] = []
    for i in order:
        pred = predictions[i]
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts_by_image.get(pred.image_id, [])):
            if j in matched.get(pred.image_id, set()):
                continue
            iou = mask_iou(pred.mask, gt.mask)
            if iou > best_iou:
                best_iou, best_j = iou, j
        hit = best_j >= 0 and best_iou >= iou_threshold
        if hit:
            matched[pred.image_id].add(best_j)
        scores.append(pred.score)
        tp_flags.append(hit)
    return MatchResult(scores=scores, tp_flags=tp_flags, num_gts=len(ground_truths))


def pr_curve(match: MatchResult) -> PrCurve:
    """Cumulative PR curve from score-ordered TP/FP flags."""
    tp = np.cumsum(np.asarray(match.tp_flags, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(match.tp_flags, dtype=np.float64))
    recalls = tp / match.num_gts if match.num_gts else np.zeros_like(tp)
    precisions = tp / np.maximum(tp + fp, 1e-12)
    # right-to-left running max gives the non-increasing envelope
    interpolated = np.maximum.accumulate(precisions[::-1])[::-1]
    return PrCurve(recalls=recalls, precisions=precisions, interpolated=interpolated)


def _ap_from_match(match: MatchResult) -> float | None:
    if match.num_gts == 0:
        return None
    if not match.tp_flags:
        return 0.0
    curve = pr_curve(match)
    total = 0.0
    for r in RECALL_POINTS:
        reachable = curve.recalls >= r
        total += float(curve.interpolated[reachable][0]) if reachable.any() else 0.0
    return total / len(RECALL_POINTS)


def average_precision(predictions: list[MaskPrediction],
                      ground_truths: list[MaskGroundTruth],
                      iou_threshold: float = 0.5) -> float | None:
    """101-point interpolated average precision at one mask-IoU threshold.

    Returns None (undefined) when there are no ground truths; 0.0 when
    ground truths exist but no prediction does.
    """
    return _ap_from_match(match_predictions(predictions, ground_truths, iou_threshold))


# -- dataset evaluation ---------------------------------------------------------------

def eval_segm_map(model, val_ds: CocoDataset, cfg: ModelConfig) -> EvalReport:
    """Segmentation mAP@IoU=0.5 of a model over one dataset split.

    Predicted mask probabilities are binarized at ``cfg.mask_threshold``;
    with the single soil category, mAP equals the category AP. Per-image
    details record prediction/ground-truth/match counts.
    """
    all_scores: list[float] = []
    all_flags: list[bool] = []
    num_gts = 0
    num_predictions = 0
    per_image: list[dict] = []
    for img in val_ds.images:
        image = val_ds.load_image(img.id)
        dets = model_core.predict(model, image)
        preds = [MaskPrediction(image_id=img.id, score=d.score,
                                mask=postprocess.binarize_mask(d.mask_prob,
                                                               cfg.mask_threshold))
                 for d in dets if d.label == model_core.SOIL_LABEL]
        gts = [MaskGroundTruth(image_id=img.id,
                               mask=coco_data.polygon_to_mask(a, img.width, img.height))
               for a in val_ds.annotations if a.image_id == img.id]
        match = match_predictions(preds, gts, iou_threshold=0.5)
        all_scores.extend(match.scores)
        all_flags.extend(match.tp_flags)
        num_gts += len(gts)
        num_predictions += len(preds)
        per_image.append({
            "image_id": img.id,
            "num_predictions": len(preds),
            "num_gts": len(gts),
            "num_matched": sum(match.tp_flags),
        })
    # merge per-image flags into one global score ordering
    order = sorted(range(len(all_scores)), key=lambda i: -all_scores[i])
    merged = MatchResult(scores=[all_scores[i] for i in order],
                         tp_flags=[all_flags[i] for i in order],
                         num_gts=num_gts)
    ap = _ap_from_match(merged)
    logger.info("segm mAP@0.5 over %d images: %s", len(val_ds.images),
                "absent" if ap is None else f"{ap:.4f}")
    return EvalReport(ap50=ap, num_images=len(val_ds.images),
                      num_predictions=num_predictions, num_gts=num_gts,
                      per_image=per_image, split=val_ds.split)


# -- latency benchmark -----------------------------------------------------------------

def _synchronize(model) -> None:
    try:
        import torch
        if getattr(model, "device", "cpu").startswith("cuda"):
            torch.cuda.synchronize()
    except ImportError:  # pragma: no cover - torch is a hard dependency
        pass


def benchmark_inference(model, image: np.ndarray, warmup: int = 5,
                        runs: int = 30, score_threshold: float = 0.5,
                        mask_threshold: float = 0.5) -> TimingReport:
    """Time complete single-image segmentation: inference plus the
    whiten-and-crop post-processing.

    Warmup runs are executed but not measured. Any asynchronous device work
    is synchronized before each timer stops. Images where no detection
    clears the threshold still count (the post-processing attempt is part
    of the measured path).
    """
    if runs < 1:
        raise ValueError(f"runs must be >= 1, got {runs}")

    def once() -> None:
        dets = model_core.predict(model, image)
        try:
            postprocess.compose_artifact(image, dets, score_threshold, mask_threshold)
        except NoSoilDetected:
            pass

    for _ in range(warmup):
        once()
    per_run: list[float] = []
    for _ in range(runs):
        start = time.perf_counter()
        once()
        _synchronize(model)
        per_run.append(time.perf_counter() - start)
    return TimingReport(
        warmup_runs=warmup,
        measured_runs=runs,
        per_run_seconds=per_run,
        median_seconds=float(statistics.median(per_run)),
        mean_seconds=float(statistics.fmean(per_run)),
        device=str(getattr(model, "device", "unknown")),
    )


# -- ground-truth oracle stand-in --------------------------------------------------------

def _image_key(image: np.ndarray) -> str:
    arr = np.ascontiguousarray(np.asarray(image, dtype=np.uint8))
    return hashlib.sha256(arr.tobytes()).hexdigest()


class OracleModel:
    """A stand-in "model" that replays ground-truth masks with score 1.0.

    Images are recognized by a hash of their pixel content, so the oracle
    only answers for images it was built from; anything else yields no
    detections. Useful as a known-perfect fixture: evaluating it on its own
    dataset gives AP exactly 1.0, and an oracle built from nothing is a
    model that never detects.
    """

    device = "cpu (gt-oracle)"

    def __init__(self, index: dict[str, list[dict]] | None = None):
        self.index = index or {}

    @classmethod
    def from_dataset(cls, ds: CocoDataset) -> "OracleModel":
        index: dict[str, list[dict]] = {}
        for img in ds.images:
            image = ds.load_image(img.id)
            dets = []
            for ann in ds.annotations:
                if ann.image_id != img.id:
                    continue
                x, y, w, h = ann.bbox
                mask = coco_data.polygon_to_mask(ann, img.width, img.height)
                dets.append({
                    "box": (max(0.0, x), max(0.0, y),
                            min(float(img.width), x + w), min(float(img.height), y + h)),
                    "score": 1.0,
                    "label": ann.category_id,
                    "mask": np.packbits(mask),
                    "shape": mask.shape,
                })
            index[_image_key(image)] = dets
        return cls(index)

    def detect(self, image: np.ndarray) -> list[DetectionResult]:
        dets = []
        for rec in self.index.get(_image_key(image), []):
            mask = np.unpackbits(rec["mask"])[: rec["shape"][0] * rec["shape"][1]]
            mask = mask.reshape(rec["shape"]).astype(np.float64)
            dets.append(DetectionResult(box=tuple(rec["box"]), score=rec["score"],
                                        label=rec["label"], mask_prob=mask))
        return dets

    def eval(self) -> "OracleModel":
        return self

    def train(self) -> "OracleModel":
        return self


def write_eval_report(report: EvalReport, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
