"""Mask R-CNN model contract: assembly, head shapes, ROI Align, losses, inference.

The network itself is the torchvision ResNet-50 FPN Mask R-CNN; this module
pins the pieces that behave as contracts: the two-class configuration, the
2k/4k RPN head arithmetic, reference ROI Align semantics, the three-part
loss decomposition (RPN + detection head + mask head), and the shape of
inference results.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, asdict

import numpy as np
import torch

from .errors import (
    ConfigError,
    DegenerateBox,
    InvalidK,
    NonFiniteLoss,
    ShapeMismatch,
    WeightsUnavailable,
)

logger = logging.getLogger(__name__)

SOIL_LABEL = 1
BCE_EPS = 1e-7


# -- configuration and result types ---------------------------------------------

@dataclass
class ModelConfig:
    """Model construction and inference-threshold settings.

    ``num_classes`` counts the implicit background class, so the single-soil
    model uses 2. Fields below the thresholds are assembly internals
    (resize policy, anchors, proposal caps): configuration rather than
    contract, recorded in run logs for reproducibility.
    """

    num_classes: int = 2
    backbone: str = "resnet50-fpn"
    pretrained_backbone: bool = True
    mask_threshold: float = 0.5
    score_threshold: float = 0.5
    min_size: int = 800
    max_size: int = 1333
    anchor_sizes: tuple[int, ...] | None = None
    anchor_aspect_ratios: tuple[float, ...] | None = None
    detections_per_image: int = 100
    device: str = "cpu"

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(
                f"num_classes must be >= 2 (background + soil), got {self.num_classes}")
        if self.backbone != "resnet50-fpn":
            raise ConfigError(f"unsupported backbone {self.backbone!r}")
        for name in ("mask_threshold", "score_threshold"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigError(f"{name} must be in (0, 1), got {value}")
        if self.min_size < 1 or self.max_size < self.min_size:
            raise ConfigError("need 1 <= min_size <= max_size")

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["anchor_sizes"] = list(self.anchor_sizes) if self.anchor_sizes else None
        d["anchor_aspect_ratios"] = (
            list(self.anchor_aspect_ratios) if self.anchor_aspect_ratios else None)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("anchor_sizes"):
            d["anchor_sizes"] = tuple(d["anchor_sizes"])
        if d.get("anchor_aspect_ratios"):
            d["anchor_aspect_ratios"] = tuple(d["anchor_aspect_ratios"])
        return cls(**d)


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor grid: k = len(scales) * len(ratios) boxes per spatial location."""

    scales: tuple[float, ...]
    ratios: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.scales or not self.ratios:
            raise ConfigError("anchor scales and ratios must be non-empty")

    @property
    def k(self) -> int:
        return len(self.scales) * len(self.ratios)


@dataclass
class RpnHeadOutput:
    """Per-location RPN head maps: 2k objectness and 4k box-delta channels."""

    k: int
    objectness: np.ndarray
    box_deltas: np.ndarray

    def __post_init__(self) -> None:
        obj_c, reg_c = rpn_head_channels(self.k)
        if self.objectness.shape[0] != obj_c:
            raise ShapeMismatch(
                f"objectness must have {obj_c} channels for k={self.k}, "
                f"got {self.objectness.shape[0]}")
        if self.box_deltas.shape[0] != reg_c:
            raise ShapeMismatch(
                f"box_deltas must have {reg_c} channels for k={self.k}, "
                f"got {self.box_deltas.shape[0]}")


@dataclass(frozen=True)
class LossBreakdown:
    """Three-part training loss: total = l_rpn + l_faster_rcnn + l_mask."""

    l_rpn: float
    l_faster_rcnn: float
    l_mask: float
    total: float

    def __post_init__(self) -> None:
        for name in ("l_rpn", "l_faster_rcnn", "l_mask", "total"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise NonFiniteLoss(f"{name} is {value}")
        for name in ("l_rpn", "l_faster_rcnn", "l_mask"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def from_components(cls, l_rpn: float, l_faster_rcnn: float,
                        l_mask: float) -> "LossBreakdown":
        return cls(l_rpn=l_rpn, l_faster_rcnn=l_faster_rcnn, l_mask=l_mask,
                   total=l_rpn + l_faster_rcnn + l_mask)


@dataclass
class DetectionResult:
    """One predicted instance.

    ``box`` is (x1, y1, x2, y2) in image pixels with x1 < x2 and y1 < y2;
    ``mask_prob`` is a (H, W) probability map at full image resolution.
    """

    box: tuple[float, float, float, float]
    score: float
    label: int
    mask_prob: np.ndarray


@dataclass
class FeatureMap:
    """A (channels, height, width) activation array with its image stride."""

    data: np.ndarray
    stride: float = 1.0

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise ShapeMismatch(f"feature map must be (C, H, W), got {self.data.shape}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")


class Model:
    """A built, trainable Mask R-CNN plus the config it was assembled from."""

    def __init__(self, net: torch.nn.Module, config: ModelConfig):
        self.net = net
        self.config = config

    def train(self) -> "Model":
        self.net.train()
        return self

    def eval(self) -> "Model":
        self.net.eval()
        return self

    @property
    def device(self) -> str:
        return str(next(self.net.parameters()).device)


# -- contract-level operations ----------------------------------------------------

def rpn_head_channels(k: int) -> tuple[int, int]:
    """Channel counts of the RPN heads for k anchors per location: (2k, 4k).

    The objectness branch scores each anchor as object/background (2k) and the
    regression branch emits 4 box deltas per anchor (4k).
    """
    if not isinstance(k, int) or isinstance(k, bool) or k < 1:
        raise InvalidK(f"k must be a positive integer, got {k!r}")
    return 2 * k, 4 * k


def total_loss(parts: LossBreakdown) -> float:
    """Three-way sum of the loss components."""
    for name in ("l_rpn", "l_faster_rcnn", "l_mask"):
        if not math.isfinite(getattr(parts, name)):
            raise NonFiniteLoss(f"{name} is {getattr(parts, name)}")
    return parts.l_rpn + parts.l_faster_rcnn + parts.l_mask


def mask_bce_loss(pred_prob: np.ndarray, target: np.ndarray,
                  eps: float = BCE_EPS) -> float:
    """Mean per-pixel binary cross entropy between a mask probability map
    and its binary ground truth.

    Callers pass the predicted mask channel belonging to the instance's own
    class; other classes' channels never enter the loss. Probabilities are
    clamped to [eps, 1 - eps] so exact 0/1 predictions stay finite.
    """
    pred_prob = np.asarray(pred_prob, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred_prob.shape != target.shape:
        raise ShapeMismatch(
            f"pred {pred_prob.shape} and target {target.shape} differ")
    p = np.clip(pred_prob, eps, 1.0 - eps)
    return float(np.mean(-(target * np.log(p) + (1.0 - target) * np.log(1.0 - p))))


def _bilinear(data: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear samples of (C, H, W) data at continuous points.

    Grid values sit at pixel centers (col + 0.5, row + 0.5); coordinates
    beyond the border replicate the edge value. The lerp form keeps constant
    maps exactly constant.
    """
    c, h, w = data.shape
    gx = np.clip(x - 0.5, 0.0, w - 1.0)
    gy = np.clip(y - 0.5, 0.0, h - 1.0)
    x0 = np.floor(gx).astype(np.intp)
    y0 = np.floor(gy).astype(np.intp)
    x0 = np.minimum(x0, w - 1)
    y0 = np.minimum(y0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = gx - x0
    fy = gy - y0
    v00 = data[:, y0, x0]
    v01 = data[:, y0, x1]
    v10 = data[:, y1, x0]
    v11 = data[:, y1, x1]
    top = v00 + fx * (v01 - v00)
    bottom = v10 + fx * (v11 - v10)
    return top + fy * (bottom - top)


def roi_align(fm: FeatureMap, box: tuple[float, float, float, float],
              output_size: int, sampling_points: int = 2) -> np.ndarray:
    """Extract a fixed-size patch for a continuous box by bilinear sampling.

    The box (x1, y1, x2, y2) lives in the feature map's own continuous
    coordinate space. It is divided into an ``output_size x output_size``
    grid; each bin averages ``sampling_points ** 2`` bilinear samples taken
    at regularly spaced locations inside the bin. No coordinate is rounded
    to an integer at any stage, which is what distinguishes this from
    quantizing ROI pooling.

    Returns:
        Array of shape (output_size, output_size, channels).

    Raises:
        DegenerateBox: box has non-positive width or height.
    """
    x1, y1, x2, y2 = (float(v) for v in box)
    if x2 <= x1 or y2 <= y1:
        raise DegenerateBox(f"box {box} has non-positive extent")
    if output_size < 1:
        raise ValueError(f"output_size must be >= 1, got {output_size}")
    if sampling_points < 1:
        raise ValueError(f"sampling_points must be >= 1, got {sampling_points}")
    out = _roi_align_batch(fm.data, np.array([[x1, y1, x2, y2]]),
                           output_size, sampling_points)[0]
    return out


def _roi_align_batch(data: np.ndarray, boxes: np.ndarray, output_size: int,
                     sampling_points: int) -> np.ndarray:
    """Vectorized core of roi_align over (B, 4) boxes -> (B, S, S, C)."""
    data = np.asarray(data, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    s, n = output_size, sampling_points
    b = boxes.shape[0]
    # per-axis sample offsets within the box, as fractions of the box extent
    frac = (np.arange(s)[:, None] + (np.arange(n)[None, :] + 0.5) / n) / s  # (S, n)
    frac = frac.reshape(-1)  # (S*n,)
    xs = boxes[:, 0, None] + frac[None, :] * (boxes[:, 2] - boxes[:, 0])[:, None]
    ys = boxes[:, 1, None] + frac[None, :] * (boxes[:, 3] - boxes[:, 1])[:, None]
    xx = np.broadcast_to(xs[:, None, :], (b, s * n, s * n))
    yy = np.broadcast_to(ys[:, :, None], (b, s * n, s * n))
    vals = _bilinear(data, xx.reshape(b, -1), yy.reshape(b, -1))  # (C, B, P)
    c = data.shape[0]
    vals = vals.reshape(c, b, s, n, s, n)
    out = vals.mean(axis=(3, 5))  # (C, B, S, S)
    return out.transpose(1, 2, 3, 0)  # (B, S, S, C)


# -- model assembly and inference ---------------------------------------------------

def build_model(cfg: ModelConfig) -> Model:
    """Assemble the two-class Mask R-CNN.

    With ``pretrained_backbone`` set, all weights start from the standard
    COCO-trained checkpoint and the classification/box/mask predictors are
    replaced by freshly initialized two-class heads; otherwise the whole
    network is randomly initialized.

    Raises:
        ConfigError: invalid configuration (also raised when anchors are
            customized together with pretrained weights, which would break
            the loaded RPN head shapes).
        WeightsUnavailable: pretrained weights requested but unobtainable
            (e.g. no network access and no local cache).
    """
    from torchvision.models.detection import MaskRCNN_ResNet50_FPN_Weights
    from torchvision.models.detection import maskrcnn_resnet50_fpn
    from torchvision.models.detection.anchor_utils import AnchorGenerator
    from torchvision.models.detection.faster_rcnn import FastRCNNPredictor
    from torchvision.models.detection.mask_rcnn import MaskRCNNPredictor

    kwargs: dict = {
        "min_size": cfg.min_size,
        "max_size": cfg.max_size,
        "box_detections_per_img": cfg.detections_per_image,
    }
    if cfg.anchor_sizes is not None or cfg.anchor_aspect_ratios is not None:
        if cfg.pretrained_backbone:
            raise ConfigError(
                "custom anchors are incompatible with pretrained weights")
        sizes = cfg.anchor_sizes or (32, 64, 128, 256, 512)
        ratios = cfg.anchor_aspect_ratios or (0.5, 1.0, 2.0)
        kwargs["rpn_anchor_generator"] = AnchorGenerator(
            sizes=tuple((s,) for s in sizes),
            aspect_ratios=(tuple(ratios),) * len(sizes))

    if cfg.pretrained_backbone:
        try:
            net = maskrcnn_resnet50_fpn(
                weights=MaskRCNN_ResNet50_FPN_Weights.COCO_V1,
                progress=False, **kwargs)
        except Exception as exc:
            raise WeightsUnavailable(
                f"COCO-pretrained weights could not be obtained: {exc}") from exc
        in_features = net.roi_heads.box_predictor.cls_score.in_features
        net.roi_heads.box_predictor = FastRCNNPredictor(in_features, cfg.num_classes)
        in_channels = net.roi_heads.mask_predictor.conv5_mask.in_channels
        net.roi_heads.mask_predictor = MaskRCNNPredictor(in_channels, 256, cfg.num_classes)
    else:
        net = maskrcnn_resnet50_fpn(weights=None, weights_backbone=None,
                                    num_classes=cfg.num_classes, **kwargs)
    net.to(cfg.device)
    logger.debug("built %s model (num_classes=%d, pretrained=%s, device=%s)",
                 cfg.backbone, cfg.num_classes, cfg.pretrained_backbone, cfg.device)
    return Model(net=net, config=cfg)


def _to_tensor(image: np.ndarray, device: str) -> torch.Tensor:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeMismatch(f"expected an RGB (H, W, 3) image, got {arr.shape}")
    if arr.dtype == np.uint8:
        t = torch.from_numpy(arr.copy()).permute(2, 0, 1).float() / 255.0
    else:
        t = torch.from_numpy(arr.astype(np.float32)).permute(2, 0, 1)
    return t.to(device)


def training_losses(model: Model, images: list[np.ndarray],
                    targets: list[dict]) -> tuple[torch.Tensor, LossBreakdown]:
    """One training-mode forward pass.

    Each target dict carries ``boxes`` (N, 4) xyxy, ``labels`` (N,) and
    ``masks`` (N, H, W) binary arrays (numpy or tensors). Returns the
    differentiable total for backward plus the detached three-part
    breakdown: RPN (objectness + proposal regression), detection head
    (classification + box regression), and mask head (binary cross entropy).
    """
    device = model.device
    tensors = [_to_tensor(img, device) for img in images]
    tv_targets = []
    for tgt in targets:
        tv_targets.append({
            "boxes": torch.as_tensor(np.asarray(tgt["boxes"]), dtype=torch.float32, device=device),
            "labels": torch.as_tensor(np.asarray(tgt["labels"]), dtype=torch.int64, device=device),
            "masks": torch.as_tensor(np.asarray(tgt["masks"]), dtype=torch.uint8, device=device),
        })
    model.net.train()
    loss_dict = model.net(tensors, tv_targets)
    total = sum(loss_dict.values())
    l_rpn = float(loss_dict["loss_objectness"].detach()) + \
        float(loss_dict["loss_rpn_box_reg"].detach())
    l_frcnn = float(loss_dict["loss_classifier"].detach()) + \
        float(loss_dict["loss_box_reg"].detach())
    l_mask = float(loss_dict["loss_mask"].detach())
    return total, LossBreakdown.from_components(l_rpn, l_frcnn, l_mask)


def predict(model, image: np.ndarray) -> list[DetectionResult]:
    """Run inference on one RGB image.

    Returns detections sorted by descending score, boxes clipped to the
    image bounds (zero-extent boxes dropped), and per-pixel mask
    probabilities at full image resolution. ``model`` may be a built
    :class:`Model` or any stand-in exposing ``detect(image)`` (used by
    ground-truth oracle fixtures).
    """
    if hasattr(model, "detect"):
        dets = list(model.detect(image))
    else:
        tensor = _to_tensor(image, model.device)
        model.net.eval()
        with torch.no_grad():
            out = model.net([tensor])[0]
        h, w = image.shape[:2]
        dets = []
        boxes = out["boxes"].cpu().numpy()
        scores = out["scores"].cpu().numpy()
        labels = out["labels"].cpu().numpy()
        masks = out["masks"].cpu().numpy()
        for i in range(len(scores)):
            x1 = float(np.clip(boxes[i, 0], 0, w))
            y1 = float(np.clip(boxes[i, 1], 0, h))
            x2 = float(np.clip(boxes[i, 2], 0, w))
            y2 = float(np.clip(boxes[i, 3], 0, h))
            if x2 <= x1 or y2 <= y1:
                continue
            dets.append(DetectionResult(
                box=(x1, y1, x2, y2),
                score=float(scores[i]),
                label=int(labels[i]),
                mask_prob=np.clip(masks[i, 0], 0.0, 1.0),
            ))
    dets.sort(key=lambda d: -d.score)
    return dets
