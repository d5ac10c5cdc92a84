"""soilseg: soil image instance segmentation pipeline.

Trains a two-class Mask R-CNN on COCO2017-format soil datasets, evaluates
segmentation mAP at IoU 0.5, and post-processes detections into a
white-background composite plus a tight crop of the soil region.
"""

__version__ = "0.1.0"

from . import coco_data, errors, evaluation, model_core, postprocess, training

__all__ = ["coco_data", "errors", "evaluation", "model_core", "postprocess",
           "training", "__version__"]
