"""Single-shot detection of events (centre, duration, label) in 1-D time series."""

__version__ = "0.1.0"

from .detector import ArchConfig, DetectorModel, predict_record
from .events import Event, iou, nms
from .training import TrainConfig, train

__all__ = ["ArchConfig", "DetectorModel", "Event", "TrainConfig", "iou", "nms", "predict_record", "train"]
