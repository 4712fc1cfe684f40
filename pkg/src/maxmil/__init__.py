"""Max-aggregated multiple-instance perceptrons for weakly supervised
object detection on pre-extracted region feature bags."""

from .bags import Dataset, FeatureBag, RegionInstance, load_dataset, write_dataset
from .baselines import BaselineConfig, select_training_instances, train_baseline
from .detect import DetectConfig, Detection, detect_dataset, detect_image, iou, nms
from .errors import (
    ConfigError,
    FormatError,
    MaxMilError,
    TrainingError,
    ValidationError,
)
from .evaluate import (
    EvalReport,
    classification_ap,
    detection_ap,
    evaluate_models,
    proposal_recall,
    transfer_evaluate,
)
from .models import (
    HiddenLayerModel,
    LinearModel,
    LossConfig,
    PolyhedralModel,
    bag_score,
    batch_gradient,
    batch_loss,
    detection_confidence,
    forward,
    weighted_instance_score,
)
from .synthetic import PlantedTruth, SyntheticConfig, generate_synthetic
from .train import (
    TrainConfig,
    TrainedClassModel,
    load_models,
    save_models,
    train_class,
    train_multiclass,
)

__version__ = "0.1.0"

__all__ = [
    "BaselineConfig",
    "ConfigError",
    "Dataset",
    "DetectConfig",
    "Detection",
    "EvalReport",
    "FeatureBag",
    "FormatError",
    "HiddenLayerModel",
    "LinearModel",
    "LossConfig",
    "MaxMilError",
    "PlantedTruth",
    "PolyhedralModel",
    "RegionInstance",
    "SyntheticConfig",
    "TrainConfig",
    "TrainedClassModel",
    "TrainingError",
    "ValidationError",
    "bag_score",
    "batch_gradient",
    "batch_loss",
    "classification_ap",
    "detect_dataset",
    "detect_image",
    "detection_ap",
    "detection_confidence",
    "evaluate_models",
    "forward",
    "generate_synthetic",
    "iou",
    "load_dataset",
    "load_models",
    "nms",
    "proposal_recall",
    "save_models",
    "select_training_instances",
    "train_baseline",
    "train_class",
    "train_multiclass",
    "transfer_evaluate",
    "weighted_instance_score",
    "write_dataset",
]
