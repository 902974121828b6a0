"""Multi-class industrial anomaly detection via feature reconstruction and repair."""

__version__ = "0.1.0"

from .backbone import Backbone, BackboneSpec, FeatureStack, preprocess, toy_backbone
from .config import Config, default_config, load_config
from .dataset import DatasetIndex, load_dataset
from .metrics import MetricsReport, auroc, aupro, average_precision, f1_max, mad_summary
from .repair_net import RepairNet, discrepancy, discrepancy_map, group, nrar_loss
from .scoring import anomaly_map, image_score
from .segnet import focal_loss, similarity_feature
from .synthesis import AnomalySynthesizer, SyntheticSample, perlin_noise
from .trainer import train_stage1, train_stage2

__all__ = [
    "__version__",
    "Backbone",
    "BackboneSpec",
    "FeatureStack",
    "preprocess",
    "toy_backbone",
    "Config",
    "default_config",
    "load_config",
    "DatasetIndex",
    "load_dataset",
    "MetricsReport",
    "auroc",
    "aupro",
    "average_precision",
    "f1_max",
    "mad_summary",
    "RepairNet",
    "discrepancy",
    "discrepancy_map",
    "group",
    "nrar_loss",
    "anomaly_map",
    "image_score",
    "focal_loss",
    "similarity_feature",
    "AnomalySynthesizer",
    "SyntheticSample",
    "perlin_noise",
    "train_stage1",
    "train_stage2",
]
