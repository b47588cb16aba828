"""Anchor-free person search: joint pedestrian detection and re-identification."""
from .afa import AFA, AfaConfig, aggregate, assign_level
from .backbone import Backbone, BackboneConfig, extract_features
from .config import Config, ConfigError, load_config, shipped_config
from .core import BoundingBox, Detection, PersonAnnotation, SceneImage, iou, nms
from .dconv import ConfigurationError, DeformConv2d, deform_conv2d
from .evaluation import Predictions, evaluate_detection, evaluate_search, gallery_sweep, search
from .head import DetectionHead, HeadConfig, decode_detections, detection_loss
from .model import ModelConfig, PersonSearchNet
from .reid import ReidConfig, ReidMemory, oim_loss, toim_loss, triplet_loss, update_memory
from .trainer import Trainer, run_ablation

__all__ = [
    "AFA", "AfaConfig", "aggregate", "assign_level",
    "Backbone", "BackboneConfig", "extract_features",
    "Config", "ConfigError", "load_config", "shipped_config",
    "BoundingBox", "Detection", "PersonAnnotation", "SceneImage", "iou", "nms",
    "ConfigurationError", "DeformConv2d", "deform_conv2d",
    "Predictions", "evaluate_detection", "evaluate_search", "gallery_sweep", "search",
    "DetectionHead", "HeadConfig", "decode_detections", "detection_loss",
    "ModelConfig", "PersonSearchNet",
    "ReidConfig", "ReidMemory", "oim_loss", "toim_loss", "triplet_loss", "update_memory",
    "Trainer", "run_ablation",
]

__version__ = "0.1.0"
