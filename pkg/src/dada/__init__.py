"""Depth-aware unsupervised domain adaptation for semantic segmentation."""

__version__ = "0.1.0"

from .estimator import DADASegmenter
from .fusion import dada_fusion, self_information
from .losses import LossValues, berhu, depth_loss, domain_bce, seg_loss, source_objective
from .metrics import EvalReport, confusion, evaluate_model, iou_report, negative_transfer_rate
from .model import DadaNet, DomainDiscriminator, ModelConfig, init_model, load_checkpoint, save_checkpoint
from .synthdata import DomainStyle, Scene, SceneDataset, SceneSpec, default_style, generate_dataset, generate_scene
from .trainer import ABLATION_PRESETS, AblationSetup, TrainConfig, TrainState, fit_loop, run_training, train_step

__all__ = [
    "DADASegmenter",
    "dada_fusion", "self_information",
    "LossValues", "berhu", "depth_loss", "domain_bce", "seg_loss", "source_objective",
    "EvalReport", "confusion", "evaluate_model", "iou_report", "negative_transfer_rate",
    "DadaNet", "DomainDiscriminator", "ModelConfig", "init_model",
    "load_checkpoint", "save_checkpoint",
    "DomainStyle", "Scene", "SceneDataset", "SceneSpec", "default_style",
    "generate_dataset", "generate_scene",
    "ABLATION_PRESETS", "AblationSetup", "TrainConfig", "TrainState",
    "fit_loop", "run_training", "train_step",
]
