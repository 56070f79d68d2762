"""Few-shot point-cloud anomaly detection by teacher-student feature distillation."""

from .backbone import BackboneConfig, BackboneParams, TapFeatures, extract_taps, forward, init_params, load_checkpoint, save_checkpoint
from .detect import AnomalyScore, anomaly_score, classify, youden_threshold
from .distill import DistillConfig, cosine_loss, multiscale_loss, train_student
from .evaluation import EvalReport, Protocol, roc_auc, roc_curve, run_experiment
from .geometry import LabeledDataset, PointCloud, load_cloud, load_manifest, preprocess
from .kernels import BACKEND
from .pretrain import PretrainConfig, pretrain_teacher, segmentation_loss
from .synthgen import ShapeSpec, default_specs, generate_dataset

__version__ = "0.1.0"

__all__ = [
    "AnomalyScore",
    "BACKEND",
    "BackboneConfig",
    "BackboneParams",
    "DistillConfig",
    "EvalReport",
    "LabeledDataset",
    "PointCloud",
    "PretrainConfig",
    "Protocol",
    "ShapeSpec",
    "TapFeatures",
    "anomaly_score",
    "classify",
    "cosine_loss",
    "default_specs",
    "extract_taps",
    "forward",
    "generate_dataset",
    "init_params",
    "load_checkpoint",
    "load_cloud",
    "load_manifest",
    "multiscale_loss",
    "preprocess",
    "pretrain_teacher",
    "roc_auc",
    "roc_curve",
    "run_experiment",
    "save_checkpoint",
    "segmentation_loss",
    "train_student",
    "youden_threshold",
]
