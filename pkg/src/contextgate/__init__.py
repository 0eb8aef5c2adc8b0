"""
contextgate: Guided Context Gating attention for image classification.

This package provides a small reverse-mode autodiff engine, the Guided Context Gating block
and its comparison baselines, a trainable classifier with a binary checkpoint format, an
RMSProp trainer with Gradient Centralization, classification metrics, attention heatmaps and
a synthetic lesion-image generator.
"""

from contextgate.attention import AttentionArtifacts as AttentionArtifacts
from contextgate.attention import AttentionKind as AttentionKind
from contextgate.attention import GcgConfig as GcgConfig
from contextgate.attention import GcgParams as GcgParams
from contextgate.attention import attend as attend
from contextgate.attention import baseline_forward as baseline_forward
from contextgate.attention import channel_correlation as channel_correlation
from contextgate.attention import context_formulation as context_formulation
from contextgate.attention import guide_fuse as guide_fuse
from contextgate.attention import guided_gating as guided_gating
from contextgate.attention import init_attention_params as init_attention_params
from contextgate.checkpoint import load_checkpoint as load_checkpoint
from contextgate.checkpoint import save_checkpoint as save_checkpoint
from contextgate.data import Dataset as Dataset
from contextgate.data import DatasetManifest as DatasetManifest
from contextgate.data import SyntheticSpec as SyntheticSpec
from contextgate.data import generate_dataset as generate_dataset
from contextgate.data import load_dataset as load_dataset
from contextgate.evaluation import MetricsReport as MetricsReport
from contextgate.evaluation import compare_attention_variants as compare_attention_variants
from contextgate.evaluation import compute_metrics as compute_metrics
from contextgate.evaluation import export_heatmap as export_heatmap
from contextgate.model import Model as Model
from contextgate.model import ModelConfig as ModelConfig
from contextgate.model import build_model as build_model
from contextgate.model import model_forward as model_forward
from contextgate.tensor import Parameter as Parameter
from contextgate.tensor import Tensor as Tensor
from contextgate.tensor import backward as backward
from contextgate.training import ExperimentConfig as ExperimentConfig
from contextgate.training import TrainConfig as TrainConfig
from contextgate.training import TrainingLog as TrainingLog
from contextgate.training import fit as fit

__all__ = [
    "AttentionArtifacts",
    "AttentionKind",
    "GcgConfig",
    "GcgParams",
    "attend",
    "baseline_forward",
    "channel_correlation",
    "context_formulation",
    "guide_fuse",
    "guided_gating",
    "init_attention_params",
    "load_checkpoint",
    "save_checkpoint",
    "Dataset",
    "DatasetManifest",
    "SyntheticSpec",
    "generate_dataset",
    "load_dataset",
    "MetricsReport",
    "compare_attention_variants",
    "compute_metrics",
    "export_heatmap",
    "Model",
    "ModelConfig",
    "build_model",
    "model_forward",
    "Parameter",
    "Tensor",
    "backward",
    "ExperimentConfig",
    "TrainConfig",
    "TrainingLog",
    "fit",
]
