"""Drought-stress classification of aerial crop patches with gradient explanations."""

from .augment import AugmentationPolicy, BatchSpec, BatchStream, apply_transform, sample_transform
from .config import RunConfig
from .errors import PipelineError
from .evaluate import ConfusionMatrix, EvalReport, compare_against_baselines, confusion, metrics
from .explain import SaliencyMap, gradcam_last_conv, input_gradient_saliency, reduce_and_rectify, standardize
from .ingest import (
    AnnotatedScene,
    BoundingBox,
    DatasetManifest,
    PatchRecord,
    extract_patches,
    load_annotations,
    split_manifest,
)
from .model import BackboneSpec, ClassifierModel, HeadConfig, build_classifier, head_param_count
from .train import TrainingConfig, TrainingHistory, lr_at_epoch, run_training

__version__ = "0.1.0"
