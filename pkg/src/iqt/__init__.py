"""Full-reference image quality transformer with a self-contained numpy autodiff core."""

from .backbone import BackboneSpec, FeatureMap, diff_features, extract_features, load_feature_file, save_feature_file
from .eval import CorrelationReport, evaluate, krcc, plcc_poly3, run_ablation, srcc
from .io import ImageBuffer, decode_image, parse_manifest
from .model import IQTModel, ModelConfig, Routing, preset_config
from .pipeline import (
    Checkpoint,
    TrainConfig,
    forward_score,
    load_checkpoint,
    plan_patches,
    save_checkpoint,
    score_pair,
    train,
)
from .transformer import TransformerConfig

__version__ = "0.1.0"
