"""Multi-modal, multi-task, multi-attention classification of paired fundus images.

Subpackages and modules:

- ``m3rpd.tensor``: reverse-mode autodiff over numpy with a Cython kernel core
- ``m3rpd.attention``: per-modality self-attention and cross-modality fusion
- ``m3rpd.models``: inception-style backbones, the M3 model and non-M3 baselines
- ``m3rpd.datasets``: synthetic paired CFP/FAF data, manifests, splits, augmentation
- ``m3rpd.trainer``: multi-task training, cascade fine-tuning, run ensembles
- ``m3rpd.evaluation``: metrics, rank-sum tests, bootstrap differential analysis
- ``m3rpd.saliency``: signed last-conv saliency maps and heatmap export
- ``m3rpd.cli``: ``m3rpd synth | train | eval | saliency``
"""
__version__ = "0.1.0"

from .models import BackboneConfig, build_m3, build_non_m3, predict_cfp, predict_faf, predict_fused
from .datasets import SynthConfig, generate_synthetic, load_manifest, split_participants
from .trainer import TrainConfig, run_ensemble, train_m3, train_non_m3

__all__ = [
    "BackboneConfig",
    "SynthConfig",
    "TrainConfig",
    "build_m3",
    "build_non_m3",
    "generate_synthetic",
    "load_manifest",
    "predict_cfp",
    "predict_faf",
    "predict_fused",
    "run_ensemble",
    "split_participants",
    "train_m3",
    "train_non_m3",
]
