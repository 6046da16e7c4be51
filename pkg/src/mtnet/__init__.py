"""Multi-task MRI-to-PET CBF synthesis and cerebrovascular disease classification.

A numpy-only reverse-mode autodiff core drives a 3D attention encoder-decoder
(CBF synthesis) and a multi-scale convolutional classifier (HC, MMD, ICSD,
Stroke) trained jointly on one global loss.
"""

from .estimator import MultiTaskCBFNet, check_labels, check_mri_batch, check_pet_batch
from .losses import LossReport, LossWeights
from .networks import ClassLabel, ModelConfig, MultiTaskModel, build_model, load_checkpoint, save_checkpoint
from .trainer import (
    NAdamState,
    TrainConfig,
    TrainHistory,
    grid_search_weights,
    nadam_step,
    run_cross_validation,
    train,
)

__version__ = "0.1.0"
