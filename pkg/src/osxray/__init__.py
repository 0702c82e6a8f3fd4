"""Orthogonality-regularized chest X-ray classification toolkit.

A from-scratch, deterministic stack: reverse-mode autodiff tensors, a
DarkNet-style convolutional classifier, an orthonormality penalty on
partitioned flatten features, weighted cross-entropy, a cross-validated
Adam training harness, calibration metrics, and Grad-CAM saliency.
"""

from .data import AugmentConfig, DatasetManifest, augment, load_image, stratified_kfold, synth_generate
from .errors import (ConfigError, ContractError, DimensionError, IngestionError,
                     OsxrayError, TrainingError)
from .gradcam import Heatmap, flip_experiment, gradcam, overlay
from .layers import (ModelParams, ModelSpec, build_darkcovidnet, forward,
                     init_params, load_checkpoint, save_checkpoint)
from .metrics import brier, calibration_report, confusion_matrix, ece, evaluate_predictions, oe, prf1
from .osloss import OsConfig, os_penalty, partition, total_loss, weighted_cross_entropy
from .tensor import Tensor, grad_check
from .train import (TrainConfig, adam_step, build_spec_for, cross_validate,
                    lr_at_step, sweep, train_fold)

__version__ = "0.1.0"
