"""Mixup by interpolating optimal-transport-aligned feature tensors.

The package trains a small convolutional autoencoder-classifier whose
mini-batches are either clean or mixed at the input, latent, or aligned
feature-tensor level, and ships the matching evaluation tools: calibration,
OOD detection, and sup-norm adversarial attacks.
"""

from .autodiff import Tensor, conv2d, conv_transpose2d
from .mixup import MixMode, PairBatch, aligned_mix, mix_generic, mix_linear, \
    modes_for_layers, sample_lambda, sample_mode
from .model import ModelBundle, ModelConfig, TrainConfig, decode_interpolation, \
    loss_clean, loss_mixed, schedule_lr, sgd_update, train_model, train_step
from .ot import SinkhornConfig, SinkhornUnderflowError, align, assignment, \
    cost_matrix, flatten_features, plan_entropy, sinkhorn, sinkhorn_batch, \
    unflatten_features

__version__ = "0.1.0"
