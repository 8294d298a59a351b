"""Dual-polarization guided SAR ship classifier.

A self-contained numpy implementation: tape-based reverse-mode autodiff,
the layer primitives of the architecture, three cross-attention-fused
encoder branches over polarization-derived channels, a dilated residual
dense feature head, and a training/evaluation/ablation harness with a
CLI. See README.md for usage.
"""

from .config import ModelConfig, TrainConfig, configs_from_flat, flat_from_configs
from .drdlf import count_params, drdb_forward, drdlf_forward, predict
from .errors import ConfigError, FormatError, ShapeError
from .harness import (ConfusionMatrix, ablation_suite, build_model, evaluate,
                      evaluate_predictions, forward_logits, load_dataset, top_k_mean_std, train)
from .optim import ParamStore, adam_step, he_init
from .pccaf import cross_attention, encode_branch, pccaf_forward, sa_module
from .sardata import (ComplexChipPair, DatasetManifest, GuidedTriple, derive_channels,
                      load_manifest, normalize_and_resize, read_chip, synth_chip, write_chip,
                      write_manifest)
from .seeding import derive_seed
from .tensor import (BatchNormState, Tape, Tensor, backward, batchnorm2d, bilinear_resize,
                     concat_channels, conv2d, cross_entropy, linear, matmul, maxpool2d, mul,
                     precision, relu, reshape, set_default_dtype, sigmoid, softmax, transpose)
from .weights import load_weights, read_weight_entries, save_weights

__version__ = "0.1.0"
