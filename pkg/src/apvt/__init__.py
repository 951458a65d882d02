"""Aggregated Pyramid Vision Transformer in numpy, with reverse-mode autodiff.

Public surface: the tensor primitives, attention / encoder blocks, model
assembly, CIFAR-10 + checkpoint I/O, the training pipeline and the CLI.
"""

from .attention import AttentionParams, TokenMap, attention, spatial_reduce, sra_forward
from .blocks import (ConfigError, ConvFFNParams, EncoderPathParams, GroupEncoderParams,
                     conv_ffn_forward, encoder_path_forward, group_encoder_forward)
from .data_io import (CheckpointEntryError, CheckpointError, CheckpointMagicError,
                      CheckpointVersionError, DataFormatError, Dataset, load_cifar10,
                      load_checkpoint, load_checkpoint_into, save_checkpoint)
from .gradcheck import grad_check
from .kernels import BACKEND as kernel_backend
from .model import (REFERENCE_PARAMS, VARIANTS, Model, ModelConfig, StageSpec,
                    build_model, count_parameters, forward, variant_config)
from .tensor import (DimensionError, FiniteCheckError, Tensor, backward, no_grad,
                     set_debug_checks)
from .training import (AdamW, BenchResult, TrainRecipe, TrainResult,
                       benchmark_inference, evaluate, lr_at_epoch, train)

__version__ = "0.1.0"
