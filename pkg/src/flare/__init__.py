"""FLARE: low-rank token mixing through learned latent queries, on numpy."""

from .checkpoint import Checkpoint, checkpoint_load, checkpoint_save
from .data import (NormStats, Sample, cg_solve, generate_darcy_sample, normalize, read_pcf,
                   write_pcf)
from .errors import (ConfigError, ConvergenceError, DimensionError, FlareError, FormatError,
                     InvalidValueError, MagicError, TensorCountError, TruncationError,
                     VersionError)
from .mixer import (communication_matrix, flare_layer_forward, flare_mix_fused,
                    flare_mix_materialized, head_merge, head_split, vanilla_attention)
from .model import ModelConfig, init_params, model_forward, param_count
from .spectral import dense_spectrum_oracle, effective_rank, flare_spectrum, symmetric_eig
from .tensor import Tensor, no_grad
from .train import TrainConfig, fit, relative_l2

__version__ = "0.1.0"
