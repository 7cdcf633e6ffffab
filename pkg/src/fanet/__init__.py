"""Fastidious-attention segmentation networks on a small numpy autodiff engine."""

from .attention import FIAM, FSAM, ExcitationParams, SEBlock, fastidious_excite
from .autograd import Parameter, Tensor, backward, no_grad, precision
from .data import AugmentConfig, SegmentationSample, augment, load_voc_dir, save_voc_dir, synth_orange
from .errors import (ConfigError, DegenerateStatisticsError, FanetError, GradientError, LabelError,
                     PairingError, ShapeError, TrainingDiverged)
from .metrics import ConfusionMatrix, accumulate, compute_metrics, prf_matrices
from .models import VARIANTS, ArchitectureSpec, SegmentationNet, build, param_count
from .train import TrainConfig, train

__version__ = "0.1.0"
