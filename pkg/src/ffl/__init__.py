"""Feature fusion learning on a small numpy autodiff core.

Parallel sub-networks feed their last feature maps to a fusion module
(depthwise then pointwise convolution over the concatenated maps). The
sub-networks, their logit ensemble and the fused classifier teach each
other online through temperature-softened KL terms.
"""

from .config import Config, load_config
from .data import Dataset, iterate, load_dataset, synth_blobs
from .errors import (
    BuildError, CheckpointError, ConfigError, ContractError, CorruptDatasetError,
    DimensionError, FFLError, NonFiniteLossError, TopologyError,
)
from .fusion import FusionConfig, FusionModule
from .losses import DistillConfig, LogitSet, ekd_loss, fkd_loss, total_loss
from .model import FFLModel, VanillaModel, build_ffl, build_vanilla
from .nn import EnsembleTopology, NetworkSpec, build_ensemble, build_subnetwork
from .tensor import Tensor, no_grad
from .trainer import evaluate, train

__version__ = "0.1.0"
