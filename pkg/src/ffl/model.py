"""Assembled classifiers: FFL (sub-networks + fusion head) and the vanilla baseline."""

import numpy as np

from . import tensor as T
from .fusion import AverageFusion, FusionConfig, FusionModule, MIN_CHANNEL
from .losses import LogitSet
from .nn import Module, build_ensemble, build_subnetwork, count_parameters, export_single
from .tensor import Tensor


class FFLModel(Module):
    """Sub-network ensemble whose last feature maps feed a fusion head.

    ``forward`` returns a LogitSet with every branch's logits, their mean
    and the fused logits.
    """

    def __init__(self, ensemble, head):
        self.ensemble = ensemble
        self.head = head

    @property
    def n(self):
        return self.ensemble.n

    @property
    def uses_fusion_module(self):
        return isinstance(self.head, FusionModule)

    def forward(self, x):
        outputs = self.ensemble(x)
        _, z_f = self.head([f for f, _ in outputs])
        return LogitSet.build([z for _, z in outputs], z_f)

    def export_branch(self, index):
        return export_single(self.ensemble, index)

    def fusion_overhead(self):
        return count_parameters(self.head) / count_parameters(self.ensemble)


class VanillaModel(Module):
    """A single sub-network trained with cross-entropy only."""

    def __init__(self, net):
        self.net = net

    n = 1

    def forward(self, x):
        _, logits = self.net(x)
        return LogitSet.build([logits])


def feature_shapes(ensemble, in_channels, image_size):
    """(channels, (h, w)) per sub-network, probed with a zero batch."""
    was_training = ensemble.training
    ensemble.eval()
    with T.no_grad():
        outputs = ensemble(Tensor(np.zeros((1, in_channels, image_size, image_size))))
    ensemble.train(was_training)
    return [(f.shape[1], f.shape[2:]) for f, _ in outputs]


def build_ffl(topology, specs, image_size, rng, fusion_mode=MIN_CHANNEL, batchnorm=True,
              use_fm=True, adapter="conv-resize"):
    ensemble = build_ensemble(topology, specs, rng)
    shapes = feature_shapes(ensemble, ensemble.specs[0].in_channels, image_size)
    channels = [c for c, _ in shapes]
    sizes = [s for _, s in shapes]
    m = ensemble.specs[0].num_classes
    if use_fm:
        cfg = FusionConfig.for_channels(channels, fusion_mode, batchnorm=batchnorm, adapter=adapter)
        head = FusionModule(cfg, sizes, m, rng)
    else:
        head = AverageFusion(channels, sizes, m, rng, adapter=adapter)
    return FFLModel(ensemble, head)


def build_vanilla(spec, rng):
    return VanillaModel(build_subnetwork(spec, rng))
