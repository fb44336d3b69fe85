"""Feature-map fusion: adapt resolutions, concatenate, depthwise + pointwise conv.

The fused map feeds its own GAP + linear classifier whose logits act as the
fused teacher during training.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import BatchNorm2d, Conv2d, DepthwiseConv2d, Identity, Linear, Module, count_parameters

MIN_CHANNEL = "min-channel"
SUM_CHANNEL = "sum-channel"


@dataclass(frozen=True)
class FusionConfig:
    input_channels: tuple
    out_channels: int
    batchnorm: bool = True
    adapter: str = "conv-resize"
    depthwise_kernel: int = 3

    @property
    def M(self):
        return int(sum(self.input_channels))

    @property
    def N(self):
        return self.out_channels

    @classmethod
    def for_channels(cls, channels, mode=MIN_CHANNEL, **kwargs):
        """``min-channel`` sets N to the smallest C_i, ``sum-channel`` to their sum."""
        channels = tuple(int(c) for c in channels)
        if mode == MIN_CHANNEL:
            n = min(channels)
        elif mode == SUM_CHANNEL:
            n = sum(channels)
        else:
            raise ConfigError(f"unknown fusion mode {mode!r}", key="fusion.mode")
        return cls(channels, n, **kwargs)

    def validate(self):
        if self.out_channels < 1:
            raise ConfigError(f"fusion output channels must be >= 1, got {self.out_channels}")
        if self.adapter not in ("none", "conv-resize"):
            raise ConfigError(f"unknown adapter policy {self.adapter!r}")


def _adapter_stride(size, target):
    (h, w), (th, tw) = size, target
    if h % th or w % tw or h // th != w // tw:
        raise ConfigError(
            f"cannot adapt a {h}x{w} feature map to {th}x{tw}: the ratio must be one integer stride"
        )
    return h // th


class ResolutionAdapter(Module):
    """Strided 3x3 conv (C -> C) that brings a map to the target extents."""

    def __init__(self, channels, size, target, rng):
        self.stride = _adapter_stride(size, target)
        self.target = tuple(target)
        self.conv = Conv2d(channels, channels, 3, rng, stride=self.stride, padding=1)

    def forward(self, x):
        return self.conv(x)


def make_adapters(channels, sizes, rng, policy="conv-resize"):
    """One adapter per input; inputs already at the smallest extent pass through."""
    target = min(sizes, key=lambda s: s[0] * s[1])
    adapters = []
    for c, size in zip(channels, sizes):
        if tuple(size) == tuple(target):
            adapters.append(Identity())
        elif policy == "none":
            raise ConfigError(
                f"feature maps differ in resolution ({size} vs {target}) but fusion.adapter is 'none'"
            )
        else:
            adapters.append(ResolutionAdapter(c, size, target, rng))
    return adapters, tuple(target)


def adapt_resolution(feature, adapter):
    return adapter(feature)


class FusionModule(Module):
    """concat -> depthwise 3x3 (M) -> [bn, relu] -> pointwise 1x1 (M->N) -> [bn, relu].

    ``cfg.batchnorm=False`` drops both bn/relu pairs, leaving the bare pair
    of convolutions.
    """

    def __init__(self, cfg, sizes, num_classes, rng):
        cfg.validate()
        self.cfg = cfg
        self.adapters, self.target = make_adapters(cfg.input_channels, sizes, rng, cfg.adapter)
        self.depthwise = DepthwiseConv2d(cfg.M, rng, cfg.depthwise_kernel)
        self.pointwise = Conv2d(cfg.M, cfg.N, 1, rng)
        if cfg.batchnorm:
            self.bn1 = BatchNorm2d(cfg.M)
            self.bn2 = BatchNorm2d(cfg.N)
        self.fc = Linear(cfg.N, num_classes, rng)

    def adapt(self, features):
        return [adapter(f) for adapter, f in zip(self.adapters, features)]

    def fuse(self, features):
        """Fused feature map [b, N, h, w] from already adapted features."""
        channels = tuple(f.shape[1] for f in features)
        if channels != self.cfg.input_channels:
            raise ConfigError(
                f"fusion built for channels {self.cfg.input_channels} (M={self.cfg.M}) "
                f"but received {channels} (sum {int(np.sum(channels))})"
            )
        h = self.depthwise(T.concat_channels(features))
        if self.cfg.batchnorm:
            h = T.relu(self.bn1(h))
        h = self.pointwise(h)
        if self.cfg.batchnorm:
            h = T.relu(self.bn2(h))
        return h

    def classify(self, fused):
        return self.fc(T.global_avg_pool(fused))

    def forward(self, features):
        fused = self.fuse(self.adapt(features))
        return fused, self.classify(fused)


class AverageFusion(Module):
    """No-FM ablation: average the (equalized) features, then classify.

    Unequal channel counts are first projected to the smallest one with a
    1x1 conv, since an elementwise average is undefined otherwise.
    """

    def __init__(self, channels, sizes, num_classes, rng, adapter="conv-resize"):
        self.adapters, self.target = make_adapters(channels, sizes, rng, adapter)
        width = min(channels)
        self.projections = [Identity() if c == width else Conv2d(c, width, 1, rng) for c in channels]
        self.fc = Linear(width, num_classes, rng)

    def forward(self, features):
        mapped = [p(a(f)) for p, a, f in zip(self.projections, self.adapters, features)]
        acc = mapped[0]
        for f in mapped[1:]:
            acc = T.add(acc, f)
        fused = T.scale(acc, 1.0 / len(mapped))
        return fused, self.fc(T.global_avg_pool(fused))


def fuse(features, module):
    return module.fuse(features)


def fused_classify(fused, module):
    return module.classify(fused)


def parameter_overhead(ensemble, fusion):
    """Fusion-module parameter count relative to the ensemble without it."""
    return count_parameters(fusion) / count_parameters(ensemble)
