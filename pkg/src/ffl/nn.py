"""Layers, residual backbones and multi-branch ensembles."""

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import BuildError, ContractError, TopologyError
from .tensor import DTYPE, Tensor


class Parameter(Tensor):
    """A trainable leaf. ``decay`` marks weights subject to weight decay."""

    def __init__(self, data, decay=True):
        super().__init__(data, requires_grad=True)
        self.decay = decay


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, (Module, Parameter)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, Parameter)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for name, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + name, value
            else:
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, buf in getattr(self, "_buffers", {}).items():
            yield prefix + name, buf
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")

    def modules(self):
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state, strict=True):
        targets = {name: p.data for name, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        missing = set(targets) - set(state)
        unexpected = set(state) - set(targets)
        if strict and (missing or unexpected):
            raise ContractError(
                f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}"
            )
        for name, dst in targets.items():
            if name not in state:
                continue
            src = np.asarray(state[name], dtype=DTYPE)
            if src.shape != dst.shape:
                raise ContractError(f"{name}: shape {src.shape} does not match {dst.shape}")
            dst[...] = src


def count_parameters(module):
    return int(sum(p.size for p in module.parameters()))


def kaiming(rng, shape, fan_in, gain=2.0):
    return (rng.standard_normal(shape) * np.sqrt(gain / fan_in)).astype(DTYPE)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=0):
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(kaiming(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return T.conv2d(x, self.weight, self.stride, self.padding)


class DepthwiseConv2d(Module):
    """3x3 per-channel convolution, stride 1, shape preserving."""

    def __init__(self, channels, rng, kernel_size=3):
        self.weight = Parameter(kaiming(rng, (channels, 1, kernel_size, kernel_size), kernel_size ** 2))
        self.padding = kernel_size // 2

    def forward(self, x):
        return T.depthwise_conv2d(x, self.weight, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.9, eps=1e-5):
        self.weight = Parameter(np.ones(channels), decay=False)
        self.bias = Parameter(np.zeros(channels), decay=False)
        self._buffers = {
            "running_mean": np.zeros(channels, dtype=DTYPE),
            "running_var": np.ones(channels, dtype=DTYPE),
        }
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return T.batchnorm2d(
            x, self.weight, self.bias,
            self._buffers["running_mean"], self._buffers["running_var"],
            self.training, self.momentum, self.eps,
        )


class Linear(Module):
    def __init__(self, in_features, out_features, rng):
        self.weight = Parameter(kaiming(rng, (in_features, out_features), in_features, gain=1.0))
        self.bias = Parameter(np.zeros(out_features), decay=False)

    def forward(self, x):
        return T.add(T.matmul(x, self.weight), self.bias)


class Identity(Module):
    def forward(self, x):
        return x


class BasicBlock(Module):
    """conv-bn-relu, conv-bn, add shortcut, relu."""

    def __init__(self, in_channels, out_channels, stride, rng):
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng, stride=stride, padding=1)
        self.bn1 = BatchNorm2d(out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng, padding=1)
        self.bn2 = BatchNorm2d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = [Conv2d(in_channels, out_channels, 1, rng, stride=stride), BatchNorm2d(out_channels)]
        else:
            self.shortcut = []

    def forward(self, x):
        out = T.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x
        for layer in self.shortcut:
            skip = layer(skip)
        return T.relu(T.add(out, skip))


class Stage(Module):
    def __init__(self, in_channels, out_channels, num_blocks, stride, rng):
        self.blocks = [
            BasicBlock(in_channels if i == 0 else out_channels, out_channels, stride if i == 0 else 1, rng)
            for i in range(num_blocks)
        ]

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x


class Stem(Module):
    def __init__(self, in_channels, out_channels, rng):
        self.conv = Conv2d(in_channels, out_channels, 3, rng, padding=1)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, x):
        return T.relu(self.bn(self.conv(x)))


@dataclass(frozen=True)
class NetworkSpec:
    """Declarative residual backbone plus GAP + linear classifier.

    ``stages`` lists output channels per stage; ``blocks`` and ``strides``
    default to one block per stage, stride 1 for the first stage and 2 for
    the rest. ``feature_channels`` is optional and, when given, is checked
    against what the backbone actually emits.
    """

    stages: tuple
    num_classes: int
    blocks: tuple = None
    strides: tuple = None
    in_channels: int = 3
    feature_channels: int = None
    name: str = "resnet"

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(int(c) for c in self.stages))
        n = len(self.stages)
        if self.blocks is None:
            object.__setattr__(self, "blocks", (1,) * n)
        if self.strides is None:
            object.__setattr__(self, "strides", (1,) + (2,) * (n - 1))
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))

    def validate(self):
        if not self.stages:
            raise BuildError(f"{self.name}: at least one stage is required")
        if self.num_classes < 2:
            raise BuildError(f"{self.name}: need at least 2 classes, got {self.num_classes}")
        if any(c < 1 for c in self.stages):
            raise BuildError(f"{self.name}: stage channel counts must be >= 1, got {self.stages}")
        if len(self.blocks) != len(self.stages) or len(self.strides) != len(self.stages):
            raise BuildError(f"{self.name}: stages, blocks and strides must have equal length")
        if any(b < 1 for b in self.blocks) or any(s < 1 for s in self.strides):
            raise BuildError(f"{self.name}: block counts and strides must be >= 1")
        if self.in_channels < 1:
            raise BuildError(f"{self.name}: in_channels must be >= 1")

    @property
    def downsample(self):
        return int(np.prod(self.strides))

    def output_extent(self, size):
        for s in self.strides:
            size = (size + 2 - 3) // s + 1
        return size


def _make_stages(spec, rng, start=0, stop=None):
    stop = len(spec.stages) if stop is None else stop
    stages = []
    for i in range(start, stop):
        cin = spec.stages[i - 1] if i > 0 else spec.stages[0]
        stages.append(Stage(cin, spec.stages[i], spec.blocks[i], spec.strides[i], rng))
    return stages


class SubNetwork(Module):
    """Stem, residual stages, then GAP + linear. Returns (feature map, logits)."""

    def __init__(self, spec, rng):
        self.spec = spec
        self.stem = Stem(spec.in_channels, spec.stages[0], rng)
        self.stages = _make_stages(spec, rng)
        self.fc = Linear(spec.stages[-1], spec.num_classes, rng)

    def forward(self, x):
        h = self.stem(x)
        for stage in self.stages:
            h = stage(h)
        return h, self.fc(T.global_avg_pool(h))


def _probe(spec, net):
    size = 2 * spec.downsample
    was_training = net.training
    net.eval()
    with T.no_grad():
        feature, logits = net(Tensor(np.zeros((1, spec.in_channels, size, size))))
    net.train(was_training)
    return feature, logits


def build_subnetwork(spec, rng=None):
    if rng is None:
        rng = np.random.default_rng(0)
    spec.validate()
    net = SubNetwork(spec, rng)
    feature, logits = _probe(spec, net)
    if spec.feature_channels is not None and feature.shape[1] != spec.feature_channels:
        raise BuildError(
            f"{spec.name}: declared feature_channels={spec.feature_channels} but backbone emits {feature.shape[1]}"
        )
    if logits.shape[1] != spec.num_classes:
        raise BuildError(f"{spec.name}: head emits {logits.shape[1]} logits, expected {spec.num_classes}")
    return net


CASE1 = "case1"
CASE2 = "case2"


@dataclass(frozen=True)
class EnsembleTopology:
    """``mode`` is CASE1 (shared trunk) or CASE2 (independent streams).

    In CASE1, ``shared_stages`` stages (plus the stem) are shared; ``None``
    means all but the last stage.
    """

    mode: str
    n: int = 2
    shared_stages: int = None
    identical_init: bool = False


class Branch(Module):
    def __init__(self, spec, start, rng):
        self.stages = _make_stages(spec, rng, start)
        self.fc = Linear(spec.stages[-1], spec.num_classes, rng)

    def forward(self, h):
        for stage in self.stages:
            h = stage(h)
        return h, self.fc(T.global_avg_pool(h))


class Ensemble(Module):
    """n sub-networks, either sharing a low-level trunk or fully independent.

    ``forward`` returns a list of ``(feature map, logits)`` pairs, one per
    sub-network, in branch order.
    """

    def __init__(self, topology, specs, rng):
        self.topology = topology
        self.specs = list(specs)
        if topology.mode == CASE1:
            spec = specs[0]
            self.shared_depth = topology.shared_stages
            self.stem = Stem(spec.in_channels, spec.stages[0], rng)
            self.shared = _make_stages(spec, rng, 0, self.shared_depth)
            self.branches = [Branch(spec, self.shared_depth, rng) for _ in range(topology.n)]
        else:
            self.nets = [SubNetwork(spec, rng) for spec in specs]

    @property
    def n(self):
        return self.topology.n

    def forward(self, x):
        if self.topology.mode == CASE1:
            h = self.stem(x)
            for stage in self.shared:
                h = stage(h)
            return [branch(h) for branch in self.branches]
        return [net(x) for net in self.nets]

    def shared_parameters(self):
        if self.topology.mode != CASE1:
            return []
        params = self.stem.parameters()
        for stage in self.shared:
            params += stage.parameters()
        return params


def build_ensemble(topology, specs, rng=None):
    if rng is None:
        rng = np.random.default_rng(0)
    if topology.n < 2:
        raise TopologyError(f"an ensemble needs n >= 2 sub-networks, got {topology.n}")
    if topology.mode not in (CASE1, CASE2):
        raise TopologyError(f"unknown topology mode {topology.mode!r}")
    specs = list(specs)
    if len(specs) == 1:
        specs = specs * topology.n
    if len(specs) != topology.n:
        raise TopologyError(f"got {len(specs)} specs for n={topology.n} sub-networks")
    for spec in specs:
        spec.validate()

    if topology.mode == CASE1:
        if any(s != specs[0] for s in specs):
            raise TopologyError("case1 (shared trunk) requires identical sub-network specs")
        depth = len(specs[0].stages) - 1 if topology.shared_stages is None else topology.shared_stages
        if not 0 <= depth < len(specs[0].stages):
            raise TopologyError(
                f"shared_stages={depth} must be in [0, {len(specs[0].stages)}) so each branch owns a stage"
            )
        topology = EnsembleTopology(CASE1, topology.n, depth, topology.identical_init)

    if len({s.num_classes for s in specs}) != 1:
        raise TopologyError("all sub-networks must predict the same number of classes")

    ens = Ensemble(topology, specs, rng)
    if topology.identical_init:
        members = ens.branches if topology.mode == CASE1 else ens.nets
        reference = members[0].state_dict()
        for member in members[1:]:
            member.load_state_dict(reference)
    return ens


def export_single(ensemble, index):
    """Standalone copy of sub-network ``index`` with the same parameters."""
    if not 0 <= index < ensemble.n:
        raise ContractError(f"branch index {index} out of range for n={ensemble.n}")
    if ensemble.topology.mode == CASE2:
        net = copy.deepcopy(ensemble.nets[index])
    else:
        spec = ensemble.specs[index]
        net = SubNetwork.__new__(SubNetwork)
        net.spec = spec
        net.stem = copy.deepcopy(ensemble.stem)
        net.stages = copy.deepcopy(ensemble.shared) + copy.deepcopy(ensemble.branches[index].stages)
        net.fc = copy.deepcopy(ensemble.branches[index].fc)
    net.train(ensemble.training)
    return net
