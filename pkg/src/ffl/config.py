"""Typed, sectioned run configuration.

A config file is TOML with sections ``model``, ``fusion``, ``distill``,
``data`` and ``train`` plus an optional top-level ``ablation`` letter.
Dotted ``section.key=value`` overrides are applied after the file and
take precedence over it. Unknown keys are rejected.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import DatasetSpec
from .errors import ConfigError
from .fusion import MIN_CHANNEL, SUM_CHANNEL
from .losses import DistillConfig
from .nn import CASE1, CASE2, EnsembleTopology, NetworkSpec

VANILLA = "vanilla"

# ablation presets: (fusion module, ensemble KD, fusion KD)
ABLATIONS = {
    "A": (True, True, True),
    "B": (False, True, True),
    "C": (True, False, True),
    "D": (True, False, False),
}


@dataclass
class ModelSection:
    mode: str = CASE1
    n: int = 2
    stages: list = field(default_factory=lambda: [8, 16, 32])
    blocks: list = field(default_factory=list)
    strides: list = field(default_factory=list)
    shared_stages: int = -1
    identical_init: bool = False
    branch_stages: list = field(default_factory=list)
    branch_strides: list = field(default_factory=list)
    branch_blocks: list = field(default_factory=list)


@dataclass
class FusionSection:
    mode: str = MIN_CHANNEL
    batchnorm: bool = True
    adapter: str = "conv-resize"


@dataclass
class DistillSection:
    temperature: float = 3.0
    detach_teacher: bool = True


@dataclass
class DataSection:
    kind: str = "synthetic"
    root: str = ""
    batch_size: int = 128
    augment: bool = False
    seed: int = 0
    classes: int = 4
    samples: int = 2000
    test_samples: int = 1000
    image_size: int = 16
    channels: int = 3
    noise: float = 1.0


@dataclass
class TrainSection:
    epochs: int = 40
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: list = field(default_factory=lambda: [20, 30])
    decay: float = 0.1
    seed: int = 0
    eval_every: int = 1
    checkpoint_every: int = 0
    use_fm: bool = True
    use_ekd: bool = True
    use_fkd: bool = True


SECTIONS = {
    "model": ModelSection,
    "fusion": FusionSection,
    "distill": DistillSection,
    "data": DataSection,
    "train": TrainSection,
}


def _coerce(key, value, default):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, list):
        if isinstance(value, list):
            return value
    raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}", key=key)


@dataclass
class Config:
    model: ModelSection = field(default_factory=ModelSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    distill: DistillSection = field(default_factory=DistillSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    ablation: str = ""

    @classmethod
    def from_dict(cls, raw):
        cfg = cls()
        for name, value in raw.items():
            if name == "ablation":
                cfg.set("ablation", value)
            elif name in SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigError(f"[{name}] must be a table", key=name)
                for key, item in value.items():
                    cfg.set(f"{name}.{key}", item)
            else:
                raise ConfigError(f"unknown config key {name!r}", key=name)
        cfg.validate()
        return cfg

    def to_dict(self):
        out = {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}
        out["ablation"] = self.ablation
        return out

    def set(self, dotted, value):
        if dotted == "ablation":
            if not isinstance(value, str) or value.upper() not in ABLATIONS and value != "":
                raise ConfigError(f"ablation must be one of {sorted(ABLATIONS)}, got {value!r}", key=dotted)
            self.ablation = value.upper()
            if self.ablation:
                self.train.use_fm, self.train.use_ekd, self.train.use_fkd = ABLATIONS[self.ablation]
            return
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or not key:
            raise ConfigError(f"unknown config key {dotted!r}", key=dotted)
        target = getattr(self, section)
        names = {f.name for f in dataclasses.fields(target)}
        if key not in names:
            raise ConfigError(f"unknown config key {dotted!r}", key=dotted)
        setattr(target, key, _coerce(dotted, value, getattr(target, key)))

    def override(self, assignments):
        """Apply ``section.key=value`` strings; values are parsed as TOML literals."""
        for item in assignments:
            key, sep, text = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not of the form key=value", key=item)
            key = key.strip()
            try:
                value = tomllib.loads(f"v = {text.strip()}")["v"]
            except tomllib.TOMLDecodeError:
                value = text.strip()
            self.set(key, value)
        self.validate()
        return self

    def validate(self):
        m, t, d = self.model, self.train, self.data
        if m.mode not in (CASE1, CASE2, VANILLA):
            raise ConfigError(f"model.mode must be case1, case2 or vanilla, got {m.mode!r}", key="model.mode")
        if m.mode != VANILLA and m.n < 2:
            raise ConfigError(f"model.n must be >= 2, got {m.n}", key="model.n")
        if not m.stages or any(not isinstance(c, int) or c < 1 for c in m.stages):
            raise ConfigError("model.stages must be a non-empty list of positive ints", key="model.stages")
        if self.fusion.mode not in (MIN_CHANNEL, SUM_CHANNEL):
            raise ConfigError(f"fusion.mode must be min-channel or sum-channel", key="fusion.mode")
        if self.fusion.adapter not in ("none", "conv-resize"):
            raise ConfigError("fusion.adapter must be none or conv-resize", key="fusion.adapter")
        if not self.distill.temperature > 0:
            raise ConfigError("distill.temperature must be positive", key="distill.temperature")
        if d.kind not in ("synthetic", "cifar10", "mnist"):
            raise ConfigError(f"data.kind must be synthetic, cifar10 or mnist, got {d.kind!r}", key="data.kind")
        if d.kind != "synthetic" and not d.root:
            raise ConfigError(f"data.root is required for data.kind={d.kind}", key="data.root")
        if d.batch_size < 1:
            raise ConfigError("data.batch_size must be >= 1", key="data.batch_size")
        if d.kind == "synthetic" and d.classes < 2:
            raise ConfigError("data.classes must be >= 2", key="data.classes")
        if t.epochs < 0:
            raise ConfigError("train.epochs must be >= 0", key="train.epochs")
        if not t.lr > 0:
            raise ConfigError("train.lr must be positive", key="train.lr")
        if not 0 < t.decay < 1:
            raise ConfigError("train.decay must lie in (0, 1)", key="train.decay")
        if any(b <= a for a, b in zip(t.milestones, t.milestones[1:])):
            raise ConfigError("train.milestones must be strictly increasing", key="train.milestones")
        if t.eval_every < 1:
            raise ConfigError("train.eval_every must be >= 1", key="train.eval_every")
        if m.mode == CASE2 and m.branch_stages and len(m.branch_stages) != m.n:
            raise ConfigError(f"model.branch_stages needs {m.n} entries", key="model.branch_stages")
        return self

    def digest(self):
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).digest()

    # --- derived objects -------------------------------------------------------

    @property
    def num_classes(self):
        return self.data.classes if self.data.kind == "synthetic" else 10

    @property
    def in_channels(self):
        return {"synthetic": self.data.channels, "cifar10": 3, "mnist": 1}[self.data.kind]

    @property
    def image_size(self):
        return {"synthetic": self.data.image_size, "cifar10": 32, "mnist": 28}[self.data.kind]

    def _spec(self, stages, strides, blocks, name):
        return NetworkSpec(
            stages=tuple(stages), num_classes=self.num_classes,
            blocks=tuple(blocks) if blocks else None, strides=tuple(strides) if strides else None,
            in_channels=self.in_channels, name=name,
        )

    def network_specs(self):
        m = self.model
        if m.mode == CASE2 and m.branch_stages:
            pick = lambda seq, i: seq[i] if seq else None
            return [
                self._spec(m.branch_stages[i], pick(m.branch_strides, i), pick(m.branch_blocks, i), f"net{i}")
                for i in range(m.n)
            ]
        n = 1 if m.mode == VANILLA else m.n
        return [self._spec(m.stages, m.strides, m.blocks, "resnet")] * n

    def topology(self):
        m = self.model
        shared = None if m.shared_stages < 0 else m.shared_stages
        return EnsembleTopology(m.mode, m.n, shared, m.identical_init)

    def distill_config(self):
        return DistillConfig(self.distill.temperature, self.distill.detach_teacher)

    def dataset_spec(self, split):
        d = self.data
        return DatasetSpec(
            kind=d.kind, root=d.root, split=split, augment=d.augment and split == "train",
            num_classes=self.num_classes, batch_size=d.batch_size, seed=d.seed,
            samples=d.samples, test_samples=d.test_samples, image_size=d.image_size,
            channels=d.channels, noise=d.noise,
        )


def load_config(path=None, overrides=()):
    if path is None:
        raw = {}
    else:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}", key="--config") from None
    return Config.from_dict(raw).override(overrides)


def _toml_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    return "[" + ", ".join(_toml_value(v) for v in value) + "]"


def dumps(cfg):
    """Serialize as TOML; ``load_config`` of the result reproduces ``cfg``."""
    data = cfg.to_dict()
    lines = [f"ablation = {_toml_value(data.pop('ablation'))}", ""]
    for section, values in data.items():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {_toml_value(value)}" for key, value in values.items())
        lines.append("")
    return "\n".join(lines)
