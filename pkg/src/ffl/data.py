"""Dataset readers, a synthetic task generator and batch iteration.

Images are stored normalized as float32 [N, C, H, W]; labels as int64.
"""

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, CorruptDatasetError
from .tensor import Tensor

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
MNIST_MEAN = (0.1307,)
MNIST_STD = (0.3081,)

CIFAR10_RECORD = 3073
CIFAR10_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    mean: tuple
    std: tuple
    name: str = ""

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def histogram(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def denormalize(self, images=None):
        """Map normalized images back to [0, 1] pixel intensities."""
        images = self.images if images is None else images
        mean = np.asarray(self.mean, dtype=np.float32)[None, :, None, None]
        std = np.asarray(self.std, dtype=np.float32)[None, :, None, None]
        return images * std + mean


def normalize(raw, mean, std):
    """uint8 [N, C, H, W] -> (raw / 255 - mean) / std per channel."""
    x = raw.astype(np.float32) / np.float32(255)
    mean = np.asarray(mean, dtype=np.float32)[None, :, None, None]
    std = np.asarray(std, dtype=np.float32)[None, :, None, None]
    return (x - mean) / std


# --- CIFAR-10 binary --------------------------------------------------------


def read_cifar10_file(path):
    """Parse 3073-byte records: one label byte, then 3072 channel-planar pixels."""
    path = Path(path)
    raw = path.read_bytes()
    whole, rest = divmod(len(raw), CIFAR10_RECORD)
    if rest:
        raise CorruptDatasetError(
            f"{path}: truncated record at offset {whole * CIFAR10_RECORD} "
            f"({rest} of {CIFAR10_RECORD} bytes)"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(whole, CIFAR10_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise CorruptDatasetError(
            f"{path}: label byte {labels[bad[0]]} > 9 at offset {bad[0] * CIFAR10_RECORD}"
        )
    return records[:, 1:].reshape(whole, 3, 32, 32), labels


def _cifar_dir(root):
    root = Path(root)
    nested = root / "cifar-10-batches-bin"
    return nested if nested.is_dir() else root


def load_cifar10(root, split="train", mean=CIFAR10_MEAN, std=CIFAR10_STD):
    if split not in CIFAR10_FILES:
        raise ContractError(f"unknown split {split!r}")
    folder = _cifar_dir(root)
    images, labels = [], []
    for name in CIFAR10_FILES[split]:
        path = folder / name
        if not path.is_file():
            raise FileNotFoundError(f"CIFAR-10 file {path} not found")
        x, y = read_cifar10_file(path)
        images.append(x)
        labels.append(y)
    return Dataset(
        normalize(np.concatenate(images), mean, std), np.concatenate(labels), 10,
        tuple(mean), tuple(std), name=f"cifar10-{split}",
    )


# --- MNIST IDX ----------------------------------------------------------------


def _read_maybe_gz(path):
    path = Path(path)
    if path.is_file():
        return path.read_bytes()
    gz = path.with_name(path.name + ".gz")
    if gz.is_file():
        return gzip.decompress(gz.read_bytes())
    raise FileNotFoundError(f"IDX file {path} not found")


def read_idx(raw, magic, path="<idx>"):
    """Return the uint8 payload of an IDX buffer reshaped by its header."""
    if len(raw) < 4:
        raise CorruptDatasetError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise CorruptDatasetError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise CorruptDatasetError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    if len(raw) - header != expected:
        raise CorruptDatasetError(
            f"{path}: payload has {len(raw) - header} bytes at offset {header}, header declares {expected}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist_idx(root, split="train", mean=MNIST_MEAN, std=MNIST_STD):
    if split not in MNIST_FILES:
        raise ContractError(f"unknown split {split!r}")
    image_file, label_file = (Path(root) / f for f in MNIST_FILES[split])
    images = read_idx(_read_maybe_gz(image_file), IDX_IMAGES_MAGIC, image_file)
    labels = read_idx(_read_maybe_gz(label_file), IDX_LABELS_MAGIC, label_file).astype(np.int64)
    if len(labels) != len(images):
        raise CorruptDatasetError(
            f"{label_file}: {len(labels)} labels for {len(images)} images in {image_file}"
        )
    if labels.size and labels.max() > 9:
        raise CorruptDatasetError(f"{label_file}: label {labels.max()} > 9")
    return Dataset(
        normalize(images[:, None], mean, std), labels, 10, tuple(mean), tuple(std), name=f"mnist-{split}",
    )


# --- synthetic ------------------------------------------------------------------


def blob_template(label, num_classes, image_size, channels=3, shift=(0.0, 0.0), phase=0.0):
    """Class pattern: a Gaussian bump whose position and a grating whose
    frequency and orientation depend on the class, tinted per channel."""
    angle = 2 * np.pi * label / num_classes
    size = image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = (size - 1) / 2 + size / 4 * np.sin(angle) + shift[0]
    cx = (size - 1) / 2 + size / 4 * np.cos(angle) + shift[1]
    bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (size / 8) ** 2))
    freq = 1 + label % 3
    grating = 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) / size + phase)
    tint = 1 + 0.5 * np.cos(angle + 2 * np.pi * np.arange(channels) / max(channels, 1))
    return tint[:, None, None] * (bump + grating)[None]


def synth_blobs(num_classes, samples, image_size=16, seed=0, noise=1.0, channels=3):
    """Balanced, deterministic class-conditional images.

    ``noise`` scales every nuisance factor at once: additive Gaussian pixel
    noise (std ``noise``), bump position jitter, grating phase and contrast.
    With ``noise=0`` every image equals its class template.
    """
    if num_classes < 2:
        raise ContractError(f"need at least 2 classes, got {num_classes}")
    rng = np.random.default_rng(seed)
    labels = np.arange(samples) % num_classes
    labels = labels[rng.permutation(samples)]
    images = np.empty((samples, channels, image_size, image_size), dtype=np.float32)
    for i, label in enumerate(labels):
        shift = noise * rng.normal(0, image_size / 16, size=2)
        phase = noise * rng.uniform(-np.pi, np.pi)
        contrast = 1 + noise * 0.25 * rng.standard_normal()
        img = contrast * blob_template(label, num_classes, image_size, channels, shift, phase)
        images[i] = img + noise * rng.standard_normal(img.shape)
    return Dataset(images, labels.astype(np.int64), num_classes, (0.0,) * channels, (1.0,) * channels,
                   name="synthetic")


# --- specs and iteration ------------------------------------------------------------


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    root: str = ""
    split: str = "train"
    augment: bool = False
    num_classes: int = 4
    batch_size: int = 128
    seed: int = 0
    samples: int = 2000
    test_samples: int = 1000
    image_size: int = 16
    channels: int = 3
    noise: float = 1.0


SYNTH_TEST_SEED_OFFSET = 7919


def load_dataset(spec):
    if spec.kind == "synthetic":
        if spec.split == "train":
            return synth_blobs(spec.num_classes, spec.samples, spec.image_size, spec.seed, spec.noise, spec.channels)
        return synth_blobs(spec.num_classes, spec.test_samples, spec.image_size,
                           spec.seed + SYNTH_TEST_SEED_OFFSET, spec.noise, spec.channels)
    if spec.kind in ("cifar10", "mnist"):
        if not spec.root:
            raise ConfigError(f"data.root is required for {spec.kind}", key="data.root")
        loader = load_cifar10 if spec.kind == "cifar10" else load_mnist_idx
        try:
            return loader(spec.root, spec.split)
        except FileNotFoundError as exc:
            raise ConfigError(str(exc), key="data.root") from None
    raise ConfigError(f"unknown dataset kind {spec.kind!r}", key="data.kind")


@dataclass
class Batch:
    images: Tensor
    labels: np.ndarray
    onehot: np.ndarray

    def __len__(self):
        return len(self.labels)


def one_hot(labels, num_classes):
    out = np.zeros((len(labels), num_classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1
    return out


def augment_batch(images, rng, pad=4):
    """Zero-pad by ``pad``, random crop back to size, random horizontal flip."""
    n, c, h, w = images.shape
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=images.dtype)
    padded[:, :, pad:pad + h, pad:pad + w] = images
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def iterate(dataset, batch_size, shuffle=False, augment=False, seed=0, epoch=0):
    """Yield the batches of one epoch.

    Shuffling and augmentation draw from a generator keyed by
    ``(seed, epoch)``, so any epoch can be replayed on its own.
    """
    if batch_size < 1:
        raise ContractError(f"batch size must be >= 1, got {batch_size}")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(dataset)) if shuffle else np.arange(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        images = dataset.images[idx]
        if augment:
            images = augment_batch(images, rng)
        labels = dataset.labels[idx]
        yield Batch(Tensor(images), labels, one_hot(labels, dataset.num_classes))
