"""Datasets: a frozen synthetic classification fixture and a CIFAR-10 binary reader."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .engine import Batch

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)
DATASET_FORMAT = "gap-dataset-1"


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSource:
    classes: int = 8
    train_samples: int = 4000
    test_samples: int = 1000
    image_size: tuple[int, int, int] = (3, 16, 16)
    seed: int = 0
    # frozen calibration: see tests/test_data.py::test_synthetic_calibration
    blobs: int = 3
    blob_sigma: float = 1.6
    jitter: int = 6
    noise: float = 1.0
    amplitude_spread: float = 0.3


@dataclass(frozen=True)
class Cifar10Source:
    directory: str


@dataclass(frozen=True)
class DatasetSpec:
    source: SyntheticSource | Cifar10Source = field(default_factory=SyntheticSource)
    crop: bool = False
    mirror: bool = False
    pad: int = 4
    normalize: bool = True

    def __post_init__(self):
        if isinstance(self.source, SyntheticSource) and self.source.classes < 2:
            raise ValueError("synthetic datasets need at least 2 classes")


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    crop: bool = False
    mirror: bool = False
    pad: int = 4
    name: str = "dataset"

    @property
    def num_classes(self) -> int:
        return int(max(self.y_train.max(), self.y_test.max())) + 1

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.x_train.shape[1:])

    def batches(self, batch_size: int, rng: np.random.Generator | None = None, augment: bool = True) -> Iterator[Batch]:
        """Shuffled training batches (in order when ``rng`` is None).  The last
        partial batch is kept."""
        n = len(self.x_train)
        order = rng.permutation(n) if rng is not None else np.arange(n)
        for i in range(0, n, batch_size):
            idx = order[i : i + batch_size]
            x = self.x_train[idx]
            if augment and rng is not None and (self.crop or self.mirror):
                x = augment_batch(x, rng, self.crop, self.mirror, self.pad)
            yield Batch(np.ascontiguousarray(x), self.y_train[idx])


def augment_batch(x: np.ndarray, rng: np.random.Generator, crop: bool, mirror: bool, pad: int = 4) -> np.ndarray:
    """Zero-pad then random crop, and random horizontal mirror."""
    n, c, h, w = x.shape
    out = x.copy()
    if crop:
        padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        padded[:, :, pad : pad + h, pad : pad + w] = x
        dy = rng.integers(0, 2 * pad + 1, n)
        dx = rng.integers(0, 2 * pad + 1, n)
        for i in range(n):
            out[i] = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
    if mirror:
        flip = rng.random(n) < 0.5
        out[flip] = out[flip][..., ::-1]
    return out


def _channel_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xd = x.astype(np.float64)
    return xd.mean(axis=(0, 2, 3)), xd.std(axis=(0, 2, 3))


def _normalize(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    if np.any(std <= 0):
        raise ValueError("normalization std must be positive")
    return ((x - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)


# ---------------------------------------------------------------- synthetic


def _templates(src: SyntheticSource, rng: np.random.Generator) -> np.ndarray:
    c, h, w = src.image_size
    yy, xx = np.mgrid[0:h, 0:w]
    out = np.zeros((src.classes, c, h, w))
    for k in range(src.classes):
        for _ in range(src.blobs):
            cy, cx = rng.uniform(2, h - 2), rng.uniform(2, w - 2)
            color = rng.normal(0, 1, c)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * src.blob_sigma**2))
            out[k] += color[:, None, None] * blob[None]
    return out


def _render(src: SyntheticSource, templates: np.ndarray, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(labels)
    c, h, w = src.image_size
    j = src.jitter
    x = np.empty((n, c, h, w))
    shifts = rng.integers(-j, j + 1, (n, 2))
    amps = 1.0 + src.amplitude_spread * rng.uniform(-1, 1, n)
    for i in range(n):
        t = np.roll(templates[labels[i]], tuple(shifts[i]), axis=(1, 2))
        x[i] = amps[i] * t
    x += src.noise * rng.standard_normal(x.shape)
    return x.astype(np.float32)


def _balanced_labels(n: int, classes: int, rng: np.random.Generator) -> np.ndarray:
    if n % classes:
        raise ValueError(f"{n} samples cannot be split evenly over {classes} classes")
    return rng.permutation(np.repeat(np.arange(classes), n // classes)).astype(np.int64)


def generate_synthetic(spec: DatasetSpec | SyntheticSource | None = None) -> Dataset:
    """Class templates built from a few coloured Gaussian blobs; samples are
    randomly shifted, rescaled copies with additive Gaussian noise.  The shift
    defeats linear models while a small convnet with global pooling copes."""
    if spec is None:
        spec = DatasetSpec()
    elif isinstance(spec, SyntheticSource):
        spec = DatasetSpec(source=spec)
    src = spec.source
    if not isinstance(src, SyntheticSource):
        raise TypeError("generate_synthetic needs a synthetic source")
    rng = np.random.default_rng(src.seed)
    templates = _templates(src, rng)
    y_tr = _balanced_labels(src.train_samples, src.classes, rng)
    y_te = _balanced_labels(src.test_samples, src.classes, rng)
    x_tr = _render(src, templates, y_tr, rng)
    x_te = _render(src, templates, y_te, rng)
    return _finish(x_tr, y_tr, x_te, y_te, spec, f"synthetic-{src.classes}c-seed{src.seed}")


def _finish(x_tr, y_tr, x_te, y_te, spec: DatasetSpec, name: str) -> Dataset:
    c = x_tr.shape[1]
    if spec.normalize:
        mean, std = _channel_stats(x_tr)
        x_tr, x_te = _normalize(x_tr, mean, std), _normalize(x_te, mean, std)
    else:
        mean, std = np.zeros(c), np.ones(c)
    return Dataset(x_tr, y_tr, x_te, y_te, mean, std, spec.crop, spec.mirror, spec.pad, name)


# ---------------------------------------------------------------- CIFAR-10


def read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise FileNotFoundError(f"missing CIFAR-10 file {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        whole = raw.size // CIFAR_RECORD * CIFAR_RECORD
        raise DatasetFormatError(
            f"{path}: truncated record at byte offset {whole} ({raw.size} bytes is not a multiple of {CIFAR_RECORD})"
        )
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() >= 10:
        bad = int(np.argmax(labels >= 10))
        raise DatasetFormatError(f"{path}: label {labels[bad]} out of range at byte offset {bad * CIFAR_RECORD}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(directory: str | Path, spec: DatasetSpec | None = None) -> Dataset:
    directory = Path(directory)
    spec = spec or DatasetSpec(source=Cifar10Source(str(directory)), crop=True, mirror=True)

    def read(files):
        parts = [read_cifar_file(directory / f) for f in files]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    x_tr, y_tr = read(CIFAR_TRAIN_FILES)
    x_te, y_te = read(CIFAR_TEST_FILES)
    x_tr = x_tr.astype(np.float32) / 255.0
    x_te = x_te.astype(np.float32) / 255.0
    return _finish(x_tr, y_tr, x_te, y_te, spec, "cifar10")


def raw_channel_means(directory: str | Path) -> np.ndarray:
    """Per-channel mean of the training images scaled to [0, 1]."""
    total = np.zeros(3)
    count = 0
    for f in CIFAR_TRAIN_FILES:
        x, _ = read_cifar_file(Path(directory) / f)
        total += x.sum(axis=(0, 2, 3), dtype=np.float64)
        count += x.shape[0] * 32 * 32
    return total / count / 255.0


# ---------------------------------------------------------------- export


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Manifest + little-endian f32 blob, the same layout as graph weights."""
    path = Path(path)
    arrays = {
        "x_train": ds.x_train,
        "y_train": ds.y_train,
        "x_test": ds.x_test,
        "y_test": ds.y_test,
        "mean": ds.mean,
        "std": ds.std,
    }
    tensors, chunks, offset = [], [], 0
    for name, a in arrays.items():
        flat = np.ascontiguousarray(a, dtype="<f4").ravel()
        tensors.append({"name": name, "shape": list(a.shape), "dtype": "f32", "offset": offset, "length": flat.size})
        chunks.append(flat.tobytes())
        offset += flat.size
    manifest = {
        "format": DATASET_FORMAT,
        "name": ds.name,
        "augmentation": {"crop": ds.crop, "mirror": ds.mirror, "pad": ds.pad},
        "tensors": tensors,
    }
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    path.with_suffix(".bin").write_bytes(b"".join(chunks))


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    try:
        m = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from exc
    if m.get("format") != DATASET_FORMAT:
        raise DatasetFormatError(f"{path}: not a dataset manifest")
    blob = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f4")
    arrays = {}
    for t in m["tensors"]:
        end = t["offset"] + t["length"]
        if end > blob.size or int(np.prod(t["shape"])) != t["length"]:
            raise DatasetFormatError(f"{path}: tensor {t['name']} does not fit the blob")
        arrays[t["name"]] = blob[t["offset"] : end].reshape(t["shape"]).copy()
    aug = m.get("augmentation", {})
    return Dataset(
        arrays["x_train"],
        arrays["y_train"].astype(np.int64),
        arrays["x_test"],
        arrays["y_test"].astype(np.int64),
        arrays["mean"].astype(np.float64),
        arrays["std"].astype(np.float64),
        bool(aug.get("crop", False)),
        bool(aug.get("mirror", False)),
        int(aug.get("pad", 4)),
        m.get("name", "dataset"),
    )


def load_any(path: str | Path) -> Dataset:
    """``synthetic`` / ``synthetic:<seed>``, a CIFAR-10 directory, or an exported manifest."""
    s = str(path)
    if s.startswith("synthetic"):
        seed = int(s.split(":", 1)[1]) if ":" in s else 0
        return generate_synthetic(SyntheticSource(seed=seed))
    p = Path(s)
    if p.is_dir():
        return load_cifar10(p)
    return load_dataset(p)
