"""Local dataset loading for agents.

Two on-disk formats are understood: the MNIST IDX binary pair
(big-endian magic 2051 for images, 2049 for labels, raw u8 payload) and
CSV with a header row whose label column is named ``label``. Files
ending in ``.gz`` are decompressed transparently.

Also provides a deterministic 10-class synthetic generator that writes
real IDX files, used when no MNIST copy is available. Class identity is
carried by a low-amplitude direction on top of shared pixel noise, so a
small network needs several epochs to separate the classes instead of
nailing them in one pass.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import EmptySplit, InvalidConfig, LabelOutOfRange, ParseError

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049

DATA_FORMATS = ("mnist_idx", "csv")
NORMALIZATIONS = ("none", "scale_0_1")


@dataclass(frozen=True)
class DataLoaderSpec:
    """Declarative description of how an agent reads its local data."""

    format: str
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    train_csv: Optional[str] = None
    val_fraction: float = 0.1
    shuffle_seed: int = 0
    normalization: str = "scale_0_1"
    num_classes: Optional[int] = None

    def __post_init__(self):
        errors = {}
        if self.format not in DATA_FORMATS:
            errors["format"] = f"must be one of {DATA_FORMATS}"
        if not 0.0 <= self.val_fraction <= 0.5:
            errors["val_fraction"] = "must lie in [0, 0.5]"
        if self.normalization not in NORMALIZATIONS:
            errors["normalization"] = f"must be one of {NORMALIZATIONS}"
        if self.format == "mnist_idx" and not (self.train_images and self.train_labels):
            errors["train_images"] = "mnist_idx needs train_images and train_labels paths"
        if self.format == "csv" and not self.train_csv:
            errors["train_csv"] = "csv format needs a train_csv path"
        if errors:
            raise InvalidConfig(errors)

    def to_dict(self) -> dict:
        return {
            "format": self.format,
            "train_images": self.train_images,
            "train_labels": self.train_labels,
            "train_csv": self.train_csv,
            "val_fraction": self.val_fraction,
            "shuffle_seed": self.shuffle_seed,
            "normalization": self.normalization,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DataLoaderSpec":
        known = {f: d[f] for f in cls.__dataclass_fields__ if f in d}
        return cls(**known)


@dataclass
class LocalDataset:
    """Parsed features/labels with a deterministic train/val index split."""

    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64
    train_idx: np.ndarray
    val_idx: np.ndarray
    num_classes: int

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = {"train": self.train_idx, "val": self.val_idx}[name]
        if idx.size == 0:
            raise EmptySplit(f"{name} split is empty")
        return self.features[idx], self.labels[idx]

    @property
    def train_size(self) -> int:
        return int(self.train_idx.size)


def _open_maybe_gzip(path: str):
    p = Path(path)
    if p.suffix == ".gz":
        return gzip.open(p, "rb")
    return open(p, "rb")


def _read_idx(path: str, expect_magic: int) -> np.ndarray:
    """Read one IDX file into a u8 array of its declared dimensions."""
    try:
        with _open_maybe_gzip(path) as f:
            raw = f.read()
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if len(raw) < 4:
        raise ParseError(f"{path}: truncated header at offset 0")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expect_magic:
        raise ParseError(f"{path}: bad magic {magic} at offset 0, expected {expect_magic}")
    ndim = 1 if expect_magic == IDX_LABELS_MAGIC else 3
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise ParseError(f"{path}: truncated dimension header at offset 4")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    expected = int(np.prod(dims))
    payload = raw[header_len:]
    if len(payload) != expected:
        raise ParseError(
            f"{path}: payload is {len(payload)} bytes at offset {header_len}, "
            f"dimensions {dims} require {expected}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def _load_idx_pair(spec: DataLoaderSpec) -> tuple[np.ndarray, np.ndarray]:
    images = _read_idx(spec.train_images, IDX_IMAGES_MAGIC)
    labels = _read_idx(spec.train_labels, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ParseError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}"
        )
    features = images.reshape(images.shape[0], -1).astype(np.float64)
    return features, labels.astype(np.int64)


def _load_csv(spec: DataLoaderSpec) -> tuple[np.ndarray, np.ndarray]:
    rows, labels = [], []
    try:
        fh = open(spec.train_csv, newline="")
    except OSError as exc:
        raise ParseError(f"{spec.train_csv}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{spec.train_csv}: empty file") from None
        if "label" not in header:
            raise ParseError(f"{spec.train_csv}: header row has no 'label' column")
        label_col = header.index("label")
        feature_cols = [i for i in range(len(header)) if i != label_col]
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(
                    f"{spec.train_csv}: line {lineno} has {len(row)} fields, expected {len(header)}"
                )
            try:
                labels.append(int(row[label_col]))
                rows.append([float(row[i]) for i in feature_cols])
            except ValueError as exc:
                raise ParseError(f"{spec.train_csv}: line {lineno}: {exc}") from exc
    if not rows:
        raise ParseError(f"{spec.train_csv}: no data rows")
    return np.asarray(rows, dtype=np.float64), np.asarray(labels, dtype=np.int64)


def load_dataset(spec: DataLoaderSpec) -> LocalDataset:
    """Parse, normalize, and deterministically split a local dataset."""
    if spec.format == "mnist_idx":
        features, labels = _load_idx_pair(spec)
    else:
        features, labels = _load_csv(spec)

    if labels.size and labels.min() < 0:
        raise LabelOutOfRange(f"negative label {labels.min()}")
    if spec.num_classes is not None:
        num_classes = spec.num_classes
        if labels.size and labels.max() >= num_classes:
            raise LabelOutOfRange(
                f"label {labels.max()} outside [0, {num_classes})"
            )
    elif spec.format == "mnist_idx":
        num_classes = 10
        if labels.size and labels.max() >= 10:
            raise LabelOutOfRange(f"label {labels.max()} outside [0, 10)")
    else:
        num_classes = int(labels.max()) + 1 if labels.size else 0

    if spec.normalization == "scale_0_1":
        features = features / 255.0

    n = features.shape[0]
    n_val = int(n * spec.val_fraction)
    perm = np.random.default_rng(spec.shuffle_seed).permutation(n)
    return LocalDataset(
        features=features,
        labels=labels,
        train_idx=np.sort(perm[n_val:]),
        val_idx=np.sort(perm[:n_val]),
        num_classes=num_classes,
    )


def label_histogram(data: LocalDataset) -> list[int]:
    """Label counts over the train split; index = label."""
    counts = np.bincount(data.labels[data.train_idx], minlength=data.num_classes)
    return [int(c) for c in counts]


# --- synthetic fallback -------------------------------------------------------

def write_idx_pair(
    images: np.ndarray, labels: np.ndarray, images_path: str, labels_path: str
) -> None:
    """Write a u8 image stack and labels as a standard IDX file pair."""
    n, h, w = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(images.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(labels.astype(np.uint8).tobytes())


def make_synthetic_classification(
    n: int,
    seed: int,
    num_classes: int = 10,
    side: int = 28,
    signal: float = 0.55,
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic 10-class image-like data of moderate difficulty.

    Pixels are shared Gaussian noise plus ``signal`` times a fixed
    per-class unit direction; the signal amplitude sets how many SGD
    epochs a small model needs before the classes separate.
    """
    dir_rng = np.random.default_rng(20240001)  # class directions fixed across shards
    d = side * side
    directions = dir_rng.normal(size=(num_classes, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n)
    noise = rng.normal(size=(n, d))
    raw = noise + signal * directions[labels] * np.sqrt(d)
    scaled = np.clip(128.0 + 32.0 * raw / raw.std(), 0, 255).astype(np.uint8)
    return scaled.reshape(n, side, side), labels.astype(np.uint8)


def write_synthetic_shards(
    out_dir: str,
    total: int,
    shards: int,
    seed: int = 0,
    num_classes: int = 10,
    side: int = 28,
    signal: float = 0.55,
) -> list[tuple[str, str]]:
    """Generate one synthetic dataset and partition it equally into shards.

    Returns (images_path, labels_path) per shard. The partition is a
    contiguous equal split of a single deterministic dataset, mirroring
    an equal split of a benchmark corpus across silos.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    per = total // shards
    images, labels = make_synthetic_classification(
        per * shards, seed=seed, num_classes=num_classes, side=side, signal=signal
    )
    paths = []
    for s in range(shards):
        img_path = str(out / f"shard{s}-images-idx3-ubyte")
        lbl_path = str(out / f"shard{s}-labels-idx1-ubyte")
        sl = slice(s * per, (s + 1) * per)
        write_idx_pair(images[sl], labels[sl], img_path, lbl_path)
        paths.append((img_path, lbl_path))
    return paths
