"""Datasets: MNIST IDX files, CIFAR-10 binary batches, synthetic mixtures.

Loaders only scale pixels to [0, 1]; no mean/std standardization is applied.
"""

from __future__ import annotations

import gzip
import os
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
DATA_DIR_ENV = "NORMKIT_DATA_DIR"


class DataError(Exception):
    """Malformed or missing dataset files."""


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W) float64
    labels: np.ndarray  # (N,) int64
    class_count: int
    domains: np.ndarray | None = None  # (N,) 0 = source, 1 = target

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images and labels differ in count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels outside [0, {self.class_count})")
        if self.domains is not None:
            self.domains = np.asarray(self.domains, dtype=np.int64)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            self.images[indices], self.labels[indices], self.class_count,
            None if self.domains is None else self.domains[indices],
        )

    def stratified_subset(self, n: int, seed) -> "LabeledDataset":
        return self.subset(stratified_indices(self.labels, n, self.class_count, seed))

    def domain(self, d: int) -> "LabeledDataset":
        if self.domains is None:
            raise ValueError("dataset carries no domain ids")
        return self.subset(np.flatnonzero(self.domains == d))


def concat(parts: Sequence[LabeledDataset]) -> LabeledDataset:
    domains = None
    if all(p.domains is not None for p in parts):
        domains = np.concatenate([p.domains for p in parts])
    return LabeledDataset(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        max(p.class_count for p in parts),
        domains,
    )


# ------------------------------------------------------------------- IDX


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise DataError(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def _idx_payload(raw: bytes, magic: int, ndim: int, path) -> tuple[tuple[int, ...], bytes]:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise DataError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    body = raw[header:]
    expected = int(np.prod(dims))
    if len(body) != expected:
        raise DataError(f"{path}: payload has {len(body)} bytes, header promises {expected}")
    return dims, body


def load_idx(images_path, labels_path, class_count: int = 10) -> LabeledDataset:
    """Read an IDX image/label file pair (optionally gzip-compressed)."""
    (n, rows, cols), pixels = _idx_payload(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    (m,), labels = _idx_payload(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
    if n != m:
        raise DataError(f"{n} images but {m} labels")
    images = np.frombuffer(pixels, dtype=np.uint8).reshape(n, 1, rows, cols) / 255.0
    return LabeledDataset(images, np.frombuffer(labels, dtype=np.uint8), class_count)


def write_idx(images_path, labels_path, images_u8: np.ndarray, labels_u8: np.ndarray, compress=None) -> None:
    """Write uint8 images (N, H, W) and labels (N,) as an IDX pair."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    n, h, w = images_u8.shape
    img = struct.pack(">4I", IDX_IMAGES_MAGIC, n, h, w) + images_u8.tobytes()
    lab = struct.pack(">2I", IDX_LABELS_MAGIC, labels_u8.shape[0]) + labels_u8.tobytes()
    for path, blob in ((images_path, img), (labels_path, lab)):
        gz = compress if compress is not None else str(path).endswith(".gz")
        Path(path).write_bytes(gzip.compress(blob, mtime=0) if gz else blob)


# ---------------------------------------------------------------- CIFAR-10


def load_cifar10_binary(paths: str | os.PathLike | Sequence) -> LabeledDataset:
    """Read CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes (R, G, B planes)."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) % CIFAR_RECORD:
            raise DataError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0])
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    if not images:
        raise DataError("no CIFAR-10 files given")
    return LabeledDataset(np.concatenate(images) / 255.0, np.concatenate(labels), 10)


def data_root(root=None) -> Path:
    return Path(root or os.environ.get(DATA_DIR_ENV, "data"))


def _first_existing(base: Path, names: Sequence[str]) -> Path:
    for name in names:
        for cand in (base / name, base / f"{name}.gz"):
            if cand.exists():
                return cand
    raise DataError(f"none of {list(names)} found under {base}")


def find_cifar10(root=None) -> tuple[list[Path], list[Path]]:
    """Locate train and test batches under ``root`` (or $NORMKIT_DATA_DIR)."""
    root = data_root(root)
    for base in (root / "cifar-10-batches-bin", root / "cifar10", root):
        train = [base / f"data_batch_{i}.bin" for i in range(1, 6)]
        test = base / "test_batch.bin"
        if all(p.exists() for p in train) and test.exists():
            return train, [test]
    raise DataError(f"CIFAR-10 binary batches not found under {root}")


def find_mnist(root=None, split="train") -> LabeledDataset:
    root = data_root(root)
    prefix = "train" if split == "train" else "t10k"
    for base in (root / "mnist", root / "MNIST" / "raw", root):
        try:
            img = _first_existing(base, [f"{prefix}-images-idx3-ubyte", f"{prefix}-images.idx3-ubyte"])
            lab = _first_existing(base, [f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels.idx1-ubyte"])
        except DataError:
            continue
        return load_idx(img, lab)
    raise DataError(f"MNIST {split} IDX files not found under {root}")


# -------------------------------------------------------------- subsetting


def stratified_indices(labels: np.ndarray, n: int, class_count: int, seed) -> np.ndarray:
    """Seeded subset of ``n`` indices with class counts proportional to ``labels`` (within +-1)."""
    labels = np.asarray(labels)
    if not 0 <= n <= labels.size:
        raise ValueError(f"cannot take {n} of {labels.size} samples")
    counts = np.bincount(labels, minlength=class_count)
    exact = counts * n / labels.size
    quota = np.floor(exact).astype(np.int64)
    short = n - quota.sum()
    order = np.lexsort((np.arange(class_count), -(exact - quota)))
    quota[order[:short]] += 1
    rng = np.random.default_rng(seed)
    picked = [
        rng.choice(np.flatnonzero(labels == c), size=quota[c], replace=False)
        for c in range(class_count) if quota[c]
    ]
    return np.sort(np.concatenate(picked)) if picked else np.zeros(0, dtype=np.int64)


# --------------------------------------------------------------- synthetic


def synthetic_mixture(n: int, d: int, k_true: int, separation: float = 10.0, seed=0,
                      sigma: float = 1.0) -> LabeledDataset:
    """Isotropic Gaussian classes with means pairwise at least ``separation`` apart.

    Samples are shaped (n, d, 1, 1). Values are raw features, not pixels, so
    they are not confined to [0, 1].
    """
    if k_true < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    means = synthetic_means(d, k_true, separation)
    counts = np.full(k_true, n // k_true)
    counts[: n % k_true] += 1
    labels = np.repeat(np.arange(k_true), counts)
    x = means[labels] + sigma * rng.standard_normal((n, d))
    order = rng.permutation(n)
    return LabeledDataset(x[order].reshape(n, d, 1, 1), labels[order], k_true)


def synthetic_means(d: int, k_true: int, separation: float) -> np.ndarray:
    """Class means used by :func:`synthetic_mixture`: scaled basis vectors, or a line if d < K."""
    means = np.zeros((k_true, d))
    if d >= k_true:
        means[np.arange(k_true), np.arange(k_true)] = separation / np.sqrt(2.0)
    else:
        means[:, 0] = separation * np.arange(k_true)
    return means


# ------------------------------------------------------------ domain pairs

_TRANSFORM = re.compile(r"^(identity|none|invert|colorize|noise\(([0-9.eE+-]+)\))$")


def parse_transform(spec: str) -> list[tuple[str, float | None]]:
    """``"invert+noise(0.3)"`` -> [("invert", None), ("noise", 0.3)]."""
    steps = []
    for part in spec.replace(" ", "").split("+"):
        m = _TRANSFORM.match(part)
        if not m:
            raise ValueError(f"unknown transform {part!r}")
        name = part.split("(")[0]
        steps.append((name, float(m.group(2)) if m.group(2) else None))
    return steps


def apply_transform(images: np.ndarray, spec: str, rng: np.random.Generator) -> np.ndarray:
    out = images.copy()
    for name, arg in parse_transform(spec):
        if name == "invert":
            out = 1.0 - out
        elif name == "colorize":
            n, c = out.shape[:2]
            scale = rng.uniform(0.3, 1.0, size=(n, c, 1, 1))
            offset = rng.uniform(0.0, 1.0, size=(n, c, 1, 1)) * (1.0 - scale)
            out = offset + scale * out
        elif name == "noise":
            out = np.clip(out + arg * rng.standard_normal(out.shape), 0.0, 1.0)
    return out


def make_domain_pair(source: LabeledDataset, transform: str, seed=0,
                     target_fraction: float = 0.5) -> LabeledDataset:
    """Split ``source``; the held-out part becomes a transformed target domain (domain id 1)."""
    rng = np.random.default_rng(seed)
    tgt = stratified_indices(source.labels, int(round(target_fraction * len(source))), source.class_count, rng)
    src = np.setdiff1d(np.arange(len(source)), tgt)
    target_images = apply_transform(source.images[tgt], transform, rng)
    return LabeledDataset(
        np.concatenate([source.images[src], target_images]),
        np.concatenate([source.labels[src], source.labels[tgt]]),
        source.class_count,
        np.concatenate([np.zeros(src.size, np.int64), np.ones(tgt.size, np.int64)]),
    )


# ---------------------------------------------------------------- batching


def batch_iter(dataset: LabeledDataset, batch_size: int, seed=0, shuffle: bool = True,
               train: bool = True, with_index: bool = False) -> Iterator:
    """Yield ``(images, labels)`` batches; training mode drops the last partial batch."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    stop = n - n % batch_size if train else n
    for s in range(0, stop, batch_size):
        idx = order[s : s + batch_size]
        if with_index:
            yield dataset.images[idx], dataset.labels[idx], idx
        else:
            yield dataset.images[idx], dataset.labels[idx]
