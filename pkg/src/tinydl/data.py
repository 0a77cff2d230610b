"""MNIST ingestion, minibatch sampling, preprocessing and augmentation."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
N_CLASSES = 10

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) float64 in [0, 1] before preprocessing
    labels: np.ndarray  # (N, 10) one-hot
    split: str = "train"

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.split)


def _read(path) -> bytes:
    path = os.fspath(path)
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 8:
        raise DataFormatError(f"{path}: file too short for an IDX header ({len(raw)} bytes)")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise DataFormatError(
            f"{path}: bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise DataFormatError(
            f"{path}: truncated payload, expected {count} bytes, found {len(raw) - header}"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def one_hot(labels: np.ndarray, n_classes: int = N_CLASSES) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataFormatError(f"label outside [0, {n_classes})")
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Read an IDX image/label pair (plain or gzip) into a scaled, one-hot Dataset."""
    pixels = _parse_idx(_read(images_path), IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read(labels_path), LABELS_MAGIC, labels_path)
    if pixels.ndim != 3:
        raise DataFormatError(f"{images_path}: expected 3 image dims, got {pixels.ndim}")
    if pixels.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"{pixels.shape[0]} images in {images_path} but {labels.shape[0]} labels in {labels_path}"
        )
    images = pixels.astype(np.float64)[..., None] / 255.0
    return Dataset(images, one_hot(labels), split)


def find_split(data_dir, split: str):
    """Locate the canonical MNIST file pair for ``split``, gzipped or not."""
    found = []
    for base in MNIST_FILES[split]:
        for name in (base, base + ".gz"):
            path = os.path.join(os.fspath(data_dir), name)
            if os.path.exists(path):
                found.append(path)
                break
        else:
            raise FileNotFoundError(os.path.join(os.fspath(data_dir), base + "[.gz]"))
    return found


def load_mnist(data_dir, split: str) -> Dataset:
    images, labels = find_split(data_dir, split)
    return load_idx(images, labels, split)


def write_idx(path, array: np.ndarray, compress: bool = False):
    """Write a uint8 array as IDX; used for fixtures and round-trip tests."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    raw = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    if compress:
        raw = gzip.compress(raw)
    with open(path, "wb") as f:
        f.write(raw)


class BatchSampler:
    """Draws minibatches.

    ``mode="random"`` samples B indices uniformly with replacement on every
    call. ``mode="epoch"`` walks a fresh permutation per epoch; a batch never
    straddles two epochs, so the tail of a permutation that is shorter than B
    is dropped.
    """

    def __init__(self, n: int, batch_size: int = 64, seed: int = 0, mode: str = "random"):
        if n < 1:
            raise ValueError("cannot sample from an empty dataset")
        if mode not in ("random", "epoch"):
            raise ValueError(f"unknown sampling mode {mode!r}")
        if batch_size < 1:
            raise ValueError("batch size must be positive")
        if mode == "epoch" and batch_size > n:
            raise ValueError(f"batch size {batch_size} exceeds dataset size {n}")
        self.n = n
        self.batch_size = batch_size
        self.mode = mode
        self.rng = np.random.default_rng(seed)
        self._perm = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next_indices(self) -> np.ndarray:
        b = self.batch_size
        if self.mode == "random":
            return self.rng.integers(0, self.n, size=b)
        if self._pos + b > self._perm.size:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._perm[self._pos:self._pos + b]
        self._pos += b
        return idx


def next_batch(sampler: BatchSampler, dataset: Dataset):
    if len(dataset) != sampler.n:
        raise ValueError("sampler was built for a dataset of a different size")
    idx = sampler.next_indices()
    return dataset.images[idx], dataset.labels[idx]


class Preprocessor:
    """Input standardization fitted on the training split only.

    kinds: ``mean_image`` (subtract per-pixel mean), ``zscore`` (also divide
    by per-pixel std, floored at 1e-8) and ``pca_whiten``.
    """

    KINDS = ("none", "mean_image", "zscore", "pca_whiten")

    def __init__(self, kind: str = "none", whiten_eps: float = 1e-5):
        if kind not in self.KINDS:
            raise ValueError(f"unknown preprocessing {kind!r}")
        self.kind = kind
        self.whiten_eps = whiten_eps
        self.fitted = False

    def fit(self, train: Dataset) -> "Preprocessor":
        x = train.images.reshape(len(train), -1)
        self.mean = x.mean(axis=0)
        if self.kind == "zscore":
            self.std = np.maximum(x.std(axis=0), 1e-8)
        elif self.kind == "pca_whiten":
            centered = x - self.mean
            cov = centered.T @ centered / x.shape[0]
            self.eigvals, self.eigvecs = np.linalg.eigh(cov)
        self.fitted = True
        return self

    def transform_array(self, images: np.ndarray) -> np.ndarray:
        if self.kind == "none":
            return images
        if not self.fitted:
            raise RuntimeError("preprocessor must be fitted on the training split first")
        shape = images.shape
        x = images.reshape(shape[0], -1) - self.mean
        if self.kind == "zscore":
            x = x / self.std
        elif self.kind == "pca_whiten":
            x = (x @ self.eigvecs) / np.sqrt(np.maximum(self.eigvals, 0.0) + self.whiten_eps)
        return x.reshape(shape)

    def transform(self, dataset: Dataset) -> Dataset:
        return Dataset(self.transform_array(dataset.images), dataset.labels, dataset.split)


def preprocess(train: Dataset, test: Dataset | None, kind: str):
    """Fit on ``train`` and apply to both splits."""
    pre = Preprocessor(kind).fit(train)
    return pre.transform(train), (pre.transform(test) if test is not None else None), pre


# -- augmentation ----------------------------------------------------------

def crop(image: np.ndarray, h: int, w: int, origin=(0, 0)) -> np.ndarray:
    r, c = origin
    if r < 0 or c < 0 or r + h > image.shape[0] or c + w > image.shape[1] or h < 1 or w < 1:
        raise ValueError(f"crop {h}x{w} at {origin} outside image {image.shape[:2]}")
    return image[r:r + h, c:c + w].copy()


def flip_h(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()


def flip_v(image: np.ndarray) -> np.ndarray:
    return image[::-1].copy()


def add_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return np.clip(image + rng.normal(0.0, sigma, size=image.shape), 0.0, 1.0)


class FancyPCA:
    """AlexNet-style colour jitter along the principal axes of the channels.

    Fitted on a stack of HWC images. For grayscale data the single axis is
    the channel itself, so the jitter is one random brightness shift scaled
    by the pixel variance.
    """

    def __init__(self, sigma: float = 0.1):
        self.sigma = sigma

    def fit(self, images: np.ndarray) -> "FancyPCA":
        pixels = images.reshape(-1, images.shape[-1])
        cov = np.atleast_2d(np.cov(pixels, rowvar=False, bias=True))
        self.eigvals, self.eigvecs = np.linalg.eigh(cov)
        return self

    def __call__(self, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        alphas = rng.normal(0.0, self.sigma, size=self.eigvals.shape)
        shift = self.eigvecs @ (alphas * self.eigvals)
        return image + shift


def augment(image: np.ndarray, op: str, rng: np.random.Generator | None = None, **kw) -> np.ndarray:
    """Apply one augmentation by name: crop, flip_h, flip_v, add_noise, fancy_pca."""
    if op == "crop":
        return crop(image, kw["h"], kw["w"], kw.get("origin", (0, 0)))
    if op == "flip_h":
        return flip_h(image)
    if op == "flip_v":
        return flip_v(image)
    rng = rng if rng is not None else np.random.default_rng()
    if op == "add_noise":
        return add_noise(image, kw.get("sigma", 0.1), rng)
    if op == "fancy_pca":
        pca = kw.get("pca") or FancyPCA(kw.get("sigma", 0.1)).fit(image[None])
        return pca(image, rng)
    raise ValueError(f"unknown augmentation {op!r}")
