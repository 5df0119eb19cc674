"""
Datasets
========

Data for teachers and students:

* `load_idx` reads the big-endian IDX files MNIST ships in (plain or
  gzip-compressed), and `load_mnist` finds and pairs the four standard
  files in a directory.

* `gen_synthetic` builds a deterministic class-conditional image set of
  Gaussian blobs, for runs and tests that must not depend on downloads.

* `split_validation` carves a held-out split off a training set.

No data is ever downloaded.
"""

import os
import gzip
import struct
import dataclasses

import numpy as np

from distilrl.networks import Dataset


IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    'train_images': 'train-images-idx3-ubyte',
    'train_labels': 'train-labels-idx1-ubyte',
    'test_images': 't10k-images-idx3-ubyte',
    'test_labels': 't10k-labels-idx1-ubyte',
}


class IdxFormatError(ValueError):
    """An IDX file has a bad header or a truncated payload."""


@dataclasses.dataclass(frozen=True, eq=False)
class IdxFile:
    """
    A parsed IDX file: its `magic` number, per-dimension sizes `dims`, and
    the raw unsigned-byte `payload` (length `prod(dims)`).
    """
    magic: int
    dims: tuple
    payload: bytes


def read_idx(path):
    """
    Parse the IDX file at `path` (gzip-compressed if the name ends in
    `.gz`). Only unsigned-byte images (3 dims) and labels (1 dim) are
    accepted.

    Raises `IdxFormatError`, naming the byte offset of the problem.
    """
    opener = gzip.open if str(path).endswith('.gz') else open
    with opener(path, 'rb') as f:
        data = f.read()
    if len(data) < 4:
        raise IdxFormatError(f"{path}: truncated header at offset "
                             f"{len(data)}")
    (magic,) = struct.unpack('>I', data[:4])
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x} at offset 0, "
                             f"expected 0x{IDX_IMAGES_MAGIC:08x} or "
                             f"0x{IDX_LABELS_MAGIC:08x}")
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise IdxFormatError(f"{path}: truncated dimensions at offset "
                             f"{len(data)}")
    dims = struct.unpack(f'>{ndim}I', data[4:header_end])
    size = int(np.prod(dims, dtype=np.int64))
    payload = data[header_end:]
    if len(payload) < size:
        raise IdxFormatError(
            f"{path}: truncated payload at offset {len(data)}, expected "
            f"{size} bytes after offset {header_end}"
        )
    return IdxFile(magic, tuple(int(d) for d in dims),
                   payload[:size])


def load_idx(path):
    """
    Load an IDX file as an array: images become float64 `(N, H, W)` scaled
    to [0, 1], labels become int64 `(N,)`.
    """
    idx = read_idx(path)
    array = np.frombuffer(idx.payload, dtype=np.uint8).reshape(idx.dims)
    if idx.magic == IDX_IMAGES_MAGIC:
        return array.astype(np.float64) / 255.0
    return array.astype(np.int64)


def _find(directory, stem):
    candidates = [stem, stem + '.gz', stem.replace('-idx', '.idx'),
                  stem.replace('-idx', '.idx') + '.gz']
    for name in candidates:
        path = os.path.join(directory, name)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"no {stem} (or .gz) in {directory}")


def load_mnist(directory, train_limit=None):
    """
    Load the MNIST training and test sets from `directory`.

    Parameters:

    * `directory` (str): holds the four standard IDX files, optionally
      gzip-compressed.
    * `train_limit` (int, optional): keep only the first `train_limit`
      training samples.

    Returns `(train, test)` as `Dataset`s with inputs `(N, 1, 28, 28)`.
    """
    splits = []
    for prefix in ('train', 'test'):
        images = load_idx(_find(directory, MNIST_FILES[prefix + '_images']))
        labels = load_idx(_find(directory, MNIST_FILES[prefix + '_labels']))
        if images.shape[0] != labels.shape[0]:
            raise IdxFormatError(f"{prefix}: {images.shape[0]} images but "
                                 f"{labels.shape[0]} labels")
        splits.append(Dataset(images[:, None, :, :], labels))
    train, test = splits
    if train_limit is not None:
        train = train.subset(np.arange(min(train_limit, len(train))))
    return train, test


# # Synthetic data


@dataclasses.dataclass(frozen=True)
class SyntheticSpec:
    """
    Fields:

    * `n_classes` (int, default 10)
    * `samples_per_class` (int, default 100)
    * `image_size` (int, default 12): images are `(1, size, size)`.
    * `noise_sigma` (float, default 0.1): standard deviation of the
      per-pixel Gaussian noise.
    * `seed` (int, default 0)
    """
    n_classes: int = 10
    samples_per_class: int = 100
    image_size: int = 12
    noise_sigma: float = 0.1
    seed: int = 0


def class_prototypes(n_classes, image_size):
    """
    One Gaussian blob per class, centred on a circle around the image
    centre, all scaled to the same L2 norm (so noiseless samples are
    linearly separable).
    """
    coords = np.arange(image_size) - (image_size - 1) / 2.0
    radius = image_size / 4.0
    width = max(image_size / 8.0, 0.5)
    prototypes = np.empty((n_classes, image_size, image_size))
    for k in range(n_classes):
        angle = 2.0 * np.pi * k / n_classes
        cy, cx = radius * np.sin(angle), radius * np.cos(angle)
        blob = np.exp(-((coords[:, None] - cy) ** 2
                        + (coords[None, :] - cx) ** 2) / (2.0 * width ** 2))
        prototypes[k] = blob / np.linalg.norm(blob)
    return prototypes * (1.0 / prototypes.max())


def gen_synthetic(spec):
    """
    Build a shuffled `Dataset` of `n_classes * samples_per_class` noisy
    class prototypes. Equal specs give bit-identical data.

    Raises `ValueError` for an empty dataset.
    """
    if spec.samples_per_class < 1 or spec.n_classes < 1:
        raise ValueError(f"synthetic dataset would be empty "
                         f"({spec.n_classes} classes x "
                         f"{spec.samples_per_class} samples)")
    if spec.noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {spec.noise_sigma}")
    rng = np.random.default_rng(spec.seed)
    prototypes = class_prototypes(spec.n_classes, spec.image_size)
    labels = np.repeat(np.arange(spec.n_classes), spec.samples_per_class)
    images = prototypes[labels] + spec.noise_sigma * rng.standard_normal(
        (labels.size, spec.image_size, spec.image_size))
    order = rng.permutation(labels.size)
    return Dataset(images[order][:, None, :, :], labels[order].astype(np.int64))


def split_validation(dataset, fraction=0.1, seed=0):
    """
    Shuffle `dataset` with `seed` and split off `fraction` of it (at least
    one sample) as a validation set. Returns `(train, validation)`.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"validation fraction must be in (0, 1), got "
                         f"{fraction}")
    if len(dataset) < 2:
        raise ValueError("need at least two samples to split off a "
                         "validation set")
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_val = min(len(dataset) - 1, max(1, int(round(fraction * len(dataset)))))
    return dataset.subset(np.sort(order[n_val:])), \
        dataset.subset(np.sort(order[:n_val]))
