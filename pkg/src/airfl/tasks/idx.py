"""Reader for the IDX binary format used by the MNIST distribution files.

Both file kinds are big-endian: a 4-byte magic (0x00000801 for label files,
0x00000803 for image files), one 4-byte big-endian size per dimension, then
raw unsigned bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .partition import Dataset

LABEL_MAGIC = 0x00000801
IMAGE_MAGIC = 0x00000803

_NDIMS = {LABEL_MAGIC: 1, IMAGE_MAGIC: 3}


def read_idx(path) -> np.ndarray:
    """Parse a single IDX file into an ndarray of unsigned bytes.

    Label files yield shape (n,), image files shape (n, rows, cols).
    """
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"file {path} too short for an IDX magic number", 0)
    magic = struct.unpack_from(">I", raw, 0)[0]
    if magic not in _NDIMS:
        raise FormatError(f"bad IDX magic 0x{magic:08x} in {path}", 0)
    ndim = _NDIMS[magic]
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"truncated IDX dimension header in {path}", len(raw))
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    expected = header_end + int(np.prod(dims))
    if len(raw) < expected:
        raise FormatError(f"IDX payload truncated in {path}: expected {expected} bytes", len(raw))
    data = np.frombuffer(raw, dtype=np.uint8, count=int(np.prod(dims)), offset=header_end)
    return data.reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Load an image/label IDX pair into a Dataset.

    Pixels are scaled to [0, 1] and flattened to one feature row per image.
    The two files must agree on the sample count.
    """
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise FormatError(f"{images_path} is not an IDX image file", 0)
    if labels.ndim != 1:
        raise FormatError(f"{labels_path} is not an IDX label file", 0)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"image/label count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels", 4)
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(features, labels.astype(np.int64))


def write_idx_images(path, images: np.ndarray):
    """Write uint8 images (n, rows, cols) in IDX format; used to build fixtures."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray):
    """Write uint8 labels (n,) in IDX format; used to build fixtures."""
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())
