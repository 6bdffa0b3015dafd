"""Datasets and device partitioning, including the label-shard scheme used to
produce pathologically non-IID splits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ParameterError, ShapeError
from ..numkit import SeededStream


@dataclass(frozen=True)
class Dataset:
    """A labelled dataset: feature rows plus integer class labels."""

    features: np.ndarray  # (n, dim) float64
    labels: np.ndarray    # (n,) int64

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ShapeError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ShapeError("labels must be a vector with one entry per feature row")

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1 if len(self) else 0


@dataclass(frozen=True)
class DataPartition:
    """Disjoint per-device index lists into a parent dataset."""

    device_indices: tuple
    shards_per_device: int

    @property
    def n_devices(self):
        return len(self.device_indices)


def partition_label_shards(dataset: Dataset, n_devices: int, shards_per_device: int,
                           stream: SeededStream) -> DataPartition:
    """Sort by label, slice into equal shards, deal shards to devices at random.

    With s shards per device each device ends up holding at most s distinct
    labels, which is the standard recipe for label-skewed federated splits.
    """
    if n_devices < 1 or shards_per_device < 1:
        raise ParameterError("n_devices and shards_per_device must be >= 1")
    n = len(dataset)
    total_shards = n_devices * shards_per_device
    if n == 0 or n % total_shards != 0:
        raise ParameterError(
            f"{n} samples cannot be split into {total_shards} equal shards "
            f"({n_devices} devices x {shards_per_device} shards)")
    shard_size = n // total_shards
    order = np.argsort(dataset.labels, kind="stable")
    shard_of = stream.generator.permutation(total_shards)
    device_indices = []
    for dev in range(n_devices):
        shards = shard_of[dev * shards_per_device:(dev + 1) * shards_per_device]
        idx = np.concatenate([order[s * shard_size:(s + 1) * shard_size] for s in shards])
        device_indices.append(np.sort(idx))
    return DataPartition(tuple(device_indices), shards_per_device)


def partition_iid(dataset: Dataset, n_devices: int, stream: SeededStream) -> DataPartition:
    """Shuffle and split into equally-sized IID device subsets."""
    if n_devices < 1:
        raise ParameterError("n_devices must be >= 1")
    n = len(dataset)
    if n % n_devices != 0:
        raise ParameterError(f"{n} samples do not divide evenly over {n_devices} devices")
    perm = stream.generator.permutation(n)
    chunk = n // n_devices
    parts = tuple(np.sort(perm[i * chunk:(i + 1) * chunk]) for i in range(n_devices))
    return DataPartition(parts, 0)
