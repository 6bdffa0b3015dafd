"""Small two-layer softmax MLP for the non-convex experiments.

Parameters travel as one flat vector (the common currency of the training
loops): [W1 | b1 | W2 | b2] with W1 of shape (in, hidden) and W2 of shape
(hidden, out).  Forward/backward are plain numpy; tanh keeps the objective
smooth so finite-difference gradient checks stay meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ParameterError, ShapeError
from ..numkit import SeededStream
from .partition import Dataset, DataPartition, partition_iid, partition_label_shards

_ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class MlpTask:
    layer_sizes: tuple     # (in, hidden, out)
    activation: str
    features: tuple        # per device (D_n, in)
    labels: tuple          # per device (D_n,) int64
    weights: np.ndarray
    test_features: np.ndarray = None
    test_labels: np.ndarray = None

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")

    @property
    def n_devices(self):
        return len(self.features)

    @property
    def dim(self):
        n_in, n_h, n_out = self.layer_sizes
        return n_in * n_h + n_h + n_h * n_out + n_out

    def device_size(self, device):
        return self.features[device].shape[0]

    def _unpack(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.dim,):
            raise ShapeError(f"theta has shape {theta.shape}, task dimension is {self.dim}")
        n_in, n_h, n_out = self.layer_sizes
        o1 = n_in * n_h
        o2 = o1 + n_h
        o3 = o2 + n_h * n_out
        return (theta[:o1].reshape(n_in, n_h), theta[o1:o2],
                theta[o2:o3].reshape(n_h, n_out), theta[o3:])

    def _forward(self, theta, x):
        w1, b1, w2, b2 = self._unpack(theta)
        z1 = x @ w1 + b1
        hidden = np.tanh(z1) if self.activation == "tanh" else np.maximum(z1, 0.0)
        return z1, hidden, hidden @ w2 + b2

    @staticmethod
    def _log_softmax(logits):
        shifted = logits - logits.max(axis=1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def _loss_on(self, theta, x, y):
        _, _, logits = self._forward(theta, x)
        logp = self._log_softmax(logits)
        return float(-logp[np.arange(len(y)), y].mean())

    def _gradient_on(self, theta, x, y):
        w1, b1, w2, b2 = self._unpack(theta)
        z1, hidden, logits = self._forward(theta, x)
        batch = len(y)
        probs = np.exp(self._log_softmax(logits))
        probs[np.arange(batch), y] -= 1.0
        dlogits = probs / batch
        dw2 = hidden.T @ dlogits
        db2 = dlogits.sum(axis=0)
        dhidden = dlogits @ w2.T
        if self.activation == "tanh":
            dz1 = dhidden * (1.0 - np.tanh(z1) ** 2)
        else:
            dz1 = dhidden * (z1 > 0.0)
        dw1 = x.T @ dz1
        db1 = dz1.sum(axis=0)
        return np.concatenate([dw1.ravel(), db1, dw2.ravel(), db2])

    def device_loss(self, device, theta):
        return self._loss_on(theta, self.features[device], self.labels[device])

    def loss(self, theta):
        return float(sum(p * self.device_loss(n, theta) for n, p in enumerate(self.weights)))

    def device_gradient(self, device, theta):
        return self._gradient_on(theta, self.features[device], self.labels[device])

    def gradient(self, theta):
        out = np.zeros(self.dim)
        for n, p in enumerate(self.weights):
            out += p * self.device_gradient(n, theta)
        return out

    def minibatch_gradient(self, device, theta, batch_size, stream: SeededStream):
        size = self.device_size(device)
        if not 1 <= batch_size <= size:
            raise ParameterError(
                f"batch_size {batch_size} outside [1, {size}] for device {device}")
        if batch_size == size:
            idx = slice(None)
        else:
            idx = stream.generator.choice(size, size=batch_size, replace=False)
        return self._gradient_on(theta, self.features[device][idx], self.labels[device][idx])

    def init_params(self, stream: SeededStream) -> np.ndarray:
        """Gaussian fan-in init for the weight matrices, zero biases."""
        n_in, n_h, n_out = self.layer_sizes
        rng = stream.generator
        w1 = rng.standard_normal((n_in, n_h)) / np.sqrt(n_in)
        w2 = rng.standard_normal((n_h, n_out)) / np.sqrt(n_h)
        return np.concatenate([w1.ravel(), np.zeros(n_h), w2.ravel(), np.zeros(n_out)])

    def accuracy(self, theta, features=None, labels=None):
        """Fraction of correct argmax predictions on the given (or test) split."""
        if features is None:
            features, labels = self.test_features, self.test_labels
        if features is None or len(features) == 0:
            return float("nan")
        _, _, logits = self._forward(theta, features)
        return float(np.mean(logits.argmax(axis=1) == labels))


def _task_from_partition(dataset: Dataset, partition: DataPartition, hidden, activation,
                         test: Dataset = None) -> MlpTask:
    feats = tuple(dataset.features[idx] for idx in partition.device_indices)
    labs = tuple(dataset.labels[idx] for idx in partition.device_indices)
    sizes = np.array([len(f) for f in feats], dtype=np.float64)
    layer_sizes = (dataset.features.shape[1], hidden, dataset.n_classes)
    return MlpTask(layer_sizes, activation, feats, labs, sizes / sizes.sum(),
                   test.features if test is not None else None,
                   test.labels if test is not None else None)


def generate_blob_mlp_task(n_devices, n_classes, dim_in, hidden, samples_per_device,
                           stream: SeededStream, labels_per_device=None, spread=0.6,
                           test_fraction=0.1, activation="tanh") -> MlpTask:
    """Synthetic classification task: one Gaussian blob per class.

    ``labels_per_device`` switches between an IID split (None) and the
    label-shard split with that many shards per device.  A held-out test split
    of the requested fraction is attached for accuracy reporting.
    """
    if n_devices < 1 or n_classes < 2 or dim_in < 1 or samples_per_device < 1:
        raise ParameterError("invalid blob task geometry")
    n_train = n_devices * samples_per_device
    if n_train % n_classes != 0:
        raise ParameterError(
            f"n_devices * samples_per_device = {n_train} must divide by {n_classes} classes")
    rng = stream.generator
    per_train = n_train // n_classes
    per_test = int(round(per_train * test_fraction))
    means = rng.standard_normal((n_classes, dim_in))
    train_feats, train_labels, test_feats, test_labels = [], [], [], []
    for c in range(n_classes):
        pts = means[c] + spread * rng.standard_normal((per_train + per_test, dim_in))
        train_feats.append(pts[:per_train])
        train_labels.append(np.full(per_train, c, dtype=np.int64))
        test_feats.append(pts[per_train:])
        test_labels.append(np.full(per_test, c, dtype=np.int64))
    perm = rng.permutation(n_train)
    train = Dataset(np.concatenate(train_feats)[perm], np.concatenate(train_labels)[perm])
    test = Dataset(np.concatenate(test_feats), np.concatenate(test_labels))
    part_stream = stream.fork("partition")
    if labels_per_device is None:
        partition = partition_iid(train, n_devices, part_stream)
    else:
        partition = partition_label_shards(train, n_devices, labels_per_device, part_stream)
    return _task_from_partition(train, partition, hidden, activation, test)


def mnist_mlp_task(images_path, labels_path, n_devices, shards_per_device, hidden,
                   stream: SeededStream, test_images=None, test_labels=None,
                   limit=None, activation="tanh") -> MlpTask:
    """MNIST (IDX files) split into label shards, trained by the small MLP."""
    from .idx import load_idx

    train = load_idx(images_path, labels_path)
    if limit is not None:
        train = Dataset(train.features[:limit], train.labels[:limit])
    total_shards = n_devices * shards_per_device
    usable = (len(train) // total_shards) * total_shards
    if usable != len(train):
        train = Dataset(train.features[:usable], train.labels[:usable])
    partition = partition_label_shards(train, n_devices, shards_per_device,
                                       stream.fork("partition"))
    test = load_idx(test_images, test_labels) if test_images else None
    return _task_from_partition(train, partition, hidden, activation, test)
