"""Federated binary logistic regression with +-1 labels.

Sample loss log(1 + exp(-y x.theta)).  Exposed as a smooth convex task; the
simulator treats it exactly like the linear task but without a closed-form
optimum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ParameterError, ShapeError
from ..numkit import SeededStream


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class LogisticTask:
    features: tuple   # X_n, each (D_n, dim)
    labels: tuple     # y_n in {-1, +1}, each (D_n,)
    weights: np.ndarray

    @property
    def n_devices(self):
        return len(self.features)

    @property
    def dim(self):
        return self.features[0].shape[1]

    def device_size(self, device):
        return self.features[device].shape[0]

    def _check_theta(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.dim,):
            raise ShapeError(f"theta has shape {theta.shape}, task dimension is {self.dim}")
        return theta

    def device_loss(self, device, theta):
        theta = self._check_theta(theta)
        margins = self.labels[device] * (self.features[device] @ theta)
        return float(np.mean(np.logaddexp(0.0, -margins)))

    def loss(self, theta):
        return float(sum(p * self.device_loss(n, theta) for n, p in enumerate(self.weights)))

    def device_gradient(self, device, theta):
        theta = self._check_theta(theta)
        x, y = self.features[device], self.labels[device]
        coeff = -y * _sigmoid(-y * (x @ theta))
        return x.T @ coeff / self.device_size(device)

    def gradient(self, theta):
        out = np.zeros(self.dim)
        for n, p in enumerate(self.weights):
            out += p * self.device_gradient(n, theta)
        return out

    def minibatch_gradient(self, device, theta, batch_size, stream: SeededStream):
        theta = self._check_theta(theta)
        size = self.device_size(device)
        if not 1 <= batch_size <= size:
            raise ParameterError(
                f"batch_size {batch_size} outside [1, {size}] for device {device}")
        if batch_size == size:
            idx = slice(None)
        else:
            idx = stream.generator.choice(size, size=batch_size, replace=False)
        x = self.features[device][idx]
        y = self.labels[device][idx]
        coeff = -y * _sigmoid(-y * (x @ theta))
        return x.T @ coeff / batch_size


def generate_logistic_task(n_devices, dim, device_size, stream: SeededStream) -> LogisticTask:
    """Standard-normal features, labels drawn from the logistic model of a
    random ground-truth parameter."""
    if n_devices < 1 or dim < 1 or device_size < 1:
        raise ParameterError("n_devices, dim and device_size must be >= 1")
    rng = stream.generator
    truth = rng.standard_normal(dim)
    features, labels = [], []
    for _ in range(n_devices):
        x = rng.standard_normal((device_size, dim))
        prob = _sigmoid(x @ truth)
        y = np.where(rng.random(device_size) < prob, 1.0, -1.0)
        features.append(x)
        labels.append(y)
    weights = np.full(n_devices, 1.0 / n_devices)
    return LogisticTask(tuple(features), tuple(labels), weights)
