"""Synthetic federated linear regression with a closed-form optimum.

Each device n holds a design matrix A_n and targets b_n = A_n x0 + v_n with
Gaussian sample noise v_n.  The device loss is the mean squared residual
F_n(theta) = ||A_n theta - b_n||^2 / (2 D_n) and the global objective is the
p_n-weighted sum of device losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateTaskError, NumericError, ParameterError, ShapeError
from ..numkit import SeededStream


def _device_sizes(n_devices, size_min, size_max, size_mean, rng):
    """Integer device sizes in [size_min, size_max] whose mean is size_mean.

    Sizes are drawn uniformly, then the total is repaired to n * mean by
    adjusting devices from the last one backwards, clamping each to the
    interval and spilling any remainder to the next device.  The repair always
    terminates because size_min <= size_mean <= size_max.
    """
    target = round(n_devices * size_mean)
    if abs(target - n_devices * size_mean) > 1e-9:
        raise ParameterError(
            f"n_devices * mean size must be integral, got {n_devices * size_mean}")
    sizes = rng.integers(size_min, size_max + 1, size=n_devices).astype(np.int64)
    deficit = target - int(sizes.sum())
    for i in reversed(range(n_devices)):
        if deficit == 0:
            break
        room = (size_max - sizes[i]) if deficit > 0 else (size_min - sizes[i])
        step = min(deficit, room) if deficit > 0 else max(deficit, room)
        sizes[i] += step
        deficit -= step
    if deficit != 0:
        raise ParameterError("could not realise the requested size triple")
    return sizes


@dataclass(frozen=True)
class LinearTask:
    """Federated least-squares problem instance."""

    design: tuple          # A_n, each (D_n, dim)
    targets: tuple         # b_n, each (D_n,)
    ground_truth: np.ndarray
    noise_var: float
    weights: np.ndarray    # p_n, sums to 1
    grams: tuple = field(default=None, repr=False)  # cached A_n^T A_n

    def __post_init__(self):
        if self.grams is None:
            object.__setattr__(self, "grams", tuple(a.T @ a for a in self.design))

    @property
    def n_devices(self):
        return len(self.design)

    @property
    def dim(self):
        return self.design[0].shape[1]

    def device_size(self, device):
        return self.design[device].shape[0]

    @property
    def total_size(self):
        return sum(a.shape[0] for a in self.design)

    def _check_theta(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.dim,):
            raise ShapeError(f"theta has shape {theta.shape}, task dimension is {self.dim}")
        return theta

    def device_loss(self, device, theta):
        theta = self._check_theta(theta)
        r = self.design[device] @ theta - self.targets[device]
        return float(r @ r) / (2.0 * self.device_size(device))

    def loss(self, theta):
        return float(sum(p * self.device_loss(n, theta)
                         for n, p in enumerate(self.weights)))

    def device_gradient(self, device, theta):
        theta = self._check_theta(theta)
        a, b = self.design[device], self.targets[device]
        return a.T @ (a @ theta - b) / self.device_size(device)

    def gradient(self, theta):
        out = np.zeros(self.dim)
        for n, p in enumerate(self.weights):
            out += p * self.device_gradient(n, theta)
        return out

    def minibatch_gradient(self, device, theta, batch_size, stream: SeededStream):
        """Mean sample gradient over a uniform without-replacement batch."""
        theta = self._check_theta(theta)
        size = self.device_size(device)
        if not 1 <= batch_size <= size:
            raise ParameterError(
                f"batch_size {batch_size} outside [1, {size}] for device {device}")
        if batch_size == size:
            idx = slice(None)
        else:
            idx = stream.generator.choice(size, size=batch_size, replace=False)
        a = self.design[device][idx]
        b = self.targets[device][idx]
        return a.T @ (a @ theta - b) / batch_size


def generate_linear_task(n_devices, dim, sizes, noise_var, stream: SeededStream) -> LinearTask:
    """Draw a task instance: A_n and x0 standard normal, b_n = A_n x0 + v_n.

    ``sizes`` is the (min, max, mean) triple for the per-device sample counts;
    aggregation weights are p_n = D_n / D.
    """
    size_min, size_max, size_mean = sizes
    if not (1 <= size_min <= size_mean <= size_max):
        raise ParameterError(f"infeasible size triple {sizes}")
    if dim < 1 or n_devices < 1:
        raise ParameterError("dim and n_devices must be >= 1")
    if noise_var < 0:
        raise ParameterError(f"noise_var must be non-negative, got {noise_var}")
    rng = stream.generator
    device_sizes = _device_sizes(n_devices, size_min, size_max, size_mean, rng)
    x0 = rng.standard_normal(dim)
    design, targets = [], []
    for d_n in device_sizes:
        a = rng.standard_normal((int(d_n), dim))
        v = rng.standard_normal(int(d_n)) * np.sqrt(noise_var)
        design.append(a)
        targets.append(a @ x0 + v)
    weights = device_sizes / device_sizes.sum()
    return LinearTask(tuple(design), tuple(targets), x0, float(noise_var), weights)


def global_loss(task, theta):
    """Weighted global objective; delegates to the task's own loss."""
    return task.loss(theta)


def minibatch_gradient(task, device, theta, batch_size, stream):
    return task.minibatch_gradient(device, theta, batch_size, stream)


def pooled_gram(task: LinearTask) -> np.ndarray:
    """Hessian of the global objective, sum_n (p_n / D_n) A_n^T A_n."""
    g = np.zeros((task.dim, task.dim))
    for n, p in enumerate(task.weights):
        g += (p / task.device_size(n)) * task.grams[n]
    return g


def closed_form_optimum(task: LinearTask):
    """Solve the weighted normal equations; returns (theta_star, f_star)."""
    gram = pooled_gram(task)
    rhs = np.zeros(task.dim)
    for n, p in enumerate(task.weights):
        rhs += (p / task.device_size(n)) * (task.design[n].T @ task.targets[n])
    try:
        theta = np.linalg.solve(gram, rhs)
        theta += np.linalg.solve(gram, rhs - gram @ theta)  # one refinement step
    except np.linalg.LinAlgError as exc:
        raise DegenerateTaskError(f"singular pooled Gram matrix: {exc}") from exc
    grad_norm = float(np.linalg.norm(task.gradient(theta)))
    if not np.isfinite(grad_norm) or grad_norm > 1e-6:
        raise DegenerateTaskError(
            f"normal equations solved poorly, |grad| = {grad_norm:.3e}")
    return theta, task.loss(theta)


def _power_iteration(mat, tol=1e-12, max_iter=20000):
    """Largest eigenvalue of a symmetric PSD matrix via power iteration."""
    n = mat.shape[0]
    v = np.full(n, 1.0 / np.sqrt(n))
    lam_prev = 0.0
    for it in range(1, max_iter + 1):
        w = mat @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        lam = float(v @ (mat @ v))
        if abs(lam - lam_prev) <= tol * max(1.0, abs(lam)):
            return lam
        lam_prev = lam
    raise NumericError(f"power iteration did not converge in {max_iter} iterations")


def convexity_constants(task: LinearTask):
    """Curvature constants (mu, L) of the task.

    L is the worst-device smoothness max_n lambda_max(A_n^T A_n / D_n); mu is
    the smallest eigenvalue of the pooled weighted Gram (obtained by a second,
    shifted power iteration).
    """
    smooth = max(_power_iteration(task.grams[n] / task.device_size(n))
                 for n in range(task.n_devices))
    gram = pooled_gram(task)
    top = _power_iteration(gram)
    mu = top - _power_iteration(top * np.eye(task.dim) - gram)
    mu = max(mu, 0.0)
    if mu > smooth:
        mu = smooth  # guard against iteration slack on near-isotropic tasks
    return mu, smooth
