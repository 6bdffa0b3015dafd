"""Deterministic numeric substrate: seeded random streams, dense parameter
vectors, and running statistics used by every other module."""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ParameterError, ShapeError

_U64 = (1 << 64) - 1


def param_vector(values) -> np.ndarray:
    """Coerce ``values`` to a finite 1-D float64 vector, validating as we go."""
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1:
        raise ShapeError(f"parameter vector must be 1-D, got shape {vec.shape}")
    if vec.size == 0:
        raise ShapeError("parameter vector must be non-empty")
    if not np.all(np.isfinite(vec)):
        raise ParameterError("parameter vector contains non-finite entries")
    return vec


class SeededStream:
    """A named, seeded source of randomness.

    A stream is identified by ``(seed, stream_id)``.  Two freshly constructed
    streams with equal identity produce bit-identical draw sequences on any
    platform, so the identity plus the draw index fully determines every draw.
    Draws consume the stream sequentially; a single stream instance must have a
    single consumer, but distinct streams may be consumed concurrently.

    ``fork`` derives an independent child stream from the identity alone,
    never from the draw cursor.  Training loops fork per round and per device
    so that two algorithm variants consuming different amounts of randomness
    still see identical per-round draws under shared seeds.
    """

    __slots__ = ("seed", "stream_id", "_rng")

    def __init__(self, seed: int, stream_id: str = "root"):
        self.seed = int(seed) & _U64
        self.stream_id = str(stream_id)
        digest = hashlib.blake2b(self.stream_id.encode("utf-8"), digest_size=16).digest()
        words = [int.from_bytes(digest[i:i + 8], "little") for i in (0, 8)]
        seq = np.random.SeedSequence([self.seed, *words])
        self._rng = np.random.Generator(np.random.PCG64(seq))

    def fork(self, *key) -> "SeededStream":
        """Independent child stream keyed by ``key`` (ints or strings)."""
        suffix = "/".join(str(k) for k in key)
        return SeededStream(self.seed, f"{self.stream_id}/{suffix}")

    @property
    def generator(self) -> np.random.Generator:
        return self._rng

    def __repr__(self):
        return f"SeededStream(seed={self.seed}, stream_id={self.stream_id!r})"


def gaussian_vector(stream: SeededStream, dim: int, variance: float) -> np.ndarray:
    """I.i.d. zero-mean Gaussian vector with the given per-coordinate variance."""
    if dim < 1:
        raise ParameterError(f"dim must be >= 1, got {dim}")
    if variance < 0:
        raise ParameterError(f"variance must be non-negative, got {variance}")
    draw = stream.generator.standard_normal(dim)
    return draw * np.sqrt(variance)


def weighted_sum(vectors, weights) -> np.ndarray:
    """Weighted sum of equally-sized vectors, sum_n weights[n] * vectors[n]."""
    if len(vectors) == 0:
        raise ShapeError("weighted_sum requires at least one vector")
    if len(vectors) != len(weights):
        raise ShapeError(f"{len(vectors)} vectors but {len(weights)} weights")
    try:
        stacked = np.asarray(vectors, dtype=np.float64)
    except ValueError as exc:
        raise ShapeError(f"vectors must share a common dimension: {exc}") from None
    if stacked.ndim != 2:
        raise ShapeError("vectors must share a common dimension")
    return np.asarray(weights, dtype=np.float64) @ stacked


class RunningStats:
    """Streaming mean / second-moment accumulator (Welford's update).

    Works for scalars or fixed-shape vectors; the shape is fixed by the first
    ``add``.  ``variance`` uses the n-1 convention.
    """

    def __init__(self):
        self.count = 0
        self.mean = None
        self.m2 = None

    def add(self, value):
        value = np.asarray(value, dtype=np.float64)
        if self.count == 0:
            self.mean = np.zeros_like(value)
            self.m2 = np.zeros_like(value)
        self.count += 1
        delta = value - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (value - self.mean)

    @property
    def variance(self):
        if self.count < 2:
            return np.zeros_like(self.mean) if self.mean is not None else 0.0
        return self.m2 / (self.count - 1)

    @property
    def std_error(self):
        """Standard error of the mean."""
        return np.sqrt(self.variance / max(self.count, 1))
