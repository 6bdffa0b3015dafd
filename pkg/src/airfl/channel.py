"""Wireless uplink simulation: fading draws, channel-inversion and phase-only
precoding, norm-adaptive denoising factors, and the AirComp superposition with
exact model-aggregation-error accounting.

Conventions fixed here and consumed everywhere else:

* The receiver noise is real Gaussian with per-coordinate variance
  ``noise_var``; the theoretical aggregation MSE is therefore
  ``dim * noise_var / beta`` so that it matches the measurable ||error||^2.
* Channel magnitudes are squared as re^2 + im^2 (not abs()**2) so that the
  inversion identity h * alpha == sqrt(beta) holds exactly in floats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (DegenerateSignalError, ParameterError, ShapeError,
                     SingularChannelError)
from .numkit import SeededStream, gaussian_vector

FADINGS = ("error_free", "awgn", "rayleigh_block")

# below this magnitude an un-truncated inversion would demand unbounded power
DEEP_FADE_GUARD = 1e-6


@dataclass(frozen=True)
class ChannelConfig:
    """Static description of the uplink."""

    fading: str = "error_free"
    noise_var: float = 0.0       # sigma_w^2 per coordinate
    power: float = 1.0           # P0 transmit power budget per symbol
    dim: int = 1                 # d, symbols per communication block
    truncation: float = 0.0      # gamma, 0 disables threshold-based truncation

    def __post_init__(self):
        if self.fading not in FADINGS:
            raise ParameterError(f"unknown fading kind {self.fading!r}")
        if self.noise_var < 0:
            raise ParameterError("noise_var must be non-negative")
        if self.power <= 0:
            raise ParameterError("transmit power must be positive")
        if self.dim < 1:
            raise ParameterError("dim must be >= 1")
        if self.truncation < 0:
            raise ParameterError("truncation threshold must be non-negative")

    @property
    def snr(self):
        return float("inf") if self.noise_var == 0 else self.power / self.noise_var

    @classmethod
    def from_snr_db(cls, fading, snr_db, dim, power=1.0, truncation=0.0):
        noise_var = 0.0 if fading == "error_free" else power / (10.0 ** (snr_db / 10.0))
        return cls(fading, noise_var, power, dim, truncation)


@dataclass(frozen=True)
class ChannelDraw:
    """Per-device block-fading coefficients for one communication round."""

    coefficients: np.ndarray  # complex128, shape (n_devices,)
    round_index: int

    @property
    def n_devices(self):
        return len(self.coefficients)

    def magnitude_sq(self):
        h = self.coefficients
        return h.real ** 2 + h.imag ** 2


def draw_channels(config: ChannelConfig, n_devices: int, round_index: int,
                  stream: SeededStream) -> ChannelDraw:
    """Draw one round's coefficients; constant within the round's d slots.

    The draw is a pure function of (stream identity, round_index), so the same
    seed and round always reproduce the same coefficients regardless of call
    order.
    """
    if n_devices < 1:
        raise ParameterError("n_devices must be >= 1")
    if config.fading == "rayleigh_block":
        rng = stream.fork(round_index).generator
        h = (rng.standard_normal(n_devices) + 1j * rng.standard_normal(n_devices)) / np.sqrt(2.0)
    else:
        h = np.ones(n_devices, dtype=np.complex128)
    return ChannelDraw(h, round_index)


def inversion_precoder(h, beta, gamma=0.0):
    """Channel-inverting transmit scalar sqrt(beta) * conj(h) / |h|^2.

    Devices whose magnitude falls below the threshold ``gamma`` are truncated
    (they stay silent, coefficient 0).  With gamma == 0 a deep fade raises
    instead of producing unbounded transmit power.
    """
    if beta <= 0:
        raise ParameterError("beta must be positive")
    h = complex(h)
    mag_sq = h.real ** 2 + h.imag ** 2
    mag = np.sqrt(mag_sq)
    if mag < gamma:
        return 0j
    if mag < DEEP_FADE_GUARD:
        raise SingularChannelError(
            f"channel magnitude {mag:.3e} below inversion guard with gamma={gamma}")
    return np.sqrt(beta) * h.conjugate() / mag_sq


def phase_precoder(h, beta_n):
    """Phase-only transmit scalar sqrt(beta_n) * conj(h) / |h|."""
    if beta_n < 0:
        raise ParameterError("per-device power factor must be non-negative")
    h = complex(h)
    mag = np.sqrt(h.real ** 2 + h.imag ** 2)
    if mag < DEEP_FADE_GUARD:
        raise SingularChannelError(f"channel magnitude {mag:.3e} too small for phase precoding")
    return np.sqrt(beta_n) * h.conjugate() / mag


def cotaf_denoising_factor(signals, draw: ChannelDraw, config: ChannelConfig) -> float:
    """Norm-adaptive denoising factor min_n |h_n|^2 d P0 / ||s_n||^2.

    ``signals`` are the already weight-scaled transmit vectors p_n z_n.  The
    per-device transmit energy under inversion then satisfies
    ||alpha_n s_n||^2 <= d P0 with equality for the argmin device.
    """
    norms_sq = np.array([float(s @ s) for s in signals])
    mags_sq = draw.magnitude_sq()
    if len(norms_sq) != draw.n_devices:
        raise ShapeError(f"{len(norms_sq)} signals but {draw.n_devices} channel coefficients")
    active = norms_sq > 0.0
    if not active.any():
        raise DegenerateSignalError("all transmit signals are zero")
    budget = config.dim * config.power
    return float(np.min(mags_sq[active] * budget / norms_sq[active]))


def bg_bound_denoising_factor(eta, grad_bound_sq, local_epochs, n_devices,
                              config: ChannelConfig, weights=None,
                              draw: ChannelDraw = None) -> float:
    """Denoising factor d N^2 P0 / (Gtilde^2 E eta^2) from the bounded-gradient rule.

    Gtilde^2 = G^2 max_n v_n^2 / |h_n|^2 with v_n = N p_n; with uniform weights
    and no fading it reduces to G^2.  Satisfies 1/beta proportional to eta^2.
    """
    if eta <= 0:
        raise ParameterError("eta must be positive")
    if grad_bound_sq <= 0:
        raise ParameterError("gradient bound must be positive")
    g_tilde_sq = grad_bound_sq * g_tilde_ratio(n_devices, weights, draw)
    return config.dim * n_devices ** 2 * config.power / (g_tilde_sq * local_epochs * eta ** 2)


def g_tilde_ratio(n_devices, weights=None, draw: ChannelDraw = None) -> float:
    """max_n v_n^2 / |h_n|^2 with v_n = N p_n (1 when uniform and unfaded)."""
    v = np.full(n_devices, 1.0) if weights is None else n_devices * np.asarray(weights)
    mags_sq = np.ones(n_devices) if draw is None else draw.magnitude_sq()
    return float(np.max(v ** 2 / mags_sq))


def mse_theoretical(config: ChannelConfig, beta: float) -> float:
    """Expected ||error||^2 of an unbiased aggregation: d sigma_w^2 / beta."""
    if beta <= 0:
        raise ParameterError("beta must be positive")
    return config.dim * config.noise_var / beta


@dataclass(frozen=True)
class AggregationErrorRecord:
    """Exact per-round aggregation error epsilon = y_hat - y_ideal."""

    epsilon: np.ndarray
    sq_norm: float
    theoretical_mse: float
    participating: tuple
    bias: np.ndarray          # noise-free part of epsilon (deterministic given h)
    ideal: np.ndarray = None  # error-free aggregate, kept when recording is on

    @property
    def bias_norm(self):
        return float(np.linalg.norm(self.bias))


def _finalize(received_real, ideal, beta, config, noise_stream, participating,
              keep_ideal):
    root = np.sqrt(beta)
    noise = gaussian_vector(noise_stream, config.dim, config.noise_var)
    y_hat = (received_real + noise) / root
    epsilon = y_hat - ideal
    bias = received_real / root - ideal
    record = AggregationErrorRecord(
        epsilon=epsilon,
        sq_norm=float(epsilon @ epsilon),
        theoretical_mse=mse_theoretical(config, beta),
        participating=tuple(participating),
        bias=bias,
        ideal=ideal.copy() if keep_ideal else None,
    )
    return y_hat, record


def aircomp_aggregate(signals, precoders, draw: ChannelDraw, beta, config: ChannelConfig,
                      noise_stream: SeededStream, keep_ideal=False):
    """Superpose precoded signals through the channel and denoise.

    Returns the estimated aggregate y_hat = (sum_n h_n alpha_n s_n + w) / sqrt(beta)
    and the error record against the ideal sum over ALL devices (truncated
    devices therefore surface as bias in epsilon).
    """
    if beta <= 0:
        raise ParameterError("beta must be positive")
    signals = [np.asarray(s, dtype=np.float64) for s in signals]
    if any(s.shape != (config.dim,) for s in signals):
        raise ShapeError("every signal must match the channel dimension")
    if not (len(signals) == len(precoders) == draw.n_devices):
        raise ShapeError("signals, precoders and channel draw disagree on device count")
    ideal = np.sum(signals, axis=0)
    received = np.zeros(config.dim, dtype=np.complex128)
    participating = []
    for n, (s, alpha) in enumerate(zip(signals, precoders)):
        if alpha == 0:
            continue
        received += (draw.coefficients[n] * alpha) * s
        participating.append(n)
    return _finalize(received.real, ideal, beta, config, noise_stream, participating,
                     keep_ideal)


def phase_only_aggregate(signals, power_factors, draw: ChannelDraw, beta,
                         config: ChannelConfig, noise_stream: SeededStream,
                         keep_ideal=False):
    """Aggregation without magnitude alignment: gains |h_n| sqrt(beta_n) / sqrt(beta).

    The resulting error carries the deterministic misalignment term
    sum_n (|h_n| sqrt(beta_n) / sqrt(beta) - 1) s_n on top of the scaled noise.
    """
    if beta <= 0:
        raise ParameterError("beta must be positive")
    power_factors = np.asarray(power_factors, dtype=np.float64)
    if np.any(power_factors < 0):
        raise ParameterError("per-device power factors must be non-negative")
    signals = [np.asarray(s, dtype=np.float64) for s in signals]
    if any(s.shape != (config.dim,) for s in signals):
        raise ShapeError("every signal must match the channel dimension")
    if not (len(signals) == len(power_factors) == draw.n_devices):
        raise ShapeError("signals, power factors and channel draw disagree on device count")
    ideal = np.sum(signals, axis=0)
    mags = np.sqrt(draw.magnitude_sq())
    received = np.zeros(config.dim)
    participating = []
    for n, s in enumerate(signals):
        gain = mags[n] * np.sqrt(power_factors[n])
        received += gain * s
        if power_factors[n] > 0:
            participating.append(n)
    return _finalize(received, ideal, beta, config, noise_stream, participating,
                     keep_ideal)
