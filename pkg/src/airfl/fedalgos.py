"""Training loops for federated averaging over the air.

Three over-the-air variants plus their error-free counterparts share one round
structure: broadcast the global model, run device-local SGD, scale by the
aggregation weights, push the signals through the channel, apply the variant's
global update.

Transmit conventions (what z_n is per variant):

* ``airfedavg_m``      -- the E-step model difference, z = theta_after - theta.
* ``airfedavg_s``      -- the single-step descent direction, z = -g.  Together
  with the additive update theta += eta * y_hat this is the same algorithm as
  transmitting +g and subtracting (the noise law is symmetric), but it makes
  the equivalence with airfedavg_m at E = 1 exact draw-by-draw under shared
  seeds, not just in distribution.
* ``airfedmodel``      -- the local model itself; the aggregate replaces the
  global model.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .channel import (ChannelConfig, ChannelDraw, DegenerateSignalError,
                      aircomp_aggregate, bg_bound_denoising_factor,
                      cotaf_denoising_factor, draw_channels, inversion_precoder,
                      phase_only_aggregate)
from .errors import ParameterError
from .numkit import SeededStream

VARIANTS = ("airfedavg_m", "airfedavg_s", "airfedmodel",
            "errorfree_fedavg_m", "errorfree_fedavg_s")
LR_KINDS = ("constant", "inverse_time", "corollary1", "corollary5", "sqrt_ratio")
PRECODER_KINDS = ("inversion_fixed_beta", "inversion_cotaf", "inversion_bg_bound",
                  "phase_only")


@dataclass(frozen=True)
class LrSchedule:
    """Learning-rate schedules used across the experiments and corollaries."""

    kind: str
    eta0: float = 0.1
    decay: float = 0.0            # inverse_time: eta0 / (1 + decay * t)
    mu: float = 0.0               # curvature constants for the corollary rates
    smoothness: float = 0.0
    local_epochs: int = 1
    n_devices: int = 1
    horizon: int = 1              # T for the sqrt_ratio constant rate

    def __post_init__(self):
        if self.kind not in LR_KINDS:
            raise ParameterError(f"unknown lr schedule kind {self.kind!r}")
        if self.kind in ("constant", "inverse_time") and self.eta0 <= 0:
            raise ParameterError("eta0 must be positive")
        if self.kind == "inverse_time" and self.decay < 0:
            raise ParameterError("decay must be non-negative")
        if self.kind in ("corollary1", "corollary5", "sqrt_ratio"):
            if self.mu <= 0 or self.smoothness <= 0:
                raise ParameterError(f"{self.kind} needs positive mu and smoothness")
        if self.kind == "corollary1" and self.local_epochs < 1:
            raise ParameterError("corollary1 needs local_epochs >= 1")
        if self.kind == "sqrt_ratio" and (self.horizon < 1 or self.n_devices < 1):
            raise ParameterError("sqrt_ratio needs horizon and n_devices >= 1")


def lr_value(schedule: LrSchedule, t: int) -> float:
    """Learning rate at round t (>= 0)."""
    if t < 0:
        raise ParameterError("round index must be non-negative")
    if schedule.kind == "constant":
        return schedule.eta0
    if schedule.kind == "inverse_time":
        return schedule.eta0 / (1.0 + schedule.decay * t)
    if schedule.kind == "corollary1":
        tau = 3.0 * schedule.smoothness / schedule.mu
        return 6.0 / (schedule.local_epochs * schedule.mu * (tau + t))
    if schedule.kind == "corollary5":
        tau = 2.0 * schedule.smoothness / schedule.mu
        return 2.0 / (schedule.mu * (tau + t))
    # sqrt_ratio: constant (1/L) sqrt(N / (E T))
    return (1.0 / schedule.smoothness) * np.sqrt(
        schedule.n_devices / (schedule.local_epochs * schedule.horizon))


@dataclass(frozen=True)
class PrecoderPolicy:
    """How the transmit scalars and the denoising factor are chosen."""

    kind: str
    beta: float = None                 # fixed beta; None freezes round-0 adaptive value
    grad_bound_sq: float = None        # G^2 for the bounded-gradient rule
    power_factors: np.ndarray = None   # per-device beta_n for phase_only

    def __post_init__(self):
        if self.kind not in PRECODER_KINDS:
            raise ParameterError(f"unknown precoder kind {self.kind!r}")
        if self.kind == "inversion_bg_bound" and not self.grad_bound_sq:
            raise ParameterError("inversion_bg_bound needs grad_bound_sq")
        if self.kind == "phase_only":
            if self.beta is None or self.power_factors is None:
                raise ParameterError("phase_only needs beta and power_factors")


@dataclass
class AlgoConfig:
    variant: str
    local_epochs: int
    rounds: int
    batch_size: int
    lr: LrSchedule
    theta0: np.ndarray
    channel: ChannelConfig = None
    precoder: PrecoderPolicy = None
    lr_cap: float = None          # clip eta^t to a theorem's hypothesis cap
    record_epsilon: bool = False
    record_models: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown variant {self.variant!r}")
        if self.variant in ("airfedavg_s", "errorfree_fedavg_s") and self.local_epochs != 1:
            raise ParameterError(f"{self.variant} requires local_epochs == 1")
        if self.local_epochs < 1 or self.rounds < 1 or self.batch_size < 1:
            raise ParameterError("local_epochs, rounds and batch_size must be >= 1")
        if self.variant.startswith("airfed") and (self.channel is None or self.precoder is None):
            raise ParameterError(f"{self.variant} needs a channel config and precoder policy")

    @property
    def over_the_air(self):
        return not self.variant.startswith("errorfree")


@dataclass(frozen=True)
class StreamBundle:
    """The independent randomness sources of one run."""

    batch: SeededStream
    channel: SeededStream
    noise: SeededStream

    @classmethod
    def from_seed(cls, seed: int):
        return cls(SeededStream(seed, "batch"), SeededStream(seed, "channel"),
                   SeededStream(seed, "noise"))


@dataclass
class RunTrace:
    """Per-round time series of one training run.

    State metrics (loss, gap, grad_sq_norm, test_accuracy) are indexed by
    round 0..T.  Step metrics (lr, beta, mae_*) describe the transition
    t -> t+1 and are indexed 0..T-1.
    """

    variant: str
    rounds: int
    loss: np.ndarray
    grad_sq_norm: np.ndarray
    gap: np.ndarray = None
    test_accuracy: np.ndarray = None
    lr: np.ndarray = None
    beta: np.ndarray = None
    mae_sq_norm: np.ndarray = None
    mae_bias_norm: np.ndarray = None
    wall_time: np.ndarray = None
    final_model: np.ndarray = None
    models: list = None
    epsilons: list = None
    ideals: list = None
    diverged_at: int = None
    lr_clip_count: int = 0
    max_step_grad_sq: float = 0.0
    seeds: dict = None  # filled in by the harness for provenance

    @property
    def completed(self):
        """Number of fully recorded update steps."""
        return len(self.lr)

    @property
    def diverged(self):
        return self.diverged_at is not None


def local_update_accumulate(task, device, theta, eta, local_epochs, batch_size,
                            stream: SeededStream):
    """Run E local SGD epochs from theta; return the model difference.

    z = theta^(E) - theta = -eta * sum_e g^(e), with one fresh without-replacement
    minibatch per epoch drawn sequentially from ``stream``.
    """
    if local_epochs < 1:
        raise ParameterError("local_epochs must be >= 1")
    z, _ = _local_update(task, device, theta, eta, local_epochs, batch_size, stream)
    return z


def _local_update(task, device, theta, eta, local_epochs, batch_size, stream):
    current = np.array(theta, dtype=np.float64, copy=True)
    max_grad_sq = 0.0
    for _ in range(local_epochs):
        g = task.minibatch_gradient(device, current, batch_size, stream)
        max_grad_sq = max(max_grad_sq, float(g @ g))
        current -= eta * g
    return current - theta, max_grad_sq


class _BetaState:
    """Per-run denoising-factor policy evaluation with COTAF fallback."""

    def __init__(self, policy: PrecoderPolicy, config: ChannelConfig, n_devices, weights,
                 local_epochs):
        self.policy = policy
        self.config = config
        self.n_devices = n_devices
        self.weights = weights
        self.local_epochs = local_epochs
        self.previous = None
        self.frozen = policy.beta  # fixed kind: explicit value or frozen round-0 value

    def _cotaf(self, signals, draw):
        try:
            beta = cotaf_denoising_factor(signals, draw, self.config)
        except DegenerateSignalError:
            beta = self.previous if self.previous is not None \
                else self.config.dim * self.config.power
        self.previous = beta
        return beta

    def value(self, signals, draw, eta_effective):
        kind = self.policy.kind
        if kind == "inversion_cotaf":
            return self._cotaf(signals, draw)
        if kind == "inversion_fixed_beta":
            if self.frozen is None:
                self.frozen = self._cotaf(signals, draw)
            return self.frozen
        if kind == "inversion_bg_bound":
            return bg_bound_denoising_factor(
                eta_effective, self.policy.grad_bound_sq, self.local_epochs,
                self.n_devices, self.config, self.weights, draw)
        return self.policy.beta  # phase_only


def run(config: AlgoConfig, task, streams: StreamBundle, f_star=None) -> RunTrace:
    """Execute one training run and return its trace.

    Non-finite models or losses flag the run as diverged at that round and
    truncate the trace instead of raising: divergence is itself a result.
    """
    n, dim = task.n_devices, task.dim
    if config.over_the_air and config.channel.dim != dim:
        raise ParameterError(
            f"channel dim {config.channel.dim} does not match task dim {dim}")
    theta = np.array(config.theta0, dtype=np.float64, copy=True)
    if theta.shape != (dim,):
        raise ParameterError(f"theta0 has shape {theta.shape}, task dimension is {dim}")

    has_acc = hasattr(task, "accuracy") and getattr(task, "test_features", None) is not None
    rounds = config.rounds
    loss = np.zeros(rounds + 1)
    grad_sq = np.zeros(rounds + 1)
    gap = np.zeros(rounds + 1) if f_star is not None else None
    acc = np.zeros(rounds + 1) if has_acc else None
    lr_hist, beta_hist, mae_sq, mae_bias, wall = [], [], [], [], []
    models = [theta.copy()] if config.record_models else None
    epsilons = [] if config.record_epsilon else None
    ideals = [] if config.record_epsilon else None
    clip_count = 0
    max_grad_sq_seen = 0.0
    diverged_at = None

    beta_state = None
    if config.over_the_air:
        beta_state = _BetaState(config.precoder, config.channel, n, task.weights,
                                config.local_epochs)

    def observe(index, model):
        # overflow here is how divergence manifests; it is flagged, not raised
        with np.errstate(over="ignore", invalid="ignore"):
            value = task.loss(model)
            g = task.gradient(model)
            grad_sq[index] = float(g @ g)
        loss[index] = value
        if gap is not None:
            gap[index] = value - f_star
        if acc is not None:
            acc[index] = task.accuracy(model)
        return np.isfinite(value)

    observe(0, theta)

    for t in range(rounds):
        started = time.perf_counter()
        eta = lr_value(config.lr, t)
        if config.lr_cap is not None and eta > config.lr_cap:
            eta = config.lr_cap
            clip_count += 1

        signals = []
        for device in range(n):
            dev_stream = streams.batch.fork(t, device)
            if config.variant in ("airfedavg_m", "errorfree_fedavg_m"):
                z, g_sq = _local_update(task, device, theta, eta, config.local_epochs,
                                        config.batch_size, dev_stream)
            elif config.variant in ("airfedavg_s", "errorfree_fedavg_s"):
                g = task.minibatch_gradient(device, theta, config.batch_size, dev_stream)
                g_sq = float(g @ g)
                z = -g
            else:  # airfedmodel
                z, g_sq = _local_update(task, device, theta, eta, config.local_epochs,
                                        config.batch_size, dev_stream)
                z = theta + z
            max_grad_sq_seen = max(max_grad_sq_seen, g_sq)
            signals.append(task.weights[device] * z)

        if config.over_the_air:
            draw = draw_channels(config.channel, n, t, streams.channel)
            eta_effective = 1.0 if config.variant == "airfedavg_s" else eta
            beta = beta_state.value(signals, draw, eta_effective)
            noise_stream = streams.noise.fork(t)
            if config.precoder.kind == "phase_only":
                y_hat, record = phase_only_aggregate(
                    signals, config.precoder.power_factors, draw, beta, config.channel,
                    noise_stream, keep_ideal=config.record_epsilon)
            else:
                gamma = config.channel.truncation
                precoders = [inversion_precoder(h, beta, gamma) for h in draw.coefficients]
                y_hat, record = aircomp_aggregate(
                    signals, precoders, draw, beta, config.channel, noise_stream,
                    keep_ideal=config.record_epsilon)
            beta_hist.append(beta)
            mae_sq.append(record.sq_norm)
            mae_bias.append(record.bias_norm)
            if epsilons is not None:
                epsilons.append(record.epsilon)
                ideals.append(record.ideal)
        else:
            y_hat = np.sum(signals, axis=0)
            beta_hist.append(0.0)
            mae_sq.append(0.0)
            mae_bias.append(0.0)

        if config.variant in ("airfedavg_m", "errorfree_fedavg_m"):
            theta = theta + y_hat
        elif config.variant in ("airfedavg_s", "errorfree_fedavg_s"):
            theta = theta + eta * y_hat
        else:
            theta = y_hat

        lr_hist.append(eta)
        wall.append(time.perf_counter() - started)
        if models is not None:
            models.append(theta.copy())

        finite = bool(np.all(np.isfinite(theta))) and observe(t + 1, theta)
        if not finite:
            diverged_at = t + 1
            break

    completed = len(lr_hist)
    end = completed + 1
    return RunTrace(
        variant=config.variant,
        rounds=completed,
        loss=loss[:end],
        grad_sq_norm=grad_sq[:end],
        gap=gap[:end] if gap is not None else None,
        test_accuracy=acc[:end] if acc is not None else None,
        lr=np.array(lr_hist),
        beta=np.array(beta_hist),
        mae_sq_norm=np.array(mae_sq),
        mae_bias_norm=np.array(mae_bias),
        wall_time=np.array(wall),
        final_model=theta,
        models=models,
        epsilons=epsilons,
        ideals=ideals,
        diverged_at=diverged_at,
        lr_clip_count=clip_count,
        max_step_grad_sq=max_grad_sq_seen,
    )


def run_airfedavg_m(config: AlgoConfig, task, streams: StreamBundle, f_star=None) -> RunTrace:
    if config.variant != "airfedavg_m":
        raise ParameterError(f"config variant is {config.variant!r}, expected airfedavg_m")
    return run(config, task, streams, f_star)


def run_airfedavg_s(config: AlgoConfig, task, streams: StreamBundle, f_star=None) -> RunTrace:
    if config.variant != "airfedavg_s":
        raise ParameterError(f"config variant is {config.variant!r}, expected airfedavg_s")
    return run(config, task, streams, f_star)


def run_airfedmodel(config: AlgoConfig, task, streams: StreamBundle, f_star=None) -> RunTrace:
    if config.variant != "airfedmodel":
        raise ParameterError(f"config variant is {config.variant!r}, expected airfedmodel")
    return run(config, task, streams, f_star)


def weighted_gradient_norm_statistic(trace: RunTrace, upto=None) -> float:
    """(sum_t eta^t ||grad F(theta^t)||^2) / (sum_t eta^t) over rounds [0, upto)."""
    upto = trace.completed if upto is None else min(upto, trace.completed)
    if upto < 1:
        raise ParameterError("statistic needs at least one completed round")
    etas = trace.lr[:upto]
    return float((etas @ trace.grad_sq_norm[:upto]) / etas.sum())
