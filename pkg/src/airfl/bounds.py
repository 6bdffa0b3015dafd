"""Numeric evaluation of the convergence bounds.

Every theorem evaluator consumes the aggregation-error MSE (and, for the
biased theorems, the squared bias norm) as per-round data sequences, so the
same code compares closed-form predictions against measured traces.  Bound
values are returned for every prefix horizon 0..T by running the one-step
recursion behind each theorem; this is numerically equivalent to the product
form but needs no explicit log-space product bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import HypothesisViolationError, ParameterError, ShapeError
from .fedalgos import LrSchedule, lr_value
from .numkit import SeededStream

S_THEOREMS = ("t3", "t4", "c7")
BIASED_THEOREMS = ("t5", "t6", "t7", "t8")
COROLLARIES = ("c1", "c3", "c4", "c5", "c7")


@dataclass(frozen=True)
class BoundParams:
    """Constants feeding the theorem evaluators.

    ``sigma_n_sq`` are per-device stochastic-gradient variance bounds;
    ``grad_bound_sq`` is the bounded-gradient constant G^2 and ``g_tilde_sq``
    its weight/fading inflation (defaults to G^2 max (N p_n)^2 when absent).
    """

    mu: float
    smoothness: float
    sigma_n_sq: np.ndarray
    weights: np.ndarray
    n_devices: int
    local_epochs: int
    dim: int
    initial_gap: float
    beta1: float = 1.0
    beta2: float = 0.0
    grad_bound_sq: float = None
    g_tilde_sq: float = None
    model_bound_sq: float = None
    noise_var: float = 0.0
    power: float = 1.0

    def __post_init__(self):
        if self.mu <= 0 or self.smoothness <= 0 or self.mu > self.smoothness * (1 + 1e-9):
            raise ParameterError(f"need 0 < mu <= L, got mu={self.mu}, L={self.smoothness}")
        if self.beta1 < 1 or self.beta2 < 0:
            raise ParameterError("need beta1 >= 1 and beta2 >= 0")
        sig = np.asarray(self.sigma_n_sq, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64)
        if sig.shape != (self.n_devices,) or w.shape != (self.n_devices,):
            raise ShapeError("sigma_n_sq and weights must have one entry per device")
        if np.any(sig < 0) or np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ParameterError("variances must be >= 0 and weights must be positive, summing to 1")
        object.__setattr__(self, "sigma_n_sq", sig)
        object.__setattr__(self, "weights", w)
        if self.initial_gap < 0:
            raise ParameterError("initial gap must be non-negative")

    @property
    def sigma_sq(self):
        """sigma^2 = sum p_n^2 sigma_n^2."""
        return float(self.weights ** 2 @ self.sigma_n_sq)

    @property
    def sigma_bar_sq(self):
        """sigma_bar^2 = sum p_n sigma_n^2."""
        return float(self.weights @ self.sigma_n_sq)

    @property
    def big_sigma(self):
        """Sigma = N sigma^2."""
        return self.n_devices * self.sigma_sq

    @property
    def snr(self):
        return float("inf") if self.noise_var == 0 else self.power / self.noise_var

    def g_tilde(self):
        if self.g_tilde_sq is not None:
            return self.g_tilde_sq
        if self.grad_bound_sq is None:
            raise ParameterError("bounded-gradient constant required but not set")
        v = self.n_devices * self.weights
        return float(self.grad_bound_sq * np.max(v ** 2))


@dataclass
class BoundSeries:
    """Per-horizon bound values plus their additive term breakdown."""

    theorem: str
    totals: np.ndarray          # length T+1, totals[k] = bound after k rounds
    terms: dict
    lr: np.ndarray
    divergent_bias: bool = False


def theorem1_lr_cap(params: BoundParams) -> float:
    e, smooth, b1 = params.local_epochs, params.smoothness, params.beta1
    cap = 1.0 / (2.0 * smooth * e)
    if e > 1:
        cap = min(cap, 1.0 / (smooth * np.sqrt(2.0 * e * (e - 1) * (2 * b1 + 1))))
    return cap


def theorem5_lr_cap(params: BoundParams) -> float:
    e, smooth, b1 = params.local_epochs, params.smoothness, params.beta1
    cap = 1.0 / (4.0 * smooth * e)
    if e > 1:
        cap = min(cap, 1.0 / (smooth * np.sqrt(2.0 * e * (e - 1) * (4 * b1 + 1))))
    return cap


def _resolve_etas(lr, rounds):
    if isinstance(lr, LrSchedule):
        return np.array([lr_value(lr, t) for t in range(rounds)])
    etas = np.asarray(lr, dtype=np.float64)
    if etas.shape != (rounds,):
        raise ShapeError(f"lr sequence has shape {etas.shape}, expected ({rounds},)")
    if np.any(etas <= 0):
        raise ParameterError("every learning rate must be positive")
    return etas


def _check_cap(etas, cap, label):
    bad = np.nonzero(etas > cap * (1.0 + 1e-12))[0]
    if bad.size:
        raise HypothesisViolationError(
            f"learning rate exceeds the {label} cap {cap:.6g} in {bad.size} rounds "
            f"(first offender: round {int(bad[0])}, eta={etas[bad[0]]:.6g})",
            rounds=bad.tolist())


def _sequence(seq, rounds, name):
    arr = np.asarray(seq, dtype=np.float64)
    if arr.shape != (rounds,):
        raise ShapeError(f"{name} has shape {arr.shape}, expected ({rounds},)")
    if np.any(arr < 0):
        raise ParameterError(f"{name} must be non-negative")
    return arr


def _sc_series(theorem, etas, contraction, sources, initial_gap):
    """Prefix evaluation of init * Prod(rho) + sum_t src_t * Prod_{i>t}(rho_i)."""
    rounds = len(etas)
    terms = {"init": np.zeros(rounds + 1)}
    terms["init"][0] = initial_gap
    for name in sources:
        terms[name] = np.zeros(rounds + 1)
    for t in range(rounds):
        rho = max(0.0, contraction(etas[t]))
        terms["init"][t + 1] = rho * terms["init"][t]
        for name, src in sources.items():
            terms[name][t + 1] = rho * terms[name][t] + src[t]
    totals = np.sum(list(terms.values()), axis=0)
    return BoundSeries(theorem, totals, terms, etas.copy())


def _nc_series(theorem, etas, numerators, init_numerator):
    """Prefix evaluation of (init_num + sum_t num_t) / sum_t eta_t."""
    rounds = len(etas)
    phi = np.concatenate([[np.nan], np.cumsum(etas)])
    terms = {"init": np.full(rounds + 1, np.inf)}
    terms["init"][1:] = init_numerator / phi[1:]
    for name, num in numerators.items():
        arr = np.zeros(rounds + 1)
        arr[1:] = np.cumsum(num) / phi[1:]
        terms[name] = arr
    totals = np.sum(list(terms.values()), axis=0)
    return BoundSeries(theorem, totals, terms, etas.copy())


def theorem1_series(params: BoundParams, lr, mse_sequence) -> BoundSeries:
    """Strongly convex bound for the model-difference variant (unbiased error)."""
    rounds = len(mse_sequence)
    etas = _resolve_etas(lr, rounds)
    _check_cap(etas, theorem1_lr_cap(params), "theorem-1 learning-rate")
    mse = _sequence(mse_sequence, rounds, "mse_sequence")
    e, smooth, b1, b2 = params.local_epochs, params.smoothness, params.beta1, params.beta2
    c1 = smooth ** 2 * e * (e - 1) * (2 * b1 + 1) / (4 * b1) * (
        params.sigma_bar_sq + 2 * e * b2)
    c2 = smooth * e * params.sigma_sq
    c3 = smooth / 2.0
    sources = {"a": c1 * etas ** 3, "b": c2 * etas ** 2, "c": c3 * mse}
    return _sc_series("t1", etas,
                      lambda eta: 1.0 - params.mu * eta * e / 2.0, sources,
                      params.initial_gap)


def theorem2_series(params: BoundParams, lr, mse_sequence) -> BoundSeries:
    """Non-convex weighted-gradient bound for the model-difference variant."""
    rounds = len(mse_sequence)
    etas = _resolve_etas(lr, rounds)
    _check_cap(etas, theorem1_lr_cap(params), "theorem-2 learning-rate")
    mse = _sequence(mse_sequence, rounds, "mse_sequence")
    e, smooth, b1, b2 = params.local_epochs, params.smoothness, params.beta1, params.beta2
    c1 = smooth ** 2 * e * (e - 1) * (2 * b1 + 1) / (4 * b1) * (
        params.sigma_bar_sq + 2 * e * b2)
    c2 = smooth * e * params.sigma_sq
    c3 = smooth / 2.0
    numerators = {"a": 4 * c1 * etas ** 3 / e, "b": 4 * c2 * etas ** 2 / e,
                  "c": 4 * c3 * mse / e}
    return _nc_series("t2", etas, numerators, 4.0 * params.initial_gap / e)


def theorem_series_s_variant(theorem_id, params: BoundParams, lr, mse_sequence) -> BoundSeries:
    """Bounds for the single-gradient variant (t3 convex, t4 non-convex) and the
    model-transmission analogue (c7, E = 1, strongly convex)."""
    if theorem_id not in S_THEOREMS:
        raise ParameterError(f"unknown theorem id {theorem_id!r}; expected one of {S_THEOREMS}")
    rounds = len(mse_sequence)
    etas = _resolve_etas(lr, rounds)
    _check_cap(etas, 1.0 / params.smoothness, f"{theorem_id} learning-rate")
    mse = _sequence(mse_sequence, rounds, "mse_sequence")
    smooth, sigma_sq = params.smoothness, params.sigma_sq
    if theorem_id == "t3":
        sources = {"noise": smooth / 2.0 * etas ** 2 * (sigma_sq + mse)}
        return _sc_series("t3", etas, lambda eta: 1.0 - params.mu * eta, sources,
                          params.initial_gap)
    if theorem_id == "t4":
        numerators = {"noise": smooth * etas ** 2 * (sigma_sq + mse)}
        return _nc_series("t4", etas, numerators, 2.0 * params.initial_gap)
    sources = {"grad_var": smooth * sigma_sq * etas ** 2, "mse": smooth / 2.0 * mse}
    return _sc_series("c7", etas, lambda eta: 1.0 - params.mu * eta / 2.0, sources,
                      params.initial_gap)


def _biased_constants(params: BoundParams):
    e, smooth, b1, b2 = params.local_epochs, params.smoothness, params.beta1, params.beta2
    c1p = smooth ** 2 * e * (e - 1) * (4 * b1 + 1) / (8 * b1) * (
        params.sigma_bar_sq + 2 * e * b2)
    c2p = smooth * e * params.sigma_sq
    c3p = params.sigma_sq / 4.0
    c4p = smooth / 2.0
    c5p = 1.0 / e
    return c1p, c2p, c3p, c4p, c5p


def _flag_divergent(series_values):
    total = len(series_values) - 1
    if total < 8:
        return False
    mid = total // 2
    return (series_values[total] > 1.5 * series_values[mid]
            and series_values[total] > series_values[total - 1])


def biased_bound_series(theorem_id, params: BoundParams, lr, mse_sequence,
                        bias_sq_sequence) -> BoundSeries:
    """Bounds under biased aggregation error (t5/t6 difference, t7/t8 gradient).

    ``bias_sq_sequence`` holds ||Bias^t||^2 per round.  The returned series is
    flagged ``divergent_bias`` when its bias term keeps growing with the
    horizon (constant bias with a decaying learning rate).
    """
    if theorem_id not in BIASED_THEOREMS:
        raise ParameterError(f"unknown theorem id {theorem_id!r}; expected one of {BIASED_THEOREMS}")
    rounds = len(mse_sequence)
    etas = _resolve_etas(lr, rounds)
    mse = _sequence(mse_sequence, rounds, "mse_sequence")
    bias_sq = _sequence(bias_sq_sequence, rounds, "bias_sq_sequence")
    e, smooth = params.local_epochs, params.smoothness
    if theorem_id in ("t5", "t6"):
        _check_cap(etas, theorem5_lr_cap(params), f"{theorem_id} learning-rate")
        c1p, c2p, c3p, c4p, c5p = _biased_constants(params)
        if theorem_id == "t5":
            sources = {
                "cubic": c1p * etas ** 3,
                "quadratic": c2p * etas ** 2,
                "d": etas * (c3p + 2 * smooth ** 2 * e * mse),
                "e": c4p * mse,
                "f": c5p * bias_sq / etas,
            }
            series = _sc_series("t5", etas,
                                lambda eta: 1.0 - params.mu * eta * e / 4.0, sources,
                                params.initial_gap)
        else:
            numerators = {
                "cubic": 8 * c1p * etas ** 3 / e,
                "quadratic": 8 * c2p * etas ** 2 / e,
                "d": 8 * etas * (c3p + 2 * smooth ** 2 * e * mse) / e,
                "e": 8 * c4p * mse / e,
                "f": 8 * c5p * bias_sq / etas / e,
            }
            series = _nc_series("t6", etas, numerators, 8.0 * params.initial_gap / e)
        bias_term = "f"
    else:
        _check_cap(etas, 1.0 / (4.0 * params.smoothness), f"{theorem_id} learning-rate")
        if theorem_id == "t7":
            sources = {
                "bias_lin": 0.5 * etas * bias_sq,
                "quadratic": smooth / 2.0 * etas ** 2 * (mse + bias_sq + params.sigma_sq),
            }
            series = _sc_series("t7", etas, lambda eta: 1.0 - params.mu * eta / 2.0,
                                sources, params.initial_gap)
        else:
            numerators = {
                "bias_lin": 2.0 * etas * bias_sq,
                "quadratic": 2.0 * smooth * etas ** 2 * (mse + bias_sq + params.sigma_sq),
            }
            series = _nc_series("t8", etas, numerators, 4.0 * params.initial_gap)
        bias_term = "bias_lin"
    series.divergent_bias = _flag_divergent(series.terms[bias_term])
    return series


def lemma1_partial_sum(a1, delta1, a2, delta2, total_rounds) -> float:
    """Direct O(T) evaluation of sum_{t<T} s2(t) prod_{t<i<T} (1 - s1(i)) with
    s1(t) = a1/(t+1)^delta1 and s2(t) = a2/(t+1)^delta2."""
    return float(lemma1_partial_sums(a1, delta1, a2, delta2, [total_rounds])[0])


def lemma1_partial_sums(a1, delta1, a2, delta2, checkpoints) -> np.ndarray:
    """Partial-sum values at several horizons in one forward pass."""
    if a1 < 0 or a2 < 0 or delta2 < 0:
        raise ParameterError("a1, a2 and delta2 must be non-negative")
    if not 0 <= delta1 <= 1:
        raise ParameterError("delta1 must lie in [0, 1]")
    if a1 > 1.0:
        raise ParameterError(f"s1(0) = {a1} > 1 makes the product factors negative")
    checkpoints = [int(c) for c in checkpoints]
    if any(c < 1 for c in checkpoints):
        raise ParameterError("every horizon must be >= 1")
    horizon = max(checkpoints)
    wanted = {c: i for i, c in enumerate(checkpoints)}
    out = np.zeros(len(checkpoints))
    running = 0.0
    for t in range(horizon):
        base = t + 1.0
        running = running * (1.0 - a1 / base ** delta1) + a2 / base ** delta2
        if t + 1 in wanted:
            out[wanted[t + 1]] = running
    return out


def corollary_rate(corollary_id, params: BoundParams, horizon, mse_const=None,
                   eta_const=None, return_terms=False):
    """Closed-form convergence-rate value at the given horizon.

    c1: strongly convex difference-variant rate with eta^t = 6/(E mu (tau+t));
    c3: non-convex difference-variant with the sqrt(N/(ET))/L constant rate;
    c4: convex gradient-variant with constant eta = 1/L and constant MSE;
    c5: convex gradient-variant rate with eta^t = 2/(mu (tau+t));
    c7: model-variant floor with constant eta and constant MSE.
    """
    if corollary_id not in COROLLARIES:
        raise ParameterError(f"unknown corollary id {corollary_id!r}")
    if horizon < 1:
        raise ParameterError("horizon must be >= 1")
    mu, smooth, e, n = params.mu, params.smoothness, params.local_epochs, params.n_devices
    d, snr = params.dim, params.snr
    terms = {}
    if corollary_id == "c1":
        _check_corollary1_epochs(params)
        tau = 3.0 * smooth / mu
        a_const = smooth ** 2 * e * (e - 1) * (2 * params.beta1 + 1) / (4 * params.beta1) * (
            params.sigma_bar_sq + 2 * e * params.beta2)
        channel = 0.0 if np.isinf(snr) else params.g_tilde() / (d * n ** 2 * snr)
        b_const = smooth * e * params.sigma_sq + smooth * e * channel
        terms["quadratic_decay"] = 216.0 * a_const / (e ** 3 * mu ** 3 * (horizon + tau) ** 2)
        terms["linear_decay"] = 36.0 * b_const / (e ** 2 * mu ** 2 * (horizon + tau))
    elif corollary_id == "c3":
        eta = np.sqrt(n / (e * horizon)) / smooth
        _check_cap(np.array([eta]), theorem1_lr_cap(params), "corollary-3 learning-rate")
        channel = 0.0 if np.isinf(snr) else 2.0 * params.g_tilde() / (
            d * snr * np.sqrt(n ** 3 * e * horizon))
        terms["init"] = 4.0 * smooth * params.initial_gap / np.sqrt(n * e * horizon)
        terms["hetero"] = (n * (e - 1) * (2 * params.beta1 + 1)
                           * (params.sigma_bar_sq + 2 * e * params.beta2)
                           / (params.beta1 * e * horizon))
        terms["grad_var"] = 4.0 * params.sigma_sq * np.sqrt(n / (e * horizon))
        terms["channel"] = channel
    elif corollary_id == "c4":
        if mse_const is None:
            raise ParameterError("c4 needs the constant aggregation MSE")
        rho = 1.0 - mu / smooth
        terms["geometric"] = rho ** horizon * params.initial_gap
        terms["floor"] = (params.sigma_sq + mse_const) * (1.0 - rho ** horizon) / (2.0 * mu)
    elif corollary_id == "c5":
        tau = 2.0 * smooth / mu
        channel = 0.0 if np.isinf(snr) else params.g_tilde() / (d * n ** 2 * snr)
        c_const = smooth / 2.0 * (params.sigma_sq + channel)
        terms["rate"] = max(4.0 * c_const, mu ** 2 * tau * params.initial_gap) / (
            mu ** 2 * (tau + horizon))
    else:  # c7 floor with constant learning rate and constant MSE
        if mse_const is None:
            raise ParameterError("c7 needs the constant aggregation MSE")
        eta = eta_const if eta_const is not None else 1.0 / smooth
        _check_cap(np.array([eta]), 1.0 / smooth, "corollary-7 learning-rate")
        rho = 1.0 - mu * eta / 2.0
        per_round = smooth * params.sigma_sq * eta ** 2 + smooth / 2.0 * mse_const
        terms["geometric"] = rho ** horizon * params.initial_gap
        terms["floor"] = per_round * (1.0 - rho ** horizon) / (mu * eta / 2.0)
    value = float(sum(terms.values()))
    return (value, terms) if return_terms else value


def _check_corollary1_epochs(params: BoundParams):
    channel = 0.0 if np.isinf(params.snr) else params.g_tilde() / (
        params.dim * params.n_devices ** 2 * params.snr)
    denom = (params.beta1 * params.mu * params.initial_gap
             - 12.0 * params.beta2 * (2.0 * params.beta1 + 1.0))
    if denom <= 0:
        return  # the cap is vacuous
    cap = (6.0 * (2.0 * params.beta1 + 1.0) * params.sigma_bar_sq
           + 12.0 * params.beta1 * (params.sigma_sq + channel)) / denom
    if params.local_epochs > cap:
        raise HypothesisViolationError(
            "the number of local updates is bounded by "
            f"{cap:.6g} for these constants, got E = {params.local_epochs}")


def estimate_bgd_constants(task, probe_points, stream: SeededStream, center=None,
                           scale=1.0, grid_size=128):
    """Least upper envelope fit of the gradient-dissimilarity constants.

    Samples probe models, records x = ||grad F||^2 and y = sum p_n ||grad F_n||^2,
    then sweeps a beta1 grid twice (coarse then refined) choosing the pair that
    minimises beta2 = max(0, max_i y_i - beta1 x_i), ties broken towards the
    smallest beta1.
    """
    if probe_points < 1:
        raise ParameterError("probe_points must be >= 1")
    rng = stream.generator
    base = np.zeros(task.dim) if center is None else np.asarray(center, dtype=np.float64)
    xs, ys = [], []
    for _ in range(probe_points):
        theta = base + scale * rng.standard_normal(task.dim)
        grads = [task.device_gradient(n, theta) for n in range(task.n_devices)]
        global_grad = np.zeros(task.dim)
        local_sq = 0.0
        for n, g in enumerate(grads):
            global_grad += task.weights[n] * g
            local_sq += task.weights[n] * float(g @ g)
        xs.append(float(global_grad @ global_grad))
        ys.append(local_sq)
    xs, ys = np.array(xs), np.array(ys)

    identifiable = xs > 1e-12 * np.maximum(ys, 1.0)
    if identifiable.any():
        top = max(1.0, float(np.max(ys[identifiable] / xs[identifiable])))
    else:
        top = 1.0

    def envelope(beta1):
        return max(0.0, float(np.max(ys - beta1 * xs)))

    def sweep(lo, hi):
        grid = np.geomspace(lo, hi, grid_size) if hi > lo else np.array([lo])
        residuals = np.array([envelope(b) for b in grid])
        best = residuals.min()
        idx = int(np.nonzero(residuals <= best * (1 + 1e-12) + 1e-300)[0][0])
        return grid, idx, float(grid[idx]), float(residuals[idx])

    grid, idx, beta1, beta2 = sweep(1.0, top)
    lo = grid[max(idx - 1, 0)]
    hi = grid[min(idx + 1, len(grid) - 1)]
    if hi > lo:
        _, _, beta1, beta2 = sweep(lo, hi)
    return beta1, beta2


def estimate_gradient_variance(task, thetas, batch_size, draws, stream: SeededStream,
                               inflate=1.1):
    """Per-device Monte-Carlo bounds on E||g - grad F_n||^2 over probe models."""
    if draws < 2:
        raise ParameterError("need at least two draws per probe")
    out = np.zeros(task.n_devices)
    for k, theta in enumerate(thetas):
        for n in range(task.n_devices):
            full = task.device_gradient(n, theta)
            dev_stream = stream.fork("var", k, n)
            sq = 0.0
            for _ in range(draws):
                g = task.minibatch_gradient(n, theta, batch_size, dev_stream)
                diff = g - full
                sq += float(diff @ diff)
            out[n] = max(out[n], sq / draws)
    return out * inflate


def gradient_bound_from_trace(trace, inflate=1.1) -> float:
    """Bounded-gradient constant G^2 from a probe run's recorded maximum."""
    if trace.max_step_grad_sq <= 0:
        raise ParameterError("trace carries no recorded stochastic-gradient norms")
    return inflate * trace.max_step_grad_sq
