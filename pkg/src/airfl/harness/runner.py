"""Experiment orchestration: task construction, Monte-Carlo repetition,
artifact export, and bound-vs-empirical comparison."""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import bounds as bounds_mod
from .. import tasks as tasks_mod
from ..channel import ChannelConfig
from ..errors import HypothesisViolationError, ParameterError, ValidationError
from ..fedalgos import (AlgoConfig, LrSchedule, PrecoderPolicy, RunTrace,
                        StreamBundle, run)
from ..numkit import RunningStats, SeededStream
from .config import ExperimentConfig, parse_config
from .plotdata import MetricTable, _fmt

PACKAGE_VERSION = "0.1.0"


@dataclass
class ExperimentArtifacts:
    output_dir: Path
    run_csvs: list
    aggregate_csv: Path
    manifest_path: Path
    traces: list
    task: object
    theta0: np.ndarray
    f_star: float
    config: ExperimentConfig


def build_task(cfg: ExperimentConfig):
    """Construct the task, its initial model, and (when known) the optimum."""
    task_cfg = cfg.task
    seed = cfg.experiment.get("task_seed")
    seed = cfg.experiment["base_seed"] if seed is None else seed
    stream = SeededStream(seed, "task")
    kind = task_cfg["type"]
    if kind == "linear":
        task = tasks_mod.generate_linear_task(
            task_cfg["n_devices"], task_cfg["dim"],
            (task_cfg["size_min"], task_cfg["size_max"], task_cfg["size_mean"]),
            task_cfg["noise_var"], stream)
        theta0 = np.zeros(task.dim)
        _, f_star = tasks_mod.closed_form_optimum(task)
        return task, theta0, f_star
    if kind == "logistic":
        task = tasks_mod.generate_logistic_task(
            task_cfg["n_devices"], task_cfg["dim"], task_cfg["device_size"], stream)
        return task, np.zeros(task.dim), None
    if kind == "blob_mlp":
        labels_per = task_cfg["labels_per_device"] or None
        task = tasks_mod.generate_blob_mlp_task(
            task_cfg["n_devices"], task_cfg["n_classes"], task_cfg["dim_in"],
            task_cfg["hidden"], task_cfg["samples_per_device"], stream,
            labels_per_device=labels_per, spread=task_cfg["spread"],
            test_fraction=task_cfg["test_fraction"], activation=task_cfg["activation"])
    else:  # mnist_mlp
        task = tasks_mod.mnist_mlp_task(
            task_cfg["images"], task_cfg["labels"], task_cfg["n_devices"],
            task_cfg["shards_per_device"], task_cfg["hidden"], stream,
            test_images=task_cfg["test_images"], test_labels=task_cfg["test_labels"],
            limit=task_cfg["limit"], activation=task_cfg["activation"])
    theta0 = task.init_params(SeededStream(seed, "init"))
    return task, theta0, None


def _channel_config(cfg: ExperimentConfig, dim) -> ChannelConfig:
    ch = cfg.channel
    if ch["fading"] == "error_free":
        return ChannelConfig("error_free", 0.0, ch["power"], dim, ch["truncation"])
    return ChannelConfig.from_snr_db(ch["fading"], ch["snr_db"], dim, ch["power"],
                                     ch["truncation"])


def _lr_schedule(cfg: ExperimentConfig, task) -> LrSchedule:
    lr = dict(cfg.lr)
    needs_curvature = lr["kind"] in ("corollary1", "corollary5", "sqrt_ratio")
    mu, smooth = lr.pop("mu"), lr.pop("smoothness")
    if needs_curvature and ("auto" in (mu, smooth)):
        if not isinstance(task, tasks_mod.LinearTask):
            raise ValidationError(["algorithm.lr curvature 'auto' needs a linear task"])
        mu_auto, smooth_auto = tasks_mod.convexity_constants(task)
        mu = mu_auto if mu == "auto" else mu
        smooth = smooth_auto if smooth == "auto" else smooth
    return LrSchedule(lr["kind"], eta0=lr["eta0"], decay=lr["decay"],
                      mu=mu or 0.0, smoothness=smooth or 0.0,
                      local_epochs=cfg.algorithm["local_epochs"],
                      n_devices=task.n_devices, horizon=cfg.algorithm["rounds"])


def _probe_grad_bound(task, theta0, cfg, schedule) -> float:
    """Short error-free probe run whose max per-step gradient norm calibrates G^2."""
    alg = cfg.algorithm
    variant = "errorfree_fedavg_s" if alg["variant"] == "airfedavg_s" else "errorfree_fedavg_m"
    epochs = 1 if variant.endswith("_s") else alg["local_epochs"]
    probe = AlgoConfig(variant=variant, local_epochs=epochs,
                       rounds=min(alg["rounds"], 20), batch_size=alg["batch_size"],
                       lr=schedule, theta0=theta0)
    trace = run(probe, task, StreamBundle.from_seed(cfg.experiment["base_seed"]))
    return bounds_mod.gradient_bound_from_trace(trace)


def _precoder_policy(cfg: ExperimentConfig, task, theta0, schedule) -> PrecoderPolicy:
    pc = dict(cfg.precoder)
    if pc.get("grad_bound_sq") == "auto":
        pc["grad_bound_sq"] = _probe_grad_bound(task, theta0, cfg, schedule)
    factors = pc.pop("power_factors")
    if factors is not None and not isinstance(factors, list):
        factors = [float(factors)] * task.n_devices
    return PrecoderPolicy(pc["kind"], beta=pc["beta"],
                          grad_bound_sq=pc["grad_bound_sq"],
                          power_factors=np.asarray(factors, dtype=np.float64)
                          if factors is not None else None)


def build_algo_config(cfg: ExperimentConfig, task, theta0) -> AlgoConfig:
    alg = cfg.algorithm
    schedule = _lr_schedule(cfg, task)
    over_air = not alg["variant"].startswith("errorfree")
    channel = _channel_config(cfg, task.dim) if over_air else None
    precoder = _precoder_policy(cfg, task, theta0, schedule) if over_air else None
    return AlgoConfig(variant=alg["variant"], local_epochs=alg["local_epochs"],
                      rounds=alg["rounds"], batch_size=alg["batch_size"], lr=schedule,
                      theta0=theta0, channel=channel, precoder=precoder,
                      lr_cap=alg["lr_cap"],
                      record_epsilon=cfg.experiment["record_epsilon"],
                      record_models=cfg.experiment["record_models"])


def _seeds_for_run(cfg: ExperimentConfig, index):
    base = cfg.experiment["base_seed"]
    channel = cfg.experiment.get("channel_seed")
    noise = cfg.experiment.get("noise_seed")
    return {"batch": base + index,
            "channel": (base if channel is None else channel) + index,
            "noise": (base if noise is None else noise) + index}


def _execute_run(algo_config, task, seeds, f_star) -> RunTrace:
    streams = StreamBundle(SeededStream(seeds["batch"], "batch"),
                           SeededStream(seeds["channel"], "channel"),
                           SeededStream(seeds["noise"], "noise"))
    trace = run(algo_config, task, streams, f_star)
    trace.seeds = dict(seeds)
    return trace


def _run_star(args):
    return _execute_run(*args)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def task_fingerprint(task, theta0) -> str:
    """Content hash of the task data plus the initial model."""
    digest = hashlib.sha256()
    for device in range(task.n_devices):
        if hasattr(task, "design"):
            digest.update(np.ascontiguousarray(task.design[device]).tobytes())
            digest.update(np.ascontiguousarray(task.targets[device]).tobytes())
        else:
            digest.update(np.ascontiguousarray(task.features[device]).tobytes())
            digest.update(np.ascontiguousarray(task.labels[device]).tobytes())
    digest.update(np.ascontiguousarray(theta0).tobytes())
    return digest.hexdigest()


def run_experiment(config, output_dir=None) -> ExperimentArtifacts:
    """Execute all repetitions of a configured experiment and write artifacts.

    ``config`` is a path to a TOML file or a parsed ExperimentConfig.  Writes
    one long-format CSV per run, a mean/std aggregate CSV, and a JSON manifest.
    """
    started = time.perf_counter()
    if not isinstance(config, ExperimentConfig):
        config = parse_config(config)
    out_dir = Path(output_dir if output_dir is not None else config.experiment["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    task, theta0, f_star = build_task(config)
    algo = build_algo_config(config, task, theta0)
    reps = config.experiment["repetitions"]
    jobs = [(algo, task, _seeds_for_run(config, i), f_star) for i in range(reps)]
    workers = config.experiment["workers"]
    if workers > 1 and reps > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            traces = list(pool.map(_run_star, jobs))
    else:
        traces = [_run_star(job) for job in jobs]

    run_csvs = []
    for i, trace in enumerate(traces):
        path = out_dir / f"run_{i:03d}.csv"
        MetricTable.from_traces([trace]).write_csv(path)
        run_csvs.append(path)
    aggregate_csv = out_dir / "aggregate.csv"
    _write_aggregate(MetricTable.from_traces(traces), aggregate_csv)

    run_hashes = [_sha256(p) for p in run_csvs]
    content_hash = hashlib.sha256(
        ("".join(run_hashes) + _sha256(aggregate_csv)).encode()).hexdigest()
    manifest = {
        "name": config.experiment["name"],
        "package_version": PACKAGE_VERSION,
        "config": config.echo(),
        "task_fingerprint": task_fingerprint(task, theta0),
        "f_star": f_star,
        "runs": [{
            "seeds": _seeds_for_run(config, i),
            "csv": run_csvs[i].name,
            "sha256": run_hashes[i],
            "rounds_completed": traces[i].completed,
            "diverged_at": traces[i].diverged_at,
            "lr_clip_count": traces[i].lr_clip_count,
        } for i in range(reps)],
        "aggregate_sha256": _sha256(aggregate_csv),
        "content_hash": content_hash,
        "wall_time_s": time.perf_counter() - started,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")
    return ExperimentArtifacts(out_dir, run_csvs, aggregate_csv, manifest_path, traces,
                               task, theta0, f_star, config)


def _write_aggregate(table: MetricTable, path: Path):
    by_key = {}
    for run_id, rnd, metric, value in table.rows:
        by_key.setdefault((rnd, metric), []).append(value)
    lines = ["round,metric,mean,std,n_runs"]
    for (rnd, metric) in sorted(by_key, key=lambda k: (k[0], k[1])):
        values = np.array(by_key[(rnd, metric)])
        lines.append(f"{rnd},{metric},{_fmt(values.mean())},{_fmt(values.std())},{len(values)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class MaeStatistics:
    """Cross-run Monte-Carlo estimates of the aggregation-error moments."""

    rounds: np.ndarray
    bias_norm: np.ndarray        # || mean over runs of epsilon^t ||
    bias_se_norm: np.ndarray     # || per-coordinate standard errors ||
    mean_sq_norm: np.ndarray     # mean over runs of ||epsilon^t||^2
    sq_norm_se: np.ndarray


def mae_statistics(traces) -> MaeStatistics:
    """Estimate per-round error bias and mean squared norm across runs."""
    usable = [t for t in traces if t.epsilons is not None]
    if len(usable) < 2:
        raise ParameterError("mae_statistics needs at least two runs recorded with epsilon")
    horizon = min(t.completed for t in usable)
    bias_norm, bias_se, mean_sq, sq_se = [], [], [], []
    for rnd in range(horizon):
        eps_stats = RunningStats()
        sq_stats = RunningStats()
        for trace in usable:
            eps_stats.add(trace.epsilons[rnd])
            sq_stats.add(trace.mae_sq_norm[rnd])
        bias_norm.append(float(np.linalg.norm(eps_stats.mean)))
        bias_se.append(float(np.linalg.norm(eps_stats.std_error)))
        mean_sq.append(float(sq_stats.mean))
        sq_se.append(float(sq_stats.std_error))
    return MaeStatistics(np.arange(horizon), np.array(bias_norm), np.array(bias_se),
                         np.array(mean_sq), np.array(sq_se))


def measure_bound_params(task, theta0, batch_size, stream: SeededStream,
                         local_epochs, probe_points=50, probe_scale=None,
                         variance_draws=100, grad_bound_sq=None,
                         halve_smoothness=False):
    """Measure every theorem constant on a linear task.

    Curvature comes from the task's eigenstructure, gradient variances and
    dissimilarity constants from Monte-Carlo probes around the trajectory
    segment [theta0, theta*].  ``halve_smoothness`` deliberately corrupts L
    for negative-control fixtures.
    """
    if not isinstance(task, tasks_mod.LinearTask):
        raise ParameterError("bound constants are measured on the linear task only")
    mu, smooth = tasks_mod.convexity_constants(task)
    if halve_smoothness:
        smooth = smooth / 2.0
        mu = min(mu, smooth)
    theta_star, f_star = tasks_mod.closed_form_optimum(task)
    if probe_scale is None:
        probe_scale = max(float(np.linalg.norm(theta0 - theta_star)), 1.0)
    beta1, beta2 = bounds_mod.estimate_bgd_constants(
        task, probe_points, stream.fork("bgd"), center=theta_star, scale=probe_scale)
    probes = [theta0, 0.5 * (theta0 + theta_star), theta_star]
    sigma_n_sq = bounds_mod.estimate_gradient_variance(
        task, probes, batch_size, variance_draws, stream.fork("sigma"))
    params = bounds_mod.BoundParams(
        mu=mu, smoothness=smooth, sigma_n_sq=sigma_n_sq, weights=task.weights,
        n_devices=task.n_devices, local_epochs=local_epochs, dim=task.dim,
        initial_gap=task.loss(theta0) - f_star, beta1=beta1, beta2=beta2,
        grad_bound_sq=grad_bound_sq)
    return params, f_star


@dataclass
class BoundReport:
    """Round-by-round comparison of the empirical mean gap with a theorem bound."""

    theorem: str
    rounds: np.ndarray
    empirical: np.ndarray
    std_error: np.ndarray
    bound: np.ndarray
    flags: list
    hypothesis_error: str = None

    @property
    def ok(self):
        return not self.flags and self.hypothesis_error is None

    def write_csv(self, path):
        lines = ["round,empirical_gap,std_error,bound,slack,flag"]
        for i, rnd in enumerate(self.rounds):
            b = self.bound[i] if self.bound is not None else float("nan")
            slack = b - self.empirical[i]
            flag = int(rnd in self.flags)
            lines.append(f"{rnd},{_fmt(self.empirical[i])},{_fmt(self.std_error[i])},"
                         f"{_fmt(b)},{_fmt(slack)},{flag}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
        return Path(path)


def compare_with_bound(traces, params, theorem) -> BoundReport:
    """Check empirical mean gap <= theorem bound wherever the lr hypothesis holds.

    Rounds where the bound is undercut by more than three standard errors are
    flagged; a learning-rate hypothesis violation flags the offending rounds
    and leaves the bound column empty.
    """
    if theorem not in ("t1", "t3"):
        raise ParameterError("compare_with_bound supports theorems 't1' and 't3'")
    horizon = min(t.completed for t in traces)
    if any(t.gap is None for t in traces):
        raise ParameterError("bound comparison needs traces with a recorded optimality gap")
    gaps = np.stack([t.gap[:horizon + 1] for t in traces])
    empirical = gaps.mean(axis=0)
    if len(traces) > 1:
        se = gaps.std(axis=0, ddof=1) / np.sqrt(len(traces))
    else:
        se = np.zeros(horizon + 1)
    mse_seq = np.stack([t.mae_sq_norm[:horizon] for t in traces]).mean(axis=0)
    etas = traces[0].lr[:horizon]
    rounds = np.arange(horizon + 1)
    try:
        if theorem == "t1":
            series = bounds_mod.theorem1_series(params, etas, mse_seq)
        else:
            series = bounds_mod.theorem_series_s_variant("t3", params, etas, mse_seq)
    except HypothesisViolationError as exc:
        return BoundReport(theorem, rounds, empirical, se, None,
                           flags=list(exc.rounds), hypothesis_error=str(exc))
    flags = [int(k) for k in rounds if series.totals[k] < empirical[k] - 3.0 * se[k]]
    return BoundReport(theorem, rounds, empirical, se, series.totals, flags)


def evaluate_bounds(config, output_dir=None):
    """Config-driven bound comparison: run the experiment, measure constants,
    compare, and write bound_report.csv.  Returns (artifacts, report)."""
    if not isinstance(config, ExperimentConfig):
        config = parse_config(config)
    if config.bounds is None:
        raise ValidationError(["a [bounds] section is required for bound evaluation"])
    artifacts = run_experiment(config, output_dir)
    bspec = config.bounds
    grad_bound = None
    if config.precoder is not None and config.precoder.get("grad_bound_sq") == "auto":
        schedule = _lr_schedule(config, artifacts.task)
        grad_bound = _probe_grad_bound(artifacts.task, artifacts.theta0, config, schedule)
    params, _ = measure_bound_params(
        artifacts.task, artifacts.theta0, config.algorithm["batch_size"],
        SeededStream(config.experiment["base_seed"], "bound-probes"),
        config.algorithm["local_epochs"], probe_points=bspec["probe_points"],
        probe_scale=bspec["probe_scale"], variance_draws=bspec["variance_draws"],
        grad_bound_sq=grad_bound, halve_smoothness=bspec["halve_smoothness"])
    report = compare_with_bound(artifacts.traces, params, bspec["theorem"])
    report.write_csv(artifacts.output_dir / "bound_report.csv")
    return artifacts, report
