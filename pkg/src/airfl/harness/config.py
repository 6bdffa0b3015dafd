"""Experiment configuration: a TOML file with nested sections, validated
strictly (unknown keys are hard errors, every problem reported at once)."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..errors import ValidationError

TASK_TYPES = ("linear", "logistic", "blob_mlp", "mnist_mlp")

# section -> key -> (type, required, default)
_SCHEMA = {
    "experiment": {
        "name": (str, False, "experiment"),
        "repetitions": (int, True, None),
        "base_seed": (int, True, None),
        "output_dir": (str, True, None),
        "workers": (int, False, 1),
        "record_epsilon": (bool, False, False),
        "record_models": (bool, False, False),
        "task_seed": (int, False, None),
        "channel_seed": (int, False, None),
        "noise_seed": (int, False, None),
    },
    "task": {
        "type": (str, True, None),
        "n_devices": (int, False, None),
        "dim": (int, False, None),
        "size_min": (int, False, None),
        "size_max": (int, False, None),
        "size_mean": (int, False, None),
        "noise_var": (float, False, None),
        "device_size": (int, False, None),
        "n_classes": (int, False, None),
        "dim_in": (int, False, None),
        "hidden": (int, False, None),
        "samples_per_device": (int, False, None),
        "labels_per_device": (int, False, 0),
        "spread": (float, False, 0.6),
        "test_fraction": (float, False, 0.1),
        "activation": (str, False, "tanh"),
        "images": (str, False, None),
        "labels": (str, False, None),
        "test_images": (str, False, None),
        "test_labels": (str, False, None),
        "shards_per_device": (int, False, None),
        "limit": (int, False, None),
    },
    "algorithm": {
        "variant": (str, True, None),
        "local_epochs": (int, True, None),
        "rounds": (int, True, None),
        "batch_size": (int, True, None),
        "lr_cap": (float, False, None),
        "lr": "subsection",
    },
    "algorithm.lr": {
        "kind": (str, True, None),
        "eta0": (float, False, 0.1),
        "decay": (float, False, 0.0),
        "mu": ((float, str), False, None),
        "smoothness": ((float, str), False, None),
    },
    "channel": {
        "fading": (str, True, None),
        "snr_db": (float, False, None),
        "power": (float, False, 1.0),
        "truncation": (float, False, 0.0),
    },
    "precoder": {
        "kind": (str, True, None),
        "beta": (float, False, None),
        "grad_bound_sq": ((float, str), False, None),
        "power_factors": ((float, list), False, None),
    },
    "bounds": {
        "theorem": (str, True, None),
        "probe_points": (int, False, 50),
        "probe_scale": (float, False, None),
        "variance_draws": (int, False, 100),
        "halve_smoothness": (bool, False, False),
    },
}

_REQUIRED_SECTIONS = ("experiment", "task", "algorithm")
_TASK_REQUIRED = {
    "linear": ("n_devices", "dim", "size_min", "size_max", "size_mean", "noise_var"),
    "logistic": ("n_devices", "dim", "device_size"),
    "blob_mlp": ("n_devices", "n_classes", "dim_in", "hidden", "samples_per_device"),
    "mnist_mlp": ("images", "labels", "n_devices", "shards_per_device", "hidden"),
}


@dataclass
class ExperimentConfig:
    """Parsed, validated experiment description."""

    experiment: dict
    task: dict
    algorithm: dict
    lr: dict
    channel: dict = None
    precoder: dict = None
    bounds: dict = None
    source_text: str = field(default="", repr=False)

    def echo(self):
        """Config as plain nested dicts for the manifest."""
        out = {"experiment": dict(self.experiment), "task": dict(self.task),
               "algorithm": {**self.algorithm, "lr": dict(self.lr)}}
        for name in ("channel", "precoder", "bounds"):
            section = getattr(self, name)
            if section is not None:
                out[name] = dict(section)
        return out


def _coerce(value, kinds):
    if not isinstance(kinds, tuple):
        kinds = (kinds,)
    if bool in kinds and isinstance(value, bool):
        return value, True
    if isinstance(value, bool):  # a bool is an int in Python; reject unless asked for
        return value, bool in kinds
    for kind in kinds:
        if kind is float and isinstance(value, (int, float)):
            return float(value), True
        if isinstance(value, kind):
            return value, True
    return value, False


def _check_section(name, raw, problems):
    schema = _SCHEMA[name]
    out = {}
    for key, value in raw.items():
        if key not in schema:
            problems.append(f"unknown key {name}.{key}")
            continue
        if schema[key] == "subsection":
            continue
        coerced, ok = _coerce(value, schema[key][0])
        if not ok:
            problems.append(f"{name}.{key} has the wrong type ({type(value).__name__})")
        else:
            out[key] = coerced
    for key, rule in schema.items():
        if rule == "subsection" or key in out:
            continue
        _, required, default = rule
        if key in raw:
            continue  # present but mistyped; already reported
        if required:
            problems.append(f"{name}.{key} is required")
        else:
            out[key] = default
    return out


def parse_config(path) -> ExperimentConfig:
    """Load and validate a TOML experiment config, raising with every problem."""
    text = Path(path).read_text(encoding="utf-8")
    return parse_config_text(text)


def parse_config_text(text: str) -> ExperimentConfig:
    problems = []
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError([f"TOML parse error: {exc}"]) from None

    for section in raw:
        if section not in _SCHEMA or "." in section:
            problems.append(f"unknown section [{section}]")
    for section in _REQUIRED_SECTIONS:
        if section not in raw:
            problems.append(f"missing section [{section}]")
    if problems:
        raise ValidationError(problems)

    experiment = _check_section("experiment", raw["experiment"], problems)
    task = _check_section("task", raw["task"], problems)
    algorithm_raw = dict(raw["algorithm"])
    lr_raw = algorithm_raw.pop("lr", None)
    algorithm = _check_section("algorithm", algorithm_raw, problems)
    if lr_raw is None:
        problems.append("algorithm.lr is required")
        lr = {}
    elif not isinstance(lr_raw, dict):
        problems.append("algorithm.lr must be a table")
        lr = {}
    else:
        lr = _check_section("algorithm.lr", lr_raw, problems)
    channel = (_check_section("channel", raw["channel"], problems)
               if "channel" in raw else None)
    precoder = (_check_section("precoder", raw["precoder"], problems)
                if "precoder" in raw else None)
    bounds = (_check_section("bounds", raw["bounds"], problems)
              if "bounds" in raw else None)

    _semantic_checks(experiment, task, algorithm, lr, channel, precoder, bounds, problems)
    if problems:
        raise ValidationError(problems)
    return ExperimentConfig(experiment, task, algorithm, lr, channel, precoder, bounds,
                            source_text=text)


def _semantic_checks(experiment, task, algorithm, lr, channel, precoder, bounds, problems):
    from ..channel import FADINGS
    from ..fedalgos import LR_KINDS, PRECODER_KINDS, VARIANTS

    if experiment.get("repetitions") is not None and experiment["repetitions"] < 1:
        problems.append("experiment.repetitions must be >= 1")
    if experiment.get("workers") is not None and experiment["workers"] < 1:
        problems.append("experiment.workers must be >= 1")

    kind = task.get("type")
    if kind is not None and kind not in TASK_TYPES:
        problems.append(f"task.type must be one of {TASK_TYPES}, got {kind!r}")
    elif kind is not None:
        for key in _TASK_REQUIRED[kind]:
            if task.get(key) is None:
                problems.append(f"task.{key} is required for task.type = {kind!r}")

    variant = algorithm.get("variant")
    if variant is not None and variant not in VARIANTS:
        problems.append(f"algorithm.variant must be one of {VARIANTS}, got {variant!r}")
    over_air = variant is not None and not variant.startswith("errorfree")
    if over_air and channel is None:
        problems.append("a [channel] section is required for over-the-air variants")
    if over_air and precoder is None:
        problems.append("a [precoder] section is required for over-the-air variants")

    if lr.get("kind") is not None and lr["kind"] not in LR_KINDS:
        problems.append(f"algorithm.lr.kind must be one of {LR_KINDS}, got {lr['kind']!r}")
    for key in ("mu", "smoothness"):
        value = lr.get(key)
        if isinstance(value, str) and value != "auto":
            problems.append(f"algorithm.lr.{key} must be a number or 'auto'")

    if channel is not None:
        if channel.get("fading") is not None and channel["fading"] not in FADINGS:
            problems.append(f"channel.fading must be one of {FADINGS}")
        if channel.get("fading") not in (None, "error_free") and channel.get("snr_db") is None:
            problems.append("channel.snr_db is required unless fading = 'error_free'")

    if precoder is not None:
        if precoder.get("kind") is not None and precoder["kind"] not in PRECODER_KINDS:
            problems.append(f"precoder.kind must be one of {PRECODER_KINDS}")
        gbs = precoder.get("grad_bound_sq")
        if isinstance(gbs, str) and gbs != "auto":
            problems.append("precoder.grad_bound_sq must be a number or 'auto'")
        if precoder.get("kind") == "phase_only":
            if precoder.get("beta") is None or precoder.get("power_factors") is None:
                problems.append("phase_only precoding needs beta and power_factors")

    if bounds is not None and bounds.get("theorem") not in (None, "t1", "t3"):
        problems.append("bounds.theorem must be 't1' or 't3'")
