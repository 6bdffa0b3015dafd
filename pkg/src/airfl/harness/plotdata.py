"""Long-format metric tables and plot-ready text export."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ParameterError

METRICS = ("loss", "gap", "grad_sq_norm", "lr", "beta", "mae_sq_norm",
           "mae_bias_norm", "test_accuracy")


def _fmt(value) -> str:
    """Shortest round-trip-exact decimal representation."""
    return repr(float(value))


@dataclass
class MetricTable:
    """Rows of (run_id, round, metric, value), sorted by (run, round, metric)."""

    rows: list

    @classmethod
    def from_traces(cls, traces):
        """Tabulate traces.  State metrics sit at their round; step metrics at
        round t describe the transmission that produced the round-t model, so
        round 0 records 0.0 for them."""
        rows = []
        for run_id, trace in enumerate(traces):
            steps = trace.completed
            per_metric = {
                "loss": trace.loss,
                "grad_sq_norm": trace.grad_sq_norm,
                "lr": np.concatenate([[0.0], trace.lr]),
                "beta": np.concatenate([[0.0], trace.beta]),
                "mae_sq_norm": np.concatenate([[0.0], trace.mae_sq_norm]),
                "mae_bias_norm": np.concatenate([[0.0], trace.mae_bias_norm]),
            }
            if trace.gap is not None:
                per_metric["gap"] = trace.gap
            if trace.test_accuracy is not None:
                per_metric["test_accuracy"] = trace.test_accuracy
            for metric, series in per_metric.items():
                for rnd in range(steps + 1):
                    rows.append((run_id, rnd, metric, float(series[rnd])))
        rows.sort(key=lambda r: (r[0], r[1], r[2]))
        return cls(rows)

    def write_csv(self, path):
        lines = ["run_id,round,metric,value"]
        lines += [f"{r},{t},{m},{_fmt(v)}" for r, t, m, v in self.rows]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
        return Path(path)

    @classmethod
    def read_csv(cls, path):
        rows = []
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != "run_id,round,metric,value":
                raise ParameterError(f"{path} is not a metric table")
            for line in fh:
                run_id, rnd, metric, value = line.rstrip("\n").split(",")
                rows.append((int(run_id), int(rnd), metric, float(value)))
        return cls(rows)

    @property
    def run_ids(self):
        return sorted({r[0] for r in self.rows})

    def series(self, metric, run_id):
        pairs = [(t, v) for r, t, m, v in self.rows if r == run_id and m == metric]
        pairs.sort()
        return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])

    def mean_std(self, metric):
        """Cross-run mean and (population) std per round, over runs that reached it."""
        by_round = {}
        for r, t, m, v in self.rows:
            if m == metric:
                by_round.setdefault(t, []).append(v)
        if not by_round:
            raise ParameterError(f"metric {metric!r} not present in table")
        rounds = np.array(sorted(by_round))
        mean = np.array([np.mean(by_round[t]) for t in rounds])
        std = np.array([np.std(by_round[t]) for t in rounds])
        counts = np.array([len(by_round[t]) for t in rounds])
        return rounds, mean, std, counts


def emit_plot_data(table: MetricTable, metric, x_scale, out_path):
    """Write a plot-ready text file (round, mean[, std]) plus a gnuplot stub.

    ``x_scale`` chooses the value-axis scale in the stub: 'linear' or 'log'.
    Returns the data-file path; the stub sits next to it with a .gp suffix.
    """
    if metric not in METRICS:
        raise ParameterError(f"unknown metric {metric!r}; expected one of {METRICS}")
    if x_scale not in ("linear", "log"):
        raise ParameterError(f"x_scale must be 'linear' or 'log', got {x_scale!r}")
    out_path = Path(out_path)
    rounds, mean, std, counts = table.mean_std(metric)
    multi = counts.max() > 1
    lines = [f"# metric: {metric}"]
    lines.append("# round mean std" if multi else "# round value")
    for i, rnd in enumerate(rounds):
        if multi:
            lines.append(f"{rnd} {_fmt(mean[i])} {_fmt(std[i])}")
        else:
            lines.append(f"{rnd} {_fmt(mean[i])}")
    out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    stub = [f'set title "{metric}"', 'set xlabel "communication round"',
            f'set ylabel "{metric}"']
    if x_scale == "log":
        stub.append("set logscale y")
    if multi:
        stub.append(f'plot "{out_path.name}" using 1:2:3 with yerrorlines title "{metric}"')
    else:
        stub.append(f'plot "{out_path.name}" using 1:2 with lines title "{metric}"')
    Path(str(out_path) + ".gp").write_text("\n".join(stub) + "\n", encoding="utf-8")
    return out_path
