"""Command-line interface.

Exit codes: 0 success, 2 validation error, 3 flagged bound violation.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ..bounds import lemma1_partial_sums
from ..errors import AirflError, ValidationError
from .plotdata import MetricTable, emit_plot_data
from .runner import evaluate_bounds, run_experiment


def _cmd_run(args):
    artifacts = run_experiment(args.config, args.output)
    print(f"wrote {len(artifacts.run_csvs)} run tables, {artifacts.aggregate_csv}, "
          f"{artifacts.manifest_path}")
    diverged = [i for i, t in enumerate(artifacts.traces) if t.diverged]
    if diverged:
        print(f"note: runs flagged diverged: {diverged}")
    return 0


def _cmd_plot(args):
    table = MetricTable.read_csv(args.table)
    out = args.out or str(Path(args.table).with_suffix("")) + f".{args.metric}.dat"
    path = emit_plot_data(table, args.metric, "log" if args.logy else "linear", out)
    print(f"wrote {path} and {path}.gp")
    return 0


def _cmd_bounds(args):
    artifacts, report = evaluate_bounds(args.config, args.output)
    print(f"bound report: {artifacts.output_dir / 'bound_report.csv'}")
    if report.hypothesis_error:
        print(f"hypothesis violation: {report.hypothesis_error}")
    if report.flags:
        print(f"FLAGGED rounds: {report.flags[:20]}{'...' if len(report.flags) > 20 else ''}")
        return 3
    print("no violations: empirical mean gap within the bound at every round")
    return 0


def _parse_pairs(text):
    pairs = []
    for chunk in text.split(";"):
        d1, d2 = chunk.split(",")
        pairs.append((float(d1), float(d2)))
    return pairs


def _cmd_sequences(args):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    horizon = args.T
    checkpoints = sorted({int(round(horizon ** (k / 40.0))) for k in range(41)})
    for d1, d2 in _parse_pairs(args.pairs):
        values = lemma1_partial_sums(args.a1, d1, args.a2, d2, checkpoints)
        name = out_dir / f"sequence_d1_{d1:g}_d2_{d2:g}.dat"
        lines = [f"# partial sums, (delta1, delta2) = ({d1:g}, {d2:g})", "# T value"]
        lines += [f"{c} {repr(float(v))}" for c, v in zip(checkpoints, values)]
        name.write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(f"wrote {name}")
    stub = out_dir / "sequences.gp"
    stub.write_text("set logscale xy\nplot for [f in system('ls sequence_*.dat')] "
                    "f using 1:2 with lines title f\n", encoding="utf-8")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="airfl",
                                     description="Over-the-air federated averaging simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a configured experiment")
    p_run.add_argument("config")
    p_run.add_argument("--output", default=None, help="override the output directory")
    p_run.set_defaults(func=_cmd_run)

    p_plot = sub.add_parser("plot", help="emit plot data from a metric table")
    p_plot.add_argument("table")
    p_plot.add_argument("--metric", required=True)
    p_plot.add_argument("--logy", action="store_true")
    p_plot.add_argument("--out", default=None)
    p_plot.set_defaults(func=_cmd_plot)

    p_bounds = sub.add_parser("bounds", help="run an experiment and check its bound block")
    p_bounds.add_argument("config")
    p_bounds.add_argument("--output", default=None)
    p_bounds.set_defaults(func=_cmd_bounds)

    p_seq = sub.add_parser("sequences", help="export sequence-lemma partial sums")
    p_seq.add_argument("--pairs", required=True,
                       help="semicolon-separated delta pairs, e.g. '1,0;1,1;1,2;1,3'")
    p_seq.add_argument("--T", type=int, default=10000)
    p_seq.add_argument("--a1", type=float, default=1.0)
    p_seq.add_argument("--a2", type=float, default=1.0)
    p_seq.add_argument("--out", default="sequences")
    p_seq.set_defaults(func=_cmd_sequences)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(exc, file=sys.stderr)
        return 2
    except AirflError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
