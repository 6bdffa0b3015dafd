"""Harness tests: config validation, artifact determinism, aggregation
correctness, error statistics, bound comparison, plot export, and CLI exit
codes."""

import json

import numpy as np
import pytest

from airfl.channel import ChannelConfig
from airfl.errors import ParameterError, ValidationError
from airfl.fedalgos import AlgoConfig, LrSchedule, PrecoderPolicy, StreamBundle, run
from airfl.harness import (MetricTable, compare_with_bound, emit_plot_data,
                           mae_statistics, parse_config_text, run_experiment)
from airfl.harness.cli import main as cli_main
from airfl.harness.plotdata import METRICS
from airfl.numkit import SeededStream
from airfl.tasks import closed_form_optimum, generate_linear_task

TINY_CONFIG = """
[experiment]
repetitions = 1
base_seed = 11
output_dir = "{out}"

[task]
type = "linear"
n_devices = 3
dim = 4
size_min = 12
size_max = 12
size_mean = 12
noise_var = 0.1

[algorithm]
variant = "errorfree_fedavg_m"
local_epochs = 2
rounds = 5
batch_size = 6

[algorithm.lr]
kind = "inverse_time"
eta0 = 0.05
decay = 0.002
"""

NOISY_CONFIG = """
[experiment]
repetitions = 4
base_seed = 21
output_dir = "{out}"
record_epsilon = true

[task]
type = "linear"
n_devices = 3
dim = 4
size_min = 12
size_max = 12
size_mean = 12
noise_var = 0.1

[algorithm]
variant = "airfedavg_m"
local_epochs = 2
rounds = 8
batch_size = 6

[algorithm.lr]
kind = "inverse_time"
eta0 = 0.05
decay = 0.002

[channel]
fading = "rayleigh_block"
snr_db = 5.0

[precoder]
kind = "inversion_cotaf"
"""


class TestConfigParsing:
    def test_valid_config_parses(self, tmp_path):
        cfg = parse_config_text(TINY_CONFIG.format(out=tmp_path))
        assert cfg.task["type"] == "linear"
        assert cfg.algorithm["rounds"] == 5
        assert cfg.lr["kind"] == "inverse_time"
        assert cfg.channel is None

    def test_every_problem_reported_at_once(self, tmp_path):
        bad = TINY_CONFIG.format(out=tmp_path) + """
[channel]
fading = "warp_drive"
typo_key = 1
"""
        with pytest.raises(ValidationError) as err:
            parse_config_text(bad)
        text = str(err.value)
        assert "channel.typo_key" in text
        assert "channel.fading" in text

    def test_unknown_section_rejected(self, tmp_path):
        with pytest.raises(ValidationError) as err:
            parse_config_text(TINY_CONFIG.format(out=tmp_path) + "\n[mystery]\nx = 1\n")
        assert "mystery" in str(err.value)

    def test_missing_required_key(self, tmp_path):
        broken = TINY_CONFIG.format(out=tmp_path).replace('variant = "errorfree_fedavg_m"\n', "")
        with pytest.raises(ValidationError) as err:
            parse_config_text(broken)
        assert "algorithm.variant is required" in str(err.value)

    def test_air_variant_requires_channel(self, tmp_path):
        broken = TINY_CONFIG.format(out=tmp_path).replace("errorfree_fedavg_m", "airfedavg_m")
        with pytest.raises(ValidationError) as err:
            parse_config_text(broken)
        assert "[channel]" in str(err.value)

    def test_snr_conversion_invariant(self):
        cfg = ChannelConfig.from_snr_db("awgn", 5.0, dim=7, power=2.0)
        assert cfg.noise_var == pytest.approx(2.0 / 10 ** 0.5, rel=1e-12)


class TestRunExperiment:
    def test_row_count_contract(self, tmp_path):
        artifacts = run_experiment(parse_config_text(TINY_CONFIG.format(out=tmp_path)))
        table = MetricTable.read_csv(artifacts.run_csvs[0])
        present = {m for _, _, m, _ in table.rows}
        # linear task: no test accuracy; everything else is in the vocabulary
        assert present == {"loss", "gap", "grad_sq_norm", "lr", "beta",
                           "mae_sq_norm", "mae_bias_norm"}
        for metric in present:
            rounds, _ = table.series(metric, 0)
            assert rounds.size == 6, metric

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg_text = TINY_CONFIG.format(out=tmp_path / "a")
        first = run_experiment(parse_config_text(cfg_text))
        second = run_experiment(parse_config_text(cfg_text), tmp_path / "b")
        for p1, p2 in zip(first.run_csvs, second.run_csvs):
            assert p1.read_bytes() == p2.read_bytes()
        assert first.aggregate_csv.read_bytes() == second.aggregate_csv.read_bytes()
        m1 = json.loads(first.manifest_path.read_text())
        m2 = json.loads(second.manifest_path.read_text())
        assert m1["content_hash"] == m2["content_hash"]
        assert m1["task_fingerprint"] == m2["task_fingerprint"]

    def test_aggregate_is_arithmetic_mean_of_runs(self, tmp_path):
        artifacts = run_experiment(parse_config_text(NOISY_CONFIG.format(out=tmp_path)))
        tables = [MetricTable.read_csv(p) for p in artifacts.run_csvs]
        agg_lines = artifacts.aggregate_csv.read_text().splitlines()[1:]
        agg = {}
        for line in agg_lines:
            rnd, metric, mean, std, n_runs = line.split(",")
            agg[(int(rnd), metric)] = (float(mean), int(n_runs))
        for (rnd, metric), (mean, n_runs) in agg.items():
            values = [t.series(metric, 0)[1][rnd] for t in tables]
            assert n_runs == len(values)
            np.testing.assert_allclose(mean, np.mean(values), rtol=1e-12, atol=1e-15)

    def test_seed_isolation(self, tmp_path):
        base = NOISY_CONFIG.format(out=tmp_path / "a")
        shifted = base.replace("base_seed = 21", "base_seed = 21\nchannel_seed = 900")
        art_a = run_experiment(parse_config_text(base))
        art_b = run_experiment(parse_config_text(shifted), tmp_path / "b")
        man_a = json.loads(art_a.manifest_path.read_text())
        man_b = json.loads(art_b.manifest_path.read_text())
        # task and initial model untouched, traces differ
        assert man_a["task_fingerprint"] == man_b["task_fingerprint"]
        assert man_a["content_hash"] != man_b["content_hash"]

    def test_parallel_workers_match_sequential(self, tmp_path):
        base = NOISY_CONFIG.format(out=tmp_path / "seq")
        par = NOISY_CONFIG.format(out=tmp_path / "par").replace(
            "repetitions = 4", "repetitions = 4\nworkers = 2")
        art_seq = run_experiment(parse_config_text(base))
        art_par = run_experiment(parse_config_text(par))
        for p1, p2 in zip(art_seq.run_csvs, art_par.run_csvs):
            assert p1.read_bytes() == p2.read_bytes()

    def test_manifest_records_wall_time_and_seeds(self, tmp_path):
        artifacts = run_experiment(parse_config_text(TINY_CONFIG.format(out=tmp_path)))
        manifest = json.loads(artifacts.manifest_path.read_text())
        assert manifest["wall_time_s"] > 0
        assert manifest["runs"][0]["seeds"] == {"batch": 11, "channel": 11, "noise": 11}
        assert manifest["f_star"] is not None


def linear_fixture(seed=0):
    task = generate_linear_task(3, 5, (16, 16, 16), 0.2, SeededStream(seed, "task"))
    theta0 = np.zeros(task.dim)
    _, f_star = closed_form_optimum(task)
    return task, theta0, f_star


class TestMaeStatistics:
    def run_traces(self, precoder, power_factors=None, noise_var=0.2, runs=6, rounds=12):
        task, theta0, f_star = linear_fixture()
        channel = ChannelConfig("rayleigh_block", noise_var, 1.0, task.dim)
        policy = PrecoderPolicy(precoder, beta=2.0,
                                power_factors=power_factors)
        cfg = AlgoConfig("airfedavg_m", 2, rounds, 8,
                         LrSchedule("inverse_time", eta0=0.05, decay=0.01),
                         theta0, channel=channel, precoder=policy, record_epsilon=True)
        return [run(cfg, task, StreamBundle.from_seed(50 + i), f_star)
                for i in range(runs)]

    def test_full_inversion_is_unbiased(self):
        traces = self.run_traces("inversion_fixed_beta")
        stats = mae_statistics(traces)
        assert np.all(stats.bias_norm <= 3.0 * stats.bias_se_norm)

    def test_phase_only_misalignment_is_biased(self):
        # unit-magnitude channel and full-batch updates keep the misalignment
        # identical across runs, so the cross-run mean isolates the bias
        task, theta0, f_star = linear_fixture()
        channel = ChannelConfig("awgn", 0.0005, 1.0, task.dim)
        policy = PrecoderPolicy("phase_only", beta=2.0,
                                power_factors=np.full(task.n_devices, 0.25))
        cfg = AlgoConfig("airfedavg_m", 2, 12, task.device_size(0),
                         LrSchedule("inverse_time", eta0=0.05, decay=0.01),
                         theta0, channel=channel, precoder=policy, record_epsilon=True)
        traces = [run(cfg, task, StreamBundle.from_seed(70 + i), f_star) for i in range(6)]
        stats = mae_statistics(traces)
        assert np.any(stats.bias_norm > 5.0 * stats.bias_se_norm)

    def test_noiseless_full_inversion_is_exactly_zero(self):
        traces = self.run_traces("inversion_fixed_beta", noise_var=0.0)
        stats = mae_statistics(traces)
        np.testing.assert_allclose(stats.bias_norm, 0.0, atol=1e-12)
        np.testing.assert_allclose(stats.mean_sq_norm, 0.0, atol=1e-24)

    def test_needs_two_runs(self):
        traces = self.run_traces("inversion_fixed_beta", runs=1)
        with pytest.raises(ParameterError):
            mae_statistics(traces)


class TestCompareWithBound:
    def test_errorfree_run_is_sound(self):
        from airfl.harness import measure_bound_params

        task, theta0, f_star = linear_fixture(seed=2)
        cfg = AlgoConfig("errorfree_fedavg_m", 2, 30, 8,
                         LrSchedule("constant", eta0=0.02), theta0)
        traces = [run(cfg, task, StreamBundle.from_seed(90 + i), f_star) for i in range(3)]
        params, _ = measure_bound_params(task, theta0, 8, SeededStream(1, "p"),
                                         local_epochs=2, probe_points=30,
                                         variance_draws=30)
        report = compare_with_bound(traces, params, "t1")
        assert report.ok
        assert np.all(report.bound >= report.empirical - 3 * report.std_error)

    def test_lr_violation_surfaces_as_flags(self):
        from airfl.harness import measure_bound_params

        task, theta0, f_star = linear_fixture(seed=3)
        cfg = AlgoConfig("errorfree_fedavg_m", 2, 10, 8,
                         LrSchedule("constant", eta0=0.5), theta0)
        traces = [run(cfg, task, StreamBundle.from_seed(17), f_star)]
        params, _ = measure_bound_params(task, theta0, 8, SeededStream(1, "p"),
                                         local_epochs=2, probe_points=20,
                                         variance_draws=20)
        report = compare_with_bound(traces, params, "t1")
        assert report.hypothesis_error is not None
        assert len(report.flags) == 10
        assert not report.ok


class TestPlotData:
    def make_table(self, tmp_path):
        artifacts = run_experiment(parse_config_text(NOISY_CONFIG.format(out=tmp_path)))
        return MetricTable.from_traces(artifacts.traces)

    def test_emit_mean_std_columns(self, tmp_path):
        table = self.make_table(tmp_path)
        out = emit_plot_data(table, "gap", "log", tmp_path / "gap.dat")
        lines = [l for l in out.read_text().splitlines() if not l.startswith("#")]
        assert len(lines) == 9  # rounds 0..8
        stds = [float(l.split()[2]) for l in lines]
        assert all(s >= 0 for s in stds)
        stub = (tmp_path / "gap.dat.gp").read_text()
        assert "logscale y" in stub

    def test_unknown_metric_rejected(self, tmp_path):
        table = self.make_table(tmp_path)
        with pytest.raises(ParameterError):
            emit_plot_data(table, "not_a_metric", "linear", tmp_path / "x.dat")
        assert "not_a_metric" not in METRICS


class TestCli:
    def test_run_and_plot_roundtrip(self, tmp_path, capsys):
        cfg_path = tmp_path / "exp.toml"
        cfg_path.write_text(TINY_CONFIG.format(out=tmp_path / "out"))
        assert cli_main(["run", str(cfg_path)]) == 0
        table_path = tmp_path / "out" / "run_000.csv"
        assert table_path.exists()
        assert cli_main(["plot", str(table_path), "--metric", "loss", "--logy",
                         "--out", str(tmp_path / "loss.dat")]) == 0
        assert (tmp_path / "loss.dat").exists()
        assert (tmp_path / "loss.dat.gp").exists()

    def test_invalid_config_exit_code(self, tmp_path, capsys):
        cfg_path = tmp_path / "bad.toml"
        cfg_path.write_text("[experiment]\nrepetitions = 1\n")
        assert cli_main(["run", str(cfg_path)]) == 2
        assert "missing section" in capsys.readouterr().err

    def test_sequences_command(self, tmp_path):
        out = tmp_path / "seq"
        assert cli_main(["sequences", "--pairs", "1,0;1,1;1,2;1,3", "--T", "1000",
                         "--out", str(out)]) == 0
        files = sorted(p.name for p in out.glob("sequence_*.dat"))
        assert len(files) == 4
        assert (out / "sequences.gp").exists()

    def test_plot_unknown_metric_exit_code(self, tmp_path, capsys):
        cfg_path = tmp_path / "exp.toml"
        cfg_path.write_text(TINY_CONFIG.format(out=tmp_path / "out"))
        cli_main(["run", str(cfg_path)])
        code = cli_main(["plot", str(tmp_path / "out" / "run_000.csv"),
                         "--metric", "bogus"])
        assert code == 2

    BOUNDS_CONFIG = """
[experiment]
repetitions = 3
base_seed = 31
output_dir = "{out}"

[task]
type = "linear"
n_devices = 3
dim = 4
size_min = 12
size_max = 12
size_mean = 12
noise_var = 0.1

[algorithm]
variant = "errorfree_fedavg_m"
local_epochs = 2
rounds = 10
batch_size = 6

[algorithm.lr]
kind = "constant"
eta0 = {eta0}

[bounds]
theorem = "t1"
probe_points = 20
variance_draws = 20
"""

    def test_bounds_subcommand_exit_codes(self, tmp_path, capsys):
        # modest rate: hypothesis holds, bound sound, exit 0
        good = tmp_path / "good.toml"
        good.write_text(self.BOUNDS_CONFIG.format(out=tmp_path / "good_out", eta0=0.02))
        assert cli_main(["bounds", str(good)]) == 0
        assert (tmp_path / "good_out" / "bound_report.csv").exists()
        # rate far above the theorem cap: flagged rounds, exit 3
        bad = tmp_path / "bad.toml"
        bad.write_text(self.BOUNDS_CONFIG.format(out=tmp_path / "bad_out", eta0=0.5))
        assert cli_main(["bounds", str(bad)]) == 3
        assert "hypothesis violation" in capsys.readouterr().out


MNIST_CONFIG = """
[experiment]
repetitions = 1
base_seed = 41
output_dir = "{out}"

[task]
type = "mnist_mlp"
images = "{images}"
labels = "{labels}"
n_devices = 5
shards_per_device = 2
hidden = 8

[algorithm]
variant = "errorfree_fedavg_m"
local_epochs = 1
rounds = 3
batch_size = 4

[algorithm.lr]
kind = "constant"
eta0 = 0.05
"""

BLOB_CONFIG = """
[experiment]
repetitions = 2
base_seed = 51
output_dir = "{out}"

[task]
type = "blob_mlp"
n_devices = 4
n_classes = 2
dim_in = 6
hidden = 5
samples_per_device = 20
labels_per_device = 0

[algorithm]
variant = "airfedavg_s"
local_epochs = 1
rounds = 4
batch_size = 8

[algorithm.lr]
kind = "constant"
eta0 = 0.05

[channel]
fading = "awgn"
snr_db = 10.0

[precoder]
kind = "inversion_cotaf"
"""


class TestTaskConfigPaths:
    def test_mnist_config_end_to_end(self, tmp_path):
        from .test_tasks_data import write_images_fixture, write_labels_fixture

        rng = np.random.default_rng(9)
        images = rng.integers(0, 256, size=(40, 28, 28)).astype(np.uint8)
        labels = np.repeat(np.arange(10), 4).astype(np.uint8)
        write_images_fixture(tmp_path / "img.idx", images)
        write_labels_fixture(tmp_path / "lab.idx", labels)
        text = MNIST_CONFIG.format(out=tmp_path / "out", images=tmp_path / "img.idx",
                                   labels=tmp_path / "lab.idx")
        artifacts = run_experiment(parse_config_text(text))
        assert artifacts.task.layer_sizes == (784, 8, 10)
        assert artifacts.traces[0].completed == 3

    def test_blob_config_reports_test_accuracy(self, tmp_path):
        artifacts = run_experiment(parse_config_text(BLOB_CONFIG.format(out=tmp_path)))
        table = MetricTable.read_csv(artifacts.run_csvs[0])
        rounds, acc = table.series("test_accuracy", 0)
        assert rounds.size == 5
        assert np.all((0.0 <= acc) & (acc <= 1.0))
