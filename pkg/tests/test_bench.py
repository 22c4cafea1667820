"""Workload shapes, metrics plumbing, and the command-line entry points."""

import json
import os

import pytest

from dualkv import SimConfig, bench, cli


def short_cfg(**over):
    over.setdefault("duration_s", 3)
    over.setdefault("max_ops", 100_000)
    return SimConfig().copy(**over)


# workload shapes

def test_fill_workload_is_pure_writes_with_no_gaps():
    spec = bench.WorkloadSpec.from_config(SimConfig(), "A")
    assert (spec.write_weight, spec.read_weight) == (10, 0)
    assert spec.burst_ops == 0 and spec.burst_gap_ms == 0
    assert spec.preload_ops == 0 and spec.range_queries == 0


def test_mixed_workloads_split_each_cycle_by_weight():
    cfg = SimConfig()
    b = bench.WorkloadSpec.from_config(cfg, "b")
    assert (b.write_weight, b.read_weight) == (9, 1)
    assert b.burst_ops == cfg.burst_ops
    assert b.write_phase_ops == cfg.burst_ops * 9 // 10
    c = bench.WorkloadSpec.from_config(cfg, "C")
    assert (c.write_weight, c.read_weight) == (8, 2)
    assert c.write_phase_ops == cfg.burst_ops * 8 // 10


def test_scan_workload_carries_the_range_shape():
    cfg = SimConfig()
    d = bench.WorkloadSpec.from_config(cfg, "D")
    assert d.preload_ops == cfg.preload_ops
    assert d.range_queries == cfg.range_queries
    assert d.range_len == cfg.range_len
    assert d.write_weight == 0 and d.read_weight == 0


def test_unknown_workload_is_rejected():
    with pytest.raises(ValueError):
        bench.WorkloadSpec.from_config(SimConfig(), "Z")


# runs and reports

def test_short_fill_run_produces_one_sample_per_second():
    r = bench.run_workload(short_cfg(policy="baseline-stall"), "A")
    assert len(r.samples) == 3
    assert [m.interval for m in r.samples] == [0, 1, 2]
    assert r.report["puts_acked"] > 0
    in_window = sum(m.puts for m in r.samples)
    # at most the one op in flight at window close acks during settling
    assert in_window <= r.report["puts_acked"] <= in_window + 1
    assert r.report["policy"] == "baseline-stall"
    total_writes = sum(m.put_bytes for m in r.samples)
    assert total_writes > 0


def test_fill_saturates_the_baseline_into_stalls():
    r = bench.run_workload(short_cfg(policy="baseline-stall"), "A")
    assert any(m.saw_stall for m in r.samples)
    assert r.report["blocked_puts"] > 0


def test_redirecting_policy_reports_rollback_activity():
    r = bench.run_workload(short_cfg(), "A")
    assert r.report["redirected_puts"] > 0
    assert r.report["blocked_puts"] == 0
    assert r.report["rollback_sessions"] >= 1
    assert r.store.device.dev_is_empty()  # drained after the window closes


def test_samples_csv_roundtrip(tmp_path):
    r = bench.run_workload(short_cfg(), "A")
    path = str(tmp_path / "samples.csv")
    bench.write_samples_csv(r.samples, path)
    back = bench.read_samples_csv(path)
    assert len(back) == len(r.samples)
    for row, m in zip(back, r.samples):
        assert row["puts"] == m.puts
        assert row["dev_util"] == pytest.approx(m.dev_util, abs=1e-6)
    with open(path) as fp:
        assert fp.readline().startswith("# schema: samples-v1")


def test_cdf_needs_at_least_one_stall_interval():
    calm = [{"dev_util": 0.5, "saw_stall": 0}]
    with pytest.raises(ValueError):
        bench.utilization_cdf_rows(calm)


def test_cdf_rows_are_a_proper_distribution():
    samples = [{"dev_util": u, "saw_stall": 1} for u in (0.9, 0.1, 0.5)]
    samples.append({"dev_util": 0.0, "saw_stall": 0})  # ignored
    rows = bench.utilization_cdf_rows(samples)
    assert rows == [(0.1, 1 / 3), (0.5, 2 / 3), (0.9, 1.0)]


def test_identical_config_and_seed_reproduce_the_csv_byte_for_byte(tmp_path):
    paths = []
    for i in (1, 2):
        r = bench.run_workload(short_cfg(seed=7), "B")
        p = str(tmp_path / f"run{i}.csv")
        bench.write_samples_csv(r.samples, p)
        paths.append(p)
    a, b = (open(p, "rb").read() for p in paths)
    assert a == b


# command line

def test_cli_run_writes_csv_json_and_figures(tmp_path, capsys):
    out = str(tmp_path / "out")
    cfg_file = tmp_path / "short.cfg"
    cfg_file.write_text("duration_s = 2\n")
    rc = cli.main(["run", "--workload", "A", "--policy", "kvaccel",
                   "--seed", "3", "--config", str(cfg_file), "--out-dir", out])
    assert rc == 0
    tag = "A-kvaccel-eager-s3"
    for name in (f"{tag}-samples.csv", f"{tag}-report.json",
                 f"{tag}-timeseries.png", f"{tag}-utilization.png"):
        assert os.path.exists(os.path.join(out, name)), name
    report = json.load(open(os.path.join(out, f"{tag}-report.json")))
    assert report["workload"] == "A" and report["seed"] == 3
    assert "puts," in capsys.readouterr().out


def test_cli_compare_emits_the_summary_table(tmp_path, capsys):
    out = str(tmp_path / "out")
    cfg_file = tmp_path / "short.cfg"
    cfg_file.write_text("duration_s = 2\n")
    rc = cli.main(["compare", "--workload", "A", "--policy", "baseline-stall",
                   "--policy", "kvaccel", "--seed", "5",
                   "--config", str(cfg_file), "--out-dir", out])
    assert rc == 0
    compare_csv = os.path.join(out, "compare.csv")
    assert os.path.exists(compare_csv)
    assert os.path.exists(os.path.join(out, "compare.png"))
    lines = open(compare_csv).read().splitlines()
    assert lines[0] == "# schema: compare-v1"
    assert lines[1].startswith("workload,policy,")
    assert len(lines) == 4  # header comment + column row + two runs
    capsys.readouterr()


def test_cli_cdf_builds_the_distribution_from_a_samples_file(tmp_path, capsys):
    out = str(tmp_path / "out")
    cfg_file = tmp_path / "short.cfg"
    cfg_file.write_text("duration_s = 3\n")
    rc = cli.main(["run", "--workload", "A", "--policy", "baseline-stall",
                   "--seed", "3", "--config", str(cfg_file), "--out-dir", out])
    assert rc == 0
    samples_csv = os.path.join(out, "A-baseline-stall-eager-s3-samples.csv")
    rc = cli.main(["cdf", samples_csv, "--out-dir", out])
    assert rc == 0
    assert os.path.exists(os.path.join(out, "cdf.csv"))
    assert os.path.exists(os.path.join(out, "cdf.png"))
    rows = open(os.path.join(out, "cdf.csv")).read().splitlines()
    assert rows[0] == "# schema: cdf-v1"
    assert rows[1] == "utilization,cum_fraction"
    last = rows[-1].split(",")
    assert float(last[1]) == pytest.approx(1.0)
    capsys.readouterr()


def test_cli_cdf_fails_cleanly_without_stall_intervals(tmp_path, capsys):
    path = tmp_path / "calm.csv"
    sample = bench.MetricsSample(interval=0)
    bench.write_samples_csv([sample], str(path))
    rc = cli.main(["cdf", str(path), "--out-dir", str(tmp_path / "out")])
    assert rc == 1
    assert "no stall intervals" in capsys.readouterr().err
