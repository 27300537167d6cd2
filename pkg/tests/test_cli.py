import csv
import os

import numpy as np
import pytest

from farmsim import fixture_path
from farmsim.cli import main
from farmsim.model import load_scenario
from farmsim.trace import RateProfile, TraceArrival, nhpp, save_trace


def tiny_scenario(tmp_path):
    """Small wide-open scenario so CLI runs stay fast."""
    path = tmp_path / "tiny.yaml"
    path.write_text(
        "name: tiny\n"
        "discipline: ps\n"
        "tie_break: lltb\n"
        "groups:\n"
        "- {id: 1, mu: 2.0, eps_busy: 2.0, eps_idle: 0.5, buffer: 2, base_count: 1}\n"
        "- {id: 2, mu: 1.5, eps_busy: 2.5, eps_idle: 0.5, buffer: 2, base_count: 1}\n"
        "job_types:\n"
        "- {id: 1, base_rate: 2.0, available_groups: [1, 2], size_dist: {kind: exp}}\n"
    )
    return path


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestGenerate:
    def test_writes_loadable_deterministic_config(self, tmp_path):
        out = tmp_path / "sc.yaml"
        rc = main(["generate", "--seed", "5", "--K", "4", "--J", "2",
                   "--mode", "multi_type", "--out", str(out)])
        assert rc == 0
        first = out.read_bytes()
        sc = load_scenario(out)
        assert len(sc.groups) == 4 and len(sc.job_types) == 2
        main(["generate", "--seed", "5", "--K", "4", "--J", "2",
              "--mode", "multi_type", "--out", str(out)])
        assert out.read_bytes() == first


class TestBenchmark:
    def test_case1_certified(self, tmp_path):
        rc = main(["benchmark", "--config", str(fixture_path("case1")),
                   "--out", str(tmp_path), "--method", "balance"])
        assert rc == 0
        rows = read_csv(tmp_path / "benchmark.csv")
        assert len(rows) == 1
        assert float(rows[0]["ee_opt"]) == pytest.approx(0.27609, abs=2e-5)
        assert rows[0]["certified"] == "True"

    def test_uncertified_scenario_flags_partial(self, tmp_path):
        light = tmp_path / "light.yaml"
        main(["generate", "--seed", "0", "--K", "5", "--J", "3", "--rho", "0.05",
              "--mode", "multi_type", "--out", str(light)])
        rc = main(["benchmark", "--config", str(light), "--out", str(tmp_path),
                   "--method", "balance"])
        assert rc == 2

    def test_missing_config_is_an_error(self, tmp_path):
        rc = main(["benchmark", "--config", str(tmp_path / "nope.yaml"),
                   "--out", str(tmp_path)])
        assert rc == 1


class TestSimulate:
    def test_cells_and_reproducibility(self, tmp_path):
        cfg = tiny_scenario(tmp_path)
        argv = ["simulate", "--config", str(cfg), "--h", "1,2", "--reps", "2",
                "--max-reps", "2", "--horizon", "60", "--seed", "3",
                "--out", str(tmp_path / "r1")]
        rc = main(argv)
        assert rc in (0, 2)
        rows = read_csv(tmp_path / "r1" / "simulate.csv")
        aggregates = [r for r in rows if r["row"] == "aggregate"]
        assert len(aggregates) == 2  # one per h
        reps = [r for r in rows if r["row"].startswith("rep")]
        assert len(reps) == 4
        for r in aggregates:
            assert float(r["EE"]) > 0
            assert r["deviation"] != ""
        main(argv[:-1] + [str(tmp_path / "r2")])
        a = (tmp_path / "r1" / "simulate.csv").read_bytes()
        b = (tmp_path / "r2" / "simulate.csv").read_bytes()
        assert a == b

    def test_worker_pool_does_not_change_results(self, tmp_path, monkeypatch):
        cfg = tiny_scenario(tmp_path)
        argv = ["simulate", "--config", str(cfg), "--h", "1,2", "--reps", "2",
                "--max-reps", "2", "--horizon", "40", "--seed", "1"]
        monkeypatch.setenv("FARMSIM_THREADS", "1")
        main(argv + ["--out", str(tmp_path / "serial")])
        monkeypatch.setenv("FARMSIM_THREADS", "2")
        main(argv + ["--out", str(tmp_path / "pooled")])
        assert (tmp_path / "serial" / "simulate.csv").read_bytes() == (
            tmp_path / "pooled" / "simulate.csv"
        ).read_bytes()


class TestSweep:
    def test_columns_and_log_deviation(self, tmp_path):
        cfg = tiny_scenario(tmp_path)
        rc = main(["sweep-h", "--config", str(cfg), "--h", "1,3", "--reps", "2",
                   "--max-reps", "2", "--horizon", "120", "--seed", "7",
                   "--out", str(tmp_path)])
        assert rc in (0, 2)
        rows = read_csv(tmp_path / "sweep_h.csv")
        assert [r["h"] for r in rows] == ["1", "3"]
        for r in rows:
            dev = float(r["deviation"])
            if dev > 0:
                assert float(r["log10_deviation"]) == pytest.approx(np.log10(dev))


class TestTrace:
    def test_hourly_case_study(self, tmp_path):
        cfg = tiny_scenario(tmp_path)
        profile = RateProfile(rates={1: [1.0, 2.0]}, bucket=3600.0)
        events = nhpp(profile, np.random.default_rng(2))
        trace_path = tmp_path / "trace.csv"
        save_trace([TraceArrival(t, tid) for t, tid in events], trace_path)
        rc = main(["trace", "--config", str(cfg), "--trace", str(trace_path),
                   "--policy", "pas,jsq", "--discipline", "ps", "--seed", "4",
                   "--out", str(tmp_path)])
        assert rc == 0
        rows = read_csv(tmp_path / "trace_study.csv")
        assert {r["policy"] for r in rows} == {"pas", "jsq"}
        assert {r["hour"] for r in rows} == {"0", "1"}
        for r in rows:
            assert int(r["arrivals"]) > 0

    def test_bad_trace_row_is_an_error(self, tmp_path):
        cfg = tiny_scenario(tmp_path)
        trace_path = tmp_path / "trace.csv"
        trace_path.write_text("timestamp_s,type_id\n1.0,7\n")
        rc = main(["trace", "--config", str(cfg), "--trace", str(trace_path),
                   "--out", str(tmp_path)])
        assert rc == 1
