import numpy as np
import pytest

from farmsim.trace import (
    RateProfile,
    TraceArrival,
    TraceFormatError,
    diurnal_profile,
    hourly_rates,
    nhpp,
    parse_trace,
    replay,
    save_profile,
    save_trace,
)


def write_trace(path, rows, header=True):
    lines = (["timestamp_s,type_id"] if header else []) + rows
    path.write_text("\n".join(lines) + "\n")


class TestParse:
    def test_rows_are_sorted(self, tmp_path):
        p = tmp_path / "t.csv"
        write_trace(p, ["10.0,1", "3.5,2", "7.25,1"])
        arrivals = parse_trace(p)
        assert [a.timestamp for a in arrivals] == [3.5, 7.25, 10.0]

    def test_unknown_type_id_reports_line(self, tmp_path):
        p = tmp_path / "t.csv"
        write_trace(p, ["1.0,1", "2.0,9"])
        with pytest.raises(TraceFormatError, match="line 3"):
            parse_trace(p, valid_type_ids={1, 2, 3, 4})

    def test_empty_file_gives_zero_profile(self, tmp_path):
        p = tmp_path / "t.csv"
        write_trace(p, [])
        arrivals = parse_trace(p)
        assert arrivals == []
        assert hourly_rates(arrivals).rates == {}

    def test_malformed_rows_skipped_and_reported(self, tmp_path, caplog):
        p = tmp_path / "t.csv"
        write_trace(p, ["1.0,1", "oops,1", "2.0", "-3.0,1", "4.0,2"])
        with caplog.at_level("WARNING"):
            arrivals = parse_trace(p)
        assert len(arrivals) == 2
        assert "3 malformed" in caplog.text

    def test_missing_file(self, tmp_path):
        with pytest.raises(TraceFormatError):
            parse_trace(tmp_path / "absent.csv")


class TestRates:
    def test_uniform_hour_counts(self):
        arrivals = [TraceArrival(3600.0 + i * 0.5, 1) for i in range(7200)]
        profile = hourly_rates(arrivals, horizon=2 * 3600.0)
        assert profile.rates[1][0] == 0.0
        assert profile.rates[1][1] == pytest.approx(2.0)

    def test_replay_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        arrivals = [
            TraceArrival(float(ts), int(tid))
            for ts, tid in zip(rng.uniform(0, 7200, 500), rng.integers(1, 4, 500))
        ]
        stream = replay(arrivals)
        back = [TraceArrival(t, tid) for t, tid in stream]
        a = hourly_rates(sorted(arrivals), horizon=7200.0)
        b = hourly_rates(back, horizon=7200.0)
        assert a == b

    def test_rate_lookup_outside_profile_is_zero(self):
        profile = RateProfile(rates={1: [2.0]}, bucket=3600.0)
        assert profile.rate(1, 10.0) == 2.0
        assert profile.rate(1, 7200.0) == 0.0
        assert profile.rate(9, 10.0) == 0.0


class TestNhpp:
    def test_bucket_counts_concentrate(self):
        profile = RateProfile(rates={1: [2.0, 0.5]}, bucket=3600.0)
        counts_first = []
        for seed in range(8):
            events = nhpp(profile, np.random.default_rng(seed))
            counts_first.append(sum(1 for t, _ in events if t < 3600.0))
        assert np.mean(counts_first) == pytest.approx(7200, rel=0.03)

    def test_respects_bucket_boundaries(self):
        profile = RateProfile(rates={1: [0.0, 1.0, 0.0]}, bucket=3600.0)
        events = nhpp(profile, np.random.default_rng(3))
        assert all(3600.0 <= t < 7200.0 for t, _ in events)

    def test_round_trip_profile(self):
        profile = RateProfile(rates={1: [1.0] * 4, 2: [0.25] * 4}, bucket=3600.0)
        events = nhpp(profile, np.random.default_rng(11))
        arrivals = [TraceArrival(t, tid) for t, tid in events]
        est = hourly_rates(arrivals, horizon=4 * 3600.0)
        for tid, series in profile.rates.items():
            assert np.allclose(est.rates[tid], series, rtol=0.2, atol=0.02)


class TestIO:
    def test_profile_csv(self, tmp_path):
        profile = RateProfile(rates={2: [0.5, 1.5]}, bucket=3600.0)
        out = tmp_path / "profile.csv"
        save_profile(profile, out)
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "type_id,hour_index,rate_per_s"
        assert lines[1] == "2,0,0.5"

    def test_trace_save_parse_round_trip(self, tmp_path):
        arrivals = [TraceArrival(1.5, 1), TraceArrival(0.25, 2)]
        out = tmp_path / "trace.csv"
        save_trace(arrivals, out)
        assert parse_trace(out) == sorted(arrivals)


class TestDiurnalProfile:
    def test_plateau_and_ramps(self):
        profile = diurnal_profile(
            base={1: 0.1}, peak={1: 1.0}, peak_hours=range(9, 15), hours=24, ramp=2
        )
        series = profile.rates[1]
        assert len(series) == 24
        assert series[0] == pytest.approx(0.1)
        assert all(series[h] == pytest.approx(1.0) for h in range(9, 15))
        assert 0.1 < series[8] < 1.0 and 0.1 < series[15] < 1.0
        assert series[23] == pytest.approx(0.1)
