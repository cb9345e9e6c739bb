import json

import numpy as np
import pytest

from innetsim.errors import ClockError, ConfigError, TraceOrderError, TraceParseError
from innetsim.trace_io import (FiveTuple, PacketRecord, Trace, TrafficSpec,
                               extract_feature, flow_five_tuple, flow_hash,
                               flow_hash_columns, format_ip, generate_synthetic,
                               load_trace, parse_ip, save_trace)


def _line(ts, length=100, label=0, src="10.0.0.1"):
    return json.dumps({
        "ts_ns": ts, "src_ip": src, "dst_ip": "192.168.0.1",
        "src_port": 1000, "dst_port": 443, "proto": 6,
        "len": length, "label": label,
    })


class TestLoadTrace:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "t.jsonl"
        p.write_text("")
        assert len(load_trace(p)) == 0

    def test_three_line_round_trip_bit_equal(self, tmp_path):
        p = tmp_path / "t.jsonl"
        rows = [(10, 64, 0), (20, 1500, 3), (20, 65535, None)]
        lines = []
        for ts, length, label in rows:
            lines.append(json.dumps({
                "ts_ns": ts, "src_ip": "10.1.2.3", "dst_ip": "4.5.6.7",
                "src_port": 65535, "dst_port": 0, "proto": 255,
                "len": length, "label": label,
            }))
        p.write_text("\n".join(lines) + "\n")
        trace = load_trace(p)
        assert len(trace) == 3
        for i, (ts, length, label) in enumerate(rows):
            rec = trace[i]
            assert rec.ts_ns == ts
            assert rec.length == length
            assert rec.label == label
            assert rec.five_tuple == FiveTuple(
                parse_ip("10.1.2.3"), parse_ip("4.5.6.7"), 65535, 0, 255)

    def test_timestamp_regression_names_line(self, tmp_path):
        p = tmp_path / "t.jsonl"
        p.write_text(_line(100) + "\n" + _line(50) + "\n")
        with pytest.raises(TraceOrderError) as exc:
            load_trace(p)
        assert exc.value.line_no == 2

    def test_malformed_line_names_line(self, tmp_path):
        p = tmp_path / "t.jsonl"
        p.write_text(_line(1) + "\n{not json\n")
        with pytest.raises(TraceParseError) as exc:
            load_trace(p)
        assert exc.value.line_no == 2

    @pytest.mark.parametrize("mutate", [
        lambda o: o.pop("len"),
        lambda o: o.update(extra=1),
        lambda o: o.update(len=0),
        lambda o: o.update(len=70000),
        lambda o: o.update(label="x"),
        lambda o: o.update(src_ip="1.2.3")
    ])
    def test_bad_fields_rejected(self, tmp_path, mutate):
        obj = json.loads(_line(5))
        mutate(obj)
        p = tmp_path / "t.jsonl"
        p.write_text(json.dumps(obj) + "\n")
        with pytest.raises(TraceParseError):
            load_trace(p)

    def test_save_load_round_trip(self, tmp_path):
        spec = TrafficSpec(num_flows=7, duration_ns=10_000_000, mean_rate_pps=2000,
                           seed=3)
        trace = generate_synthetic(spec)
        p = tmp_path / "t.jsonl"
        save_trace(p, trace)
        back = load_trace(p)
        assert len(back) == len(trace)
        for col in ("ts_ns", "src_ip", "dst_ip", "src_port", "dst_port",
                    "proto", "length", "label"):
            assert np.array_equal(getattr(back, col), getattr(trace, col))


class TestGenerateSynthetic:
    def test_same_seed_identical(self):
        spec = TrafficSpec(num_flows=20, duration_ns=50_000_000, mean_rate_pps=1000,
                           rate_dist="pareto", pareto_shape=3.0, arrival="poisson",
                           seed=42)
        a = generate_synthetic(spec)
        b = generate_synthetic(spec)
        for col in ("ts_ns", "src_ip", "length", "label"):
            assert np.array_equal(getattr(a, col), getattr(b, col))

    def test_distinct_flow_count(self):
        spec = TrafficSpec(num_flows=333, duration_ns=20_000_000, mean_rate_pps=2000,
                           seed=9)
        trace = generate_synthetic(spec)
        assert trace.distinct_flows() == 333

    def test_single_flow_even_spacing(self):
        spec = TrafficSpec(num_flows=1, duration_ns=100_000_000, mean_rate_pps=1000,
                           rate_dist="fixed", arrival="fixed", seed=0)
        trace = generate_synthetic(spec)
        gaps = np.diff(trace.ts_ns)
        assert len(set(gaps.tolist())) <= 2  # integer truncation wobble only
        assert abs(int(gaps[0]) - 1_000_000) <= 1

    def test_timestamps_sorted_and_bounded(self):
        spec = TrafficSpec(num_flows=50, duration_ns=30_000_000, mean_rate_pps=3000,
                           arrival="poisson", seed=7)
        trace = generate_synthetic(spec)
        assert np.all(np.diff(trace.ts_ns) >= 0)
        assert trace.ts_ns[-1] < spec.duration_ns

    def test_class_mix_exact(self):
        spec = TrafficSpec(num_flows=10, duration_ns=10_000_000, mean_rate_pps=1000,
                           class_mix=(0.5, 0.2, 0.2, 0.1), seed=5)
        trace = generate_synthetic(spec)
        labels = {}
        for i in range(len(trace)):
            labels[int(trace.src_ip[i])] = int(trace.label[i])
        counts = np.bincount(list(labels.values()), minlength=4)
        assert counts.tolist() == [5, 2, 2, 1]

    def test_lengths_inside_class_band(self):
        spec = TrafficSpec(num_flows=40, duration_ns=20_000_000, mean_rate_pps=2000,
                           seed=11)
        trace = generate_synthetic(spec)
        for i in range(len(trace)):
            lo, hi = spec.length_bands[int(trace.label[i])]
            assert lo <= int(trace.length[i]) < hi

    def test_ipd_sums_to_span(self):
        spec = TrafficSpec(num_flows=5, duration_ns=40_000_000, mean_rate_pps=1500,
                           arrival="poisson", seed=2)
        trace = generate_synthetic(spec)
        per_flow = {}
        for rec in trace:
            per_flow.setdefault(rec.five_tuple, []).append(rec)
        for recs in per_flow.values():
            prev = None
            total = 0
            for rec in recs:
                total += extract_feature(rec, prev).ipd_ns
                prev = rec.ts_ns
            assert total == recs[-1].ts_ns - recs[0].ts_ns

    @pytest.mark.parametrize("bad", [
        dict(num_flows=0),
        dict(duration_ns=0),
        dict(class_mix=(0.5, 0.5, 0.0, 0.1)),
        dict(rate_dist="weird"),
        dict(rate_dist="pareto", pareto_shape=1.0),
        dict(length_bands=((0, 10),) * 4),
    ])
    def test_bad_specs_rejected(self, bad):
        base = dict(num_flows=2, duration_ns=1_000_000, mean_rate_pps=1000)
        base.update(bad)
        with pytest.raises(ConfigError):
            generate_synthetic(TrafficSpec(**base))


class TestExtractFeature:
    def test_first_packet(self):
        pkt = PacketRecord(1000, flow_five_tuple(0), 64, 0)
        assert extract_feature(pkt, None).ipd_ns == 0

    def test_subtraction(self):
        pkt = PacketRecord(1000, flow_five_tuple(0), 64, 0)
        fv = extract_feature(pkt, 400)
        assert fv.ipd_ns == 600
        assert fv.pkt_len == 64

    def test_clock_error(self):
        pkt = PacketRecord(400, flow_five_tuple(0), 64, 0)
        with pytest.raises(ClockError):
            extract_feature(pkt, 1000)


class TestHashing:
    def test_vectorized_matches_scalar(self):
        spec = TrafficSpec(num_flows=64, duration_ns=5_000_000, mean_rate_pps=2000,
                           seed=8)
        trace = generate_synthetic(spec)
        h = flow_hash_columns(trace)
        for i in range(0, len(trace), 17):
            assert int(h[i]) == flow_hash(trace[i].five_tuple)

    def test_ip_round_trip(self):
        for text in ("0.0.0.0", "255.255.255.255", "10.1.2.3"):
            assert format_ip(parse_ip(text)) == text

    def test_counter_tuples_unique(self):
        tuples = {flow_five_tuple(i) for i in range(1000)}
        assert len(tuples) == 1000
