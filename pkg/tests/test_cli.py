import csv
import json

import numpy as np
import pytest

from innetsim.cli import main
from innetsim.models import reference_cnn
from innetsim.quantizer import read_model, save_float_model
from innetsim.sim_core import SimConfig
from innetsim.trace_io import TrafficSpec, generate_synthetic, save_trace


@pytest.fixture
def workdir(tmp_path):
    spec = TrafficSpec(num_flows=12, duration_ns=80_000_000, mean_rate_pps=800,
                       arrival="poisson", seed=5)
    trace = generate_synthetic(spec)
    trace_path = tmp_path / "trace.jsonl"
    save_trace(trace_path, trace)
    cfg = SimConfig(engine_rate_hz=5_000.0, channel_bps=1e9,
                    window_ns=40_000_000, seed=1)
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(cfg.to_json_obj()))
    return tmp_path, str(cfg_path), str(trace_path)


class TestRunCommand:
    def test_happy_path_writes_metrics(self, workdir):
        tmp, cfg, trace = workdir
        out = tmp / "metrics.json"
        assert main(["run", "--config", cfg, "--trace", trace, "--out", str(out)]) == 0
        data = json.loads(out.read_text())
        assert data["packets"] > 0
        assert "macro_f1" in data["packet_level"]

    def test_identical_reruns_byte_identical(self, workdir):
        tmp, cfg, trace = workdir
        a, b = tmp / "a.json", tmp / "b.json"
        assert main(["run", "--config", cfg, "--trace", trace, "--out", str(a)]) == 0
        assert main(["run", "--config", cfg, "--trace", trace, "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_seed_flag_changes_output(self, workdir):
        tmp, cfg, trace = workdir
        a, b = tmp / "a.json", tmp / "b.json"
        main(["run", "--config", cfg, "--trace", trace, "--out", str(a), "--seed", "1"])
        main(["run", "--config", cfg, "--trace", trace, "--out", str(b), "--seed", "2"])
        assert json.loads(a.read_text())["seed"] == 1
        assert json.loads(b.read_text())["seed"] == 2

    def test_missing_trace_exits_2_no_partial_output(self, workdir, capsys):
        tmp, cfg, _ = workdir
        out = tmp / "metrics.json"
        code = main(["run", "--config", cfg, "--trace", str(tmp / "nope.jsonl"),
                     "--out", str(out)])
        assert code == 2
        assert not out.exists()
        assert "error:" in capsys.readouterr().err

    def test_mode_flag(self, workdir):
        tmp, cfg, trace = workdir
        out = tmp / "m.json"
        main(["run", "--config", cfg, "--trace", trace, "--out", str(out),
              "--mode", "control-plane"])
        assert json.loads(out.read_text())["mode"] == "control-plane"


class TestUsageErrors:
    def test_unknown_flag_exits_1(self, workdir, capsys):
        tmp, cfg, trace = workdir
        assert main(["run", "--config", cfg, "--trace", trace, "--wat", "x"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_missing_subcommand_exits_1(self, capsys):
        assert main([]) == 1

    def test_bad_mode_value_exits_1(self, workdir, capsys):
        tmp, cfg, trace = workdir
        code = main(["run", "--config", cfg, "--trace", trace,
                     "--out", str(tmp / "m.json"), "--mode", "warp"])
        assert code == 1


class TestGenTrace:
    def test_generates_loadable_trace(self, tmp_path):
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps({
            "num_flows": 9, "duration_ns": 20_000_000, "mean_rate_pps": 1000,
            "seed": 7,
        }))
        out = tmp_path / "t.jsonl"
        assert main(["gen-trace", "--config", str(spec_path), "--out", str(out)]) == 0
        from innetsim.trace_io import load_trace
        trace = load_trace(out)
        assert trace.distinct_flows() == 9

    def test_seed_override_deterministic(self, tmp_path):
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps({
            "num_flows": 4, "duration_ns": 10_000_000, "mean_rate_pps": 500,
        }))
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        main(["gen-trace", "--config", str(spec_path), "--out", str(a), "--seed", "3"])
        main(["gen-trace", "--config", str(spec_path), "--out", str(b), "--seed", "3"])
        assert a.read_bytes() == b.read_bytes()


class TestQuantize:
    def test_round_trip(self, tmp_path):
        fm, _ = reference_cnn()
        model_path = tmp_path / "float.json"
        save_float_model(model_path, fm)
        calib = tmp_path / "calib.jsonl"
        spec = TrafficSpec(num_flows=8, duration_ns=40_000_000, mean_rate_pps=500,
                           seed=2)
        save_trace(calib, generate_synthetic(spec))
        out = tmp_path / "model.fxqm"
        assert main(["quantize", "--model", str(model_path), "--calib", str(calib),
                     "--out", str(out)]) == 0
        qm = read_model(out)
        assert qm.seq_len == fm.seq_len
        assert [l.kind for l in qm.layers] == [l.kind for l in fm.layers]

    def test_bad_model_file_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{}")
        calib = tmp_path / "calib.jsonl"
        calib.write_text("")
        assert main(["quantize", "--model", str(bad), "--calib", str(calib),
                     "--out", str(tmp_path / "o.fxqm")]) == 2


class TestTableDump:
    def test_csv_matches_builder(self, tmp_path):
        from innetsim.rate_limiter import RateParams, build_probability_table
        cfg = SimConfig(engine_rate_hz=2000.0, channel_bps=1e9,
                        rate_override=(50.0, 20000.0))
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps(cfg.to_json_obj()))
        out = tmp_path / "table.csv"
        assert main(["table-dump", "--config", str(cfg_path), "--out", str(out)]) == 0
        rows = list(csv.DictReader(out.read_text().splitlines()))
        assert len(rows) == cfg.table.t_bins * cfg.table.c_bins
        params = RateParams.from_inputs(cfg.engine_rate_hz, cfg.channel_bps,
                                        cfg.effective_msg_bits, 50.0, 20000.0)
        t_max = cfg.table.t_max_scale * params.flow_count / params.token_rate
        c_max = max(1.0, cfg.table.c_max_scale * (params.packet_rate / params.flow_count)
                    * (cfg.window_ns * 1e-9))
        tbl = build_probability_table(params, cfg.table.t_bins, cfg.table.c_bins,
                                      t_max, c_max)
        got = float(rows[5]["probability"])
        assert got == float(tbl.cells[0, 5])

    def test_requires_rate_override(self, tmp_path, capsys):
        cfg = SimConfig()
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps(cfg.to_json_obj()))
        assert main(["table-dump", "--config", str(cfg_path),
                     "--out", str(tmp_path / "t.csv")]) == 2


class TestReport:
    def test_renders_tables(self, workdir, capsys):
        tmp, cfg, trace = workdir
        metrics = tmp / "m.json"
        main(["run", "--config", cfg, "--trace", trace, "--out", str(metrics)])
        out = tmp / "report.txt"
        assert main(["report", "--metrics", str(metrics), "--out", str(out)]) == 0
        text = out.read_text()
        assert "macro-F1" in text and "latency breakdown" in text

    def test_stdout_default(self, workdir, capsys):
        tmp, cfg, trace = workdir
        metrics = tmp / "m.json"
        main(["run", "--config", cfg, "--trace", trace, "--out", str(metrics)])
        assert main(["report", "--metrics", str(metrics)]) == 0
        assert "packet-level macro-F1" in capsys.readouterr().out

    def test_csv_tables(self, workdir):
        tmp, cfg, trace = workdir
        metrics = tmp / "m.json"
        main(["run", "--config", cfg, "--trace", trace, "--out", str(metrics)])
        out = tmp / "tables.csv"
        assert main(["report", "--metrics", str(metrics), "--out", str(out)]) == 0
        rows = list(csv.DictReader(out.read_text().splitlines()))
        data = json.loads(metrics.read_text())
        lat = {(r["key"], r["metric"]): r["value"] for r in rows
               if r["table"] == "latency"}
        assert float(lat[("total", "mean_ns")]) == pytest.approx(
            data["latency"]["total"]["mean_ns"])
        classes = [r for r in rows if r["table"] == "packet_level" and r["key"] != "all"]
        assert len(classes) == 4 * len(data["packet_level"]["per_class"])
