"""Operator entry point.

Subcommands: run (replay a trace), gen-trace (synthesize traffic), quantize
(float JSON -> INT8 binary), table-dump (probability grid as CSV), report
(render a metrics file). Exit codes: 0 success, 1 usage error, 2 input or
validation error. Output files are written atomically (temp file + rename)
so a failed run never leaves partial artifacts.
"""

from __future__ import annotations

import argparse
import io
import json
import os
import sys
import tempfile

from .errors import SimError
from .sim_core import Metrics, SimConfig, latency_breakdown, run
from .trace_io import TrafficSpec, generate_synthetic, load_trace, save_trace

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _atomic_write(path: str, data: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _build_parser() -> _Parser:
    parser = _Parser(prog="innetsim")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="replay a trace through the pipeline")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--trace", required=True)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--mode", choices=["fenix", "control-plane"], default=None)
    p_run.add_argument("--model", default=None)
    p_run.add_argument("--tree", default=None)

    p_gen = sub.add_parser("gen-trace", help="generate synthetic traffic")
    p_gen.add_argument("--config", required=True, help="TrafficSpec JSON file")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--seed", type=int, default=None)

    p_q = sub.add_parser("quantize", help="convert a float model to INT8")
    p_q.add_argument("--model", required=True, help="float model JSON")
    p_q.add_argument("--calib", required=True, help="calibration trace (JSON lines)")
    p_q.add_argument("--out", required=True)

    p_t = sub.add_parser("table-dump", help="emit the probability table as CSV")
    p_t.add_argument("--config", required=True)
    p_t.add_argument("--out", required=True)

    p_r = sub.add_parser("report", help="render a metrics file as text tables")
    p_r.add_argument("--metrics", required=True)
    p_r.add_argument("--out", default=None, help="default: stdout")
    return parser


def _cmd_run(args) -> int:
    config = SimConfig.load(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.mode is not None:
        config.mode = args.mode
    if args.model is not None:
        config.model_path = args.model
    if args.tree is not None:
        config.tree_path = args.tree
    trace = load_trace(args.trace)
    metrics = run(config, trace)
    _atomic_write(args.out, metrics.to_json())
    return EXIT_OK


def _atomic_write_via(path: str, writer) -> None:
    """Write through `writer(tmp_path)`, then rename into place."""
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)),
                               prefix=".tmp-")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _cmd_gen_trace(args) -> int:
    with open(args.config, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if "length_bands" in obj:
        obj["length_bands"] = [tuple(b) for b in obj["length_bands"]]
    if "class_mix" in obj:
        obj["class_mix"] = tuple(obj["class_mix"])
    spec = TrafficSpec(**obj)
    if args.seed is not None:
        spec.seed = args.seed
    trace = generate_synthetic(spec)
    _atomic_write_via(args.out, lambda tmp: save_trace(tmp, trace))
    return EXIT_OK


def _cmd_quantize(args) -> int:
    from .buffer_manager import ipd_log_bucket
    from .inference_engine import encode_sequence
    from .quantizer import load_float_model, quantize_model, write_model
    from .trace_io import flow_hash_columns

    fm = load_float_model(args.model)
    calib_trace = load_trace(args.calib)
    if len(calib_trace) == 0:
        raise SimError("calibration trace is empty")
    # per-flow feature sequences from the calibration trace
    h = flow_hash_columns(calib_trace)
    seqs: dict = {}
    last_ts: dict = {}
    for i in range(len(calib_trace)):
        key = int(h[i])
        ts = int(calib_trace.ts_ns[i])
        ipd = ts - last_ts[key] if key in last_ts else 0
        last_ts[key] = ts
        seqs.setdefault(key, []).append(
            (int(calib_trace.length[i]), ipd_log_bucket(ipd))
        )
    calib = [encode_sequence(feats[: fm.seq_len], fm.encoding, fm.seq_len)
             for feats in seqs.values()]
    qm = quantize_model(fm, calib)
    _atomic_write_via(args.out, lambda tmp: write_model(tmp, qm))
    return EXIT_OK


def _cmd_table_dump(args) -> int:
    from .rate_limiter import RateParams, build_probability_table

    config = SimConfig.load(args.config)
    if config.rate_override is None:
        raise SimError(
            "table-dump needs rate_override in the config to fix (N, Q)"
        )
    n, q = config.rate_override
    params = RateParams.from_inputs(config.engine_rate_hz, config.channel_bps,
                                    config.effective_msg_bits, n, q)
    t_max = config.table.t_max_scale * params.flow_count / params.token_rate
    c_max = max(1.0, config.table.c_max_scale
                * (params.packet_rate / params.flow_count)
                * (config.window_ns * 1e-9))
    table = build_probability_table(params, config.table.t_bins,
                                    config.table.c_bins, t_max, c_max)
    buf = io.StringIO()
    table.to_csv(buf)
    _atomic_write(args.out, buf.getvalue())
    return EXIT_OK


def _render_report(data: dict) -> str:
    lines = []
    lines.append(f"mode: {data['mode']}   seed: {data['seed']}   backend: {data.get('backend', '?')}")
    lines.append(
        f"packets: {data['packets']}   grants: {data['grants']}"
        f" ({100.0 * data['grant_fraction']:.3f}%)   drops: {data['drops']}"
    )
    lines.append(
        f"responses applied/stale: {data['responses_applied']}/{data['responses_stale']}"
    )
    lines.append("")
    lines.append(f"packet-level macro-F1: {data['packet_level']['macro_f1']:.4f}")
    lines.append(f"flow-level macro-F1:   {data['flow_level']['macro_f1']:.4f}")
    lines.append("")
    lines.append("per-class (packet level):")
    lines.append("  cls  precision  recall     f1        support")
    for row in data["packet_level"]["per_class"]:
        lines.append(
            f"  {row['cls']:>3}  {row['precision']:.4f}     {row['recall']:.4f}"
            f"     {row['f1']:.4f}    {row['support']}"
        )
    lines.append("")
    lines.append("latency breakdown:")
    lines.append("  phase          mean_ns        p99_ns")
    for row in latency_breakdown(Metrics(data=data)):
        lines.append(
            f"  {row['phase']:<13}  {row['mean_ns']:>12.1f}  {row['p99_ns']:>12.1f}"
        )
    if data["windows"]:
        lines.append("")
        lines.append("windows (start_ns, flows, pps):")
        for w in data["windows"][:20]:
            lines.append(
                f"  {w['start_ns']:>14}  {w['flow_count']:>8}  {w['packet_rate_pps']:>14.1f}"
            )
        if len(data["windows"]) > 20:
            lines.append(f"  ... {len(data['windows']) - 20} more")
    return "\n".join(lines) + "\n"


def _render_csv(data: dict) -> str:
    """Long-form CSV for plotting: per-phase latency, per-class scores,
    window series."""
    import csv as _csv

    buf = io.StringIO()
    writer = _csv.writer(buf)
    writer.writerow(["table", "key", "metric", "value"])
    for phase in ("transmission", "queueing", "inference", "total"):
        stats = data["latency"][phase]
        for metric in ("count", "mean_ns", "p99_ns", "min_ns", "max_ns"):
            writer.writerow(["latency", phase, metric, stats[metric]])
    for level in ("packet_level", "flow_level"):
        writer.writerow([level, "all", "macro_f1", data[level]["macro_f1"]])
        for row in data[level]["per_class"]:
            for metric in ("precision", "recall", "f1", "support"):
                writer.writerow([level, row["cls"], metric, row[metric]])
    for w in data["windows"]:
        writer.writerow(["windows", w["start_ns"], "flow_count", w["flow_count"]])
        writer.writerow(["windows", w["start_ns"], "packet_rate_pps",
                         w["packet_rate_pps"]])
    return buf.getvalue()


def _cmd_report(args) -> int:
    with open(args.metrics, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if args.out is not None and args.out.endswith(".csv"):
        _atomic_write(args.out, _render_csv(data))
        return EXIT_OK
    text = _render_report(data)
    if args.out is None:
        sys.stdout.write(text)
    else:
        _atomic_write(args.out, text)
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "gen-trace": _cmd_gen_trace,
    "quantize": _cmd_quantize,
    "table-dump": _cmd_table_dump,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except (SimError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
