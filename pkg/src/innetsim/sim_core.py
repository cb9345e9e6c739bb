"""Deterministic discrete-event loop wiring the whole pipeline.

Packets drive the switch-side dataplane kernel (flow table, fallback tree,
probability lookup, token bucket, feature rings). Each grant assembles a
mirrored feature sequence that crosses a latency-modeled channel into the
bounded engine queues, is inferred in issue order, and returns as a
(flow id, class) response that updates the flow table.

Time is integer nanoseconds throughout. The event heap orders by
(timestamp, sequence number); at equal timestamps engine events precede
packet processing, so a result arriving at time t is visible to a packet at
t. Everything — including the single uniform draw per packet — comes from
one seeded generator, so a run is a pure function of (config, trace).
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field, asdict
from typing import List, Optional, Tuple

import numpy as np

from . import kernels
from .buffer_manager import FeatureStore, mirror_width_bits
from .errors import ConfigError, DomainError
from .flow_tracker import DecisionTree, FlowTable, WindowStats
from .inference_engine import latency_model
from .kernels.pyref import PROB_EXACT, PROB_FORCE_ONE, PROB_TABLE, REASON_GRANT
from .quantizer import read_model
from .rate_limiter import (RateParams, TokenBucket, build_probability_table,
                           compute_rate)
from .trace_io import Trace, flow_hash_columns, format_ip
from .vector_io import InferenceRequest, IoState

_FAR_FUTURE = 1 << 62

# event kinds, in tie-break-irrelevant order (heap also carries a sequence)
_EV_ARRIVE = 0
_EV_WAKE = 1
_EV_DONE = 2
_EV_RETURN = 3

LATENCY_HIST_EDGES_NS = [0] + [10**k for k in range(2, 10)]


@dataclass
class LatencyParams:
    chan_to_engine_ns: int = 1000
    chan_return_ns: int = 1000
    inference_ns: Optional[int] = None  # None: use the systolic-array model
    model_clock_hz: float = 300e6
    array_width: int = 16
    pipeline_cycles: int = 29
    control_plane_tx_ns: int = 2_100_000
    control_plane_infer_ns: int = 1_500_000


@dataclass
class TableParams:
    t_bins: int = 64
    c_bins: int = 64
    t_max_scale: float = 8.0  # t_max = scale * N/V
    c_max_scale: float = 8.0  # c_max = scale * (Q/N) * window seconds


@dataclass
class SimConfig:
    window_ns: int = 100_000_000
    ring_size: int = 8
    hash_bits: int = 16
    engine_rate_hz: float = 75e6  # inference issue rate (F)
    channel_bps: float = 100e9  # switch-to-engine bandwidth (B)
    msg_bits: Optional[float] = None  # feature message width (W); None: derive
    queue_depth: int = 64
    bucket_cap: Optional[float] = None  # None: queue_depth (burst <= queue)
    bucket_cost: float = 1.0
    bucket_initial: float = 0.0
    prob_source: str = "table"  # table | exact
    table: TableParams = field(default_factory=TableParams)
    rate_override: Optional[Tuple[float, float]] = None  # fixed (N, Q)
    latency: LatencyParams = field(default_factory=LatencyParams)
    mode: str = "fenix"  # fenix | control-plane
    seed: int = 0
    model_path: Optional[str] = None  # None: reference CNN; "none": no engine
    tree_path: Optional[str] = None  # None: built-in fallback tree

    def validate(self) -> None:
        if self.window_ns <= 0:
            raise ConfigError("window_ns must be > 0")
        if self.mode not in ("fenix", "control-plane"):
            raise ConfigError(f"mode must be fenix|control-plane, got {self.mode!r}")
        if self.prob_source not in ("table", "exact"):
            raise ConfigError(f"prob_source must be table|exact, got {self.prob_source!r}")
        if self.queue_depth < 1:
            raise ConfigError("queue_depth must be >= 1")
        lat = self.latency
        for name in ("chan_to_engine_ns", "chan_return_ns",
                     "control_plane_tx_ns", "control_plane_infer_ns"):
            if getattr(lat, name) < 0:
                raise ConfigError(f"latency.{name} must be >= 0")
        if lat.inference_ns is not None and lat.inference_ns < 0:
            raise ConfigError("latency.inference_ns must be >= 0")
        if self.rate_override is not None:
            n, q = self.rate_override
            if n < 1 or q <= 0:
                raise ConfigError("rate_override needs N >= 1 and Q > 0")

    @property
    def effective_msg_bits(self) -> float:
        if self.msg_bits is not None:
            return self.msg_bits
        return float(mirror_width_bits(self.ring_size + 1))

    @property
    def token_rate(self) -> float:
        return compute_rate(self.engine_rate_hz, self.channel_bps, self.effective_msg_bits)

    def to_json_obj(self) -> dict:
        obj = asdict(self)
        if obj["rate_override"] is not None:
            obj["rate_override"] = list(obj["rate_override"])
        return obj

    @classmethod
    def from_json_obj(cls, obj: dict) -> "SimConfig":
        obj = dict(obj)
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "table" in obj and isinstance(obj["table"], dict):
            obj["table"] = TableParams(**obj["table"])
        if "latency" in obj and isinstance(obj["latency"], dict):
            obj["latency"] = LatencyParams(**obj["latency"])
        if obj.get("rate_override") is not None:
            n, q = obj["rate_override"]
            obj["rate_override"] = (float(n), float(q))
        cfg = cls(**obj)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "SimConfig":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"bad config JSON: {exc}") from exc
        return cls.from_json_obj(obj)


class Dataplane:
    """State bundle the kernels walk; arrays are allocated exactly once."""

    def __init__(self, table: FlowTable, store: FeatureStore,
                 tree: DecisionTree, bucket: TokenBucket):
        self.table = table
        self.store = store
        self.tree = tree
        self.bucket = bucket


# -- metrics ------------------------------------------------------------------


@dataclass
class Metrics:
    """Run results; `data` is the canonical JSON-stable form."""

    data: dict

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=1) + "\n"

    @property
    def packet_macro_f1(self) -> float:
        return self.data["packet_level"]["macro_f1"]

    @property
    def flow_macro_f1(self) -> float:
        return self.data["flow_level"]["macro_f1"]

    @property
    def grant_fraction(self) -> float:
        return self.data["grant_fraction"]


def compute_macro_f1(preds, labels, num_classes: int) -> float:
    """Unweighted mean F1 over classes; a class absent from both predictions
    and labels is excluded; 0/0 inside a class counts as 0."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise DomainError("preds and labels must have equal length")
    if preds.size == 0:
        raise DomainError("cannot score an empty prediction set")
    scores = []
    for c in range(num_classes):
        tp = int(np.sum((preds == c) & (labels == c)))
        fp = int(np.sum((preds == c) & (labels != c)))
        fn = int(np.sum((preds != c) & (labels == c)))
        if tp + fp + fn == 0:
            continue
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        scores.append(f1)
    return float(np.mean(scores)) if scores else 0.0


def _per_class_stats(preds, labels, num_classes: int) -> List[dict]:
    out = []
    for c in range(num_classes):
        tp = int(np.sum((preds == c) & (labels == c)))
        fp = int(np.sum((preds == c) & (labels != c)))
        fn = int(np.sum((preds != c) & (labels == c)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        out.append({
            "cls": c,
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "support": tp + fn,
        })
    return out


def flow_majority_vote(preds_by_flow) -> List[int]:
    """Modal class per flow; ties break toward the lowest class index."""
    out = []
    for preds in preds_by_flow:
        arr = np.asarray(preds)
        if arr.size == 0:
            raise DomainError("flow with no predictions")
        out.append(int(np.bincount(arr).argmax()))
    return out


def _phase_stats(samples: np.ndarray) -> dict:
    if samples.size == 0:
        return {"count": 0, "mean_ns": 0.0, "p99_ns": 0.0, "min_ns": 0,
                "max_ns": 0, "hist": [0] * (len(LATENCY_HIST_EDGES_NS) - 1)}
    hist, _ = np.histogram(samples, bins=LATENCY_HIST_EDGES_NS)
    return {
        "count": int(samples.size),
        "mean_ns": float(samples.mean()),
        "p99_ns": float(np.percentile(samples, 99)),
        "min_ns": int(samples.min()),
        "max_ns": int(samples.max()),
        "hist": [int(x) for x in hist],
    }


def latency_breakdown(metrics: Metrics) -> List[dict]:
    """Per-phase rows {phase, mean_ns, p99_ns}; empty without samples."""
    lat = metrics.data["latency"]
    rows = []
    for phase in ("transmission", "queueing", "inference", "total"):
        stats = lat[phase]
        if stats["count"] == 0:
            continue
        rows.append({"phase": phase, "mean_ns": stats["mean_ns"],
                     "p99_ns": stats["p99_ns"]})
    return rows


# -- the simulator -----------------------------------------------------------


@dataclass
class _GrantState:
    """Per-grant bookkeeping riding through the engine."""

    slot: int
    tag: int
    grant_ts: int
    arrive_ts: int = 0
    start_ts: int = 0
    flow_row: int = 0  # trace row of the granting packet


class _Engine:
    """Issue-rate-limited, pipelined inference service behind IoState."""

    def __init__(self, io: IoState, infer_fn, issue_interval_ns: int,
                 inference_ns: int, chan_return_ns: int):
        self.io = io
        self.infer_fn = infer_fn
        self.issue_interval_ns = issue_interval_ns
        self.inference_ns = inference_ns
        self.chan_return_ns = chan_return_ns
        self.free_at = 0
        self.wake_pending = False

    def try_start(self, now: int, schedule) -> None:
        if self.free_at > now:
            if not self.wake_pending:
                self.wake_pending = True
                schedule(self.free_at, _EV_WAKE, None)
            return
        req = self.io.start_inference()
        if req is None:
            return
        meta: _GrantState = req.meta
        meta.start_ts = now
        cls = self.infer_fn(req.features)
        self.free_at = now + self.issue_interval_ns
        schedule(now + self.inference_ns, _EV_DONE, (req, cls))
        if self.io.input_fifo and not self.wake_pending:
            self.wake_pending = True
            schedule(self.free_at, _EV_WAKE, None)


def _load_model(config: SimConfig):
    if config.model_path == "none":
        return None
    if config.model_path is None:
        from .models import reference_cnn

        return reference_cnn()[1]
    return read_model(config.model_path)


def _load_tree(config: SimConfig) -> DecisionTree:
    if config.tree_path is None:
        from .models import default_tree

        return default_tree()
    return DecisionTree.load(config.tree_path)


def run(config: SimConfig, trace: Trace, backend: Optional[str] = None) -> Metrics:
    """Replay a trace through the full pipeline; deterministic for a fixed
    (config, trace, seed). `backend` pins a kernel backend ('py'/'ext');
    both produce bit-identical results."""
    config.validate()
    model = _load_model(config)
    tree = _load_tree(config)
    num_classes = model.num_classes if model is not None else int(tree.leaves.max()) + 1
    if int(tree.leaves.max()) >= num_classes:
        raise ConfigError("fallback tree predicts classes outside the model range")

    token_rate = config.token_rate
    cap = float(config.queue_depth if config.bucket_cap is None else config.bucket_cap)
    n = len(trace)

    table = FlowTable(config.hash_bits, config.ring_size, config.window_ns, start_ns=0)
    store = FeatureStore(table.slots, config.ring_size)
    bucket = TokenBucket(token_rate, cap, config.bucket_cost, config.bucket_initial)
    plane = Dataplane(table, store, tree, bucket)
    if backend is None:
        kernel = kernels.make_kernel(plane)
    else:
        kernel = kernels.make_kernel_on(backend, plane)

    hashes = flow_hash_columns(trace)
    slot_arr = (hashes & np.uint64(table.slots - 1)).astype(np.int64)
    tag_arr = (hashes >> np.uint64(config.hash_bits)).astype(np.uint64)

    rng = np.random.default_rng(config.seed)
    uniforms = rng.random(n)
    pred = np.full(n, -1, dtype=np.int16)
    src = np.zeros(n, dtype=np.uint8)
    granted = np.zeros(n, dtype=np.uint8)
    kernel.set_run_buffers(trace.ts_ns, slot_arr, tag_arr, trace.length,
                           uniforms, pred, src, granted)

    # latency constants per mode
    lat = config.latency
    if config.mode == "control-plane":
        chan_to = lat.control_plane_tx_ns // 2
        chan_return = lat.control_plane_tx_ns - chan_to
        inference_ns = lat.control_plane_infer_ns
        issue_interval = lat.control_plane_infer_ns  # serial software inference
    else:
        chan_to = lat.chan_to_engine_ns
        chan_return = lat.chan_return_ns
        if lat.inference_ns is not None:
            inference_ns = lat.inference_ns
        elif model is not None:
            inference_ns = int(round(latency_model(
                model, lat.model_clock_hz, 1, lat.array_width, lat.pipeline_cycles)))
        else:
            inference_ns = 0
        issue_interval = int(round(1e9 / config.engine_rate_hz))

    io = IoState(config.queue_depth)
    if model is None:
        infer_fn = None  # no engine: grants are never scheduled
    elif backend is None:
        infer_fn = kernels.make_infer(model)
    else:
        infer_fn = kernels.make_infer_on(backend, model)
    engine = _Engine(io, infer_fn, issue_interval, inference_ns, chan_return)

    # probability source
    def set_params(flow_count: float, packet_rate: float) -> None:
        params = RateParams.from_inputs(
            config.engine_rate_hz, config.channel_bps, config.effective_msg_bits,
            flow_count, packet_rate)
        if config.prob_source == "exact":
            kernel.set_probability(PROB_EXACT, None, 1.0, 1.0,
                                   params.flow_count, params.packet_rate,
                                   params.token_rate)
        else:
            t_max = config.table.t_max_scale * params.flow_count / params.token_rate
            c_max = max(1.0, config.table.c_max_scale
                        * (params.packet_rate / params.flow_count)
                        * (config.window_ns * 1e-9))
            tbl = build_probability_table(params, config.table.t_bins,
                                          config.table.c_bins, t_max, c_max)
            kernel.set_probability(PROB_TABLE, tbl.cells, tbl.t_step, tbl.c_step,
                                   params.flow_count, params.packet_rate,
                                   params.token_rate)

    if config.rate_override is not None:
        set_params(*config.rate_override)
    else:
        kernel.set_probability(PROB_FORCE_ONE, None, 1.0, 1.0, 1.0, 1.0, 1.0)

    # event loop
    heap: list = []
    seq_counter = 0

    def schedule(t: int, kind: int, payload) -> None:
        nonlocal seq_counter
        heapq.heappush(heap, (t, seq_counter, kind, payload))
        seq_counter += 1

    windows: List[WindowStats] = []
    lat_tx: List[int] = []
    lat_queue: List[int] = []
    lat_infer: List[int] = []
    lat_total: List[int] = []
    responses_applied = 0
    responses_stale = 0
    grants_total = 0

    def handle_event(t: int, kind: int, payload) -> None:
        nonlocal responses_applied, responses_stale
        if kind == _EV_ARRIVE:
            req = payload
            req.meta.arrive_ts = t
            io.enqueue_request(req)
            engine.try_start(t, schedule)
        elif kind == _EV_WAKE:
            engine.wake_pending = False
            engine.try_start(t, schedule)
        elif kind == _EV_DONE:
            req, cls = payload
            io.complete_inference((req, cls))
            while True:
                pair = io.emit_response()
                if pair is None:
                    break
                _flow_id, (rq, rcls) = pair
                schedule(t + chan_return, _EV_RETURN, (rq, rcls))
            engine.try_start(t, schedule)
        else:  # _EV_RETURN
            rq, rcls = payload
            meta: _GrantState = rq.meta
            if table.apply_result_slot(meta.slot, meta.tag, rcls):
                responses_applied += 1
            else:
                responses_stale += 1
            lat_tx.append(chan_to + chan_return)
            lat_queue.append(meta.start_ts - meta.arrive_ts)
            lat_infer.append(inference_ns)
            lat_total.append(t - meta.grant_ts)

    i = 0
    while True:
        t_pkt = int(trace.ts_ns[i]) if i < n else None
        t_ev = heap[0][0] if heap else None
        if t_pkt is None and t_ev is None:
            break
        if t_pkt is None or (t_ev is not None and t_ev <= t_pkt):
            t, _, kind, payload = heapq.heappop(heap)
            handle_event(t, kind, payload)
            continue
        window_end = table.window_start_ns + table.window_ns
        if t_pkt >= window_end:
            stats = table.end_window(window_end)
            windows.append(stats)
            if config.rate_override is None:
                if stats.flow_count >= 1 and stats.packet_rate_pps > 0:
                    set_params(stats.flow_count, stats.packet_rate_pps)
                else:
                    kernel.set_probability(PROB_FORCE_ONE, None, 1.0, 1.0,
                                           1.0, 1.0, 1.0)
            continue
        t_stop = t_ev if t_ev is not None else _FAR_FUTURE
        i, reason = kernel.advance(i, n, t_stop, window_end)
        if reason == REASON_GRANT:
            grants_total += 1
            if model is not None:
                count = kernel.g_count
                features = (kernel.g_lens[:count].copy(),
                            kernel.g_ipds[:count].copy())
                row = kernel.g_index
                meta = _GrantState(slot=kernel.g_slot, tag=kernel.g_tag,
                                   grant_ts=kernel.g_ts, flow_row=row)
                req = InferenceRequest(flow_id=row, features=features, meta=meta)
                schedule(kernel.g_ts + chan_to, _EV_ARRIVE, req)

    return _build_metrics(config, trace, pred, src, granted, num_classes,
                          windows, io, grants_total, responses_applied,
                          responses_stale, bucket,
                          (lat_tx, lat_queue, lat_infer, lat_total))


def _flow_name(trace: Trace, row: int) -> str:
    return (f"{format_ip(int(trace.src_ip[row]))}:{int(trace.src_port[row])}>"
            f"{format_ip(int(trace.dst_ip[row]))}:{int(trace.dst_port[row])}"
            f"/{int(trace.proto[row])}")


def _build_metrics(config, trace, pred, src, granted, num_classes, windows,
                   io, grants, applied, stale, bucket, lat_lists) -> Metrics:
    n = len(trace)
    labels = trace.label
    data: dict = {
        "mode": config.mode,
        "seed": config.seed,
        "backend": kernels.backend_name(),
        "packets": n,
        "duration_ns": int(trace.ts_ns[-1] - trace.ts_ns[0]) if n else 0,
        "grants": grants,
        "drops": io.drop_count,
        "responses_applied": applied,
        "responses_stale": stale,
        "token_bucket_final": bucket.bucket,
        "decision_sources": {
            "model": int(np.sum(src == 1)),
            "fallback": int(np.sum(src == 0)),
        },
    }
    data["grant_fraction"] = grants / n if n else 0.0
    span_s = data["duration_ns"] * 1e-9
    data["grant_rate_per_s"] = grants / span_s if span_s > 0 else 0.0

    labeled = labels >= 0
    data["labeled_packets"] = int(np.sum(labeled))
    if data["labeled_packets"]:
        p = pred[labeled]
        l = labels[labeled]
        data["packet_level"] = {
            "macro_f1": compute_macro_f1(p, l, num_classes),
            "per_class": _per_class_stats(p, l, num_classes),
        }
    else:
        data["packet_level"] = {"macro_f1": 0.0, "per_class": []}

    # flows in order of first appearance
    if n:
        h = flow_hash_columns(trace)
        uniq, first_idx, inverse = np.unique(h, return_index=True, return_inverse=True)
        order = np.argsort(first_idx, kind="stable")
        rank = np.empty(len(uniq), dtype=np.int64)
        rank[order] = np.arange(len(uniq))
        flow_id = rank[inverse]
        n_flows = len(uniq)
        first_rows = first_idx[order]

        flow_label = labels[first_rows]
        by_flow_sort = np.argsort(flow_id, kind="stable")
        bounds = np.searchsorted(flow_id[by_flow_sort], np.arange(n_flows + 1))
        flow_preds, flow_grants, flow_means, flow_counts = [], [], [], []
        per_flow_rows = []
        votes = []
        for f in range(n_flows):
            rows = by_flow_sort[bounds[f]:bounds[f + 1]]
            votes.append(pred[rows])
            g_rows = rows[granted[rows] == 1]
            g_ts = trace.ts_ns[g_rows]
            intervals = np.diff(g_ts)
            mean_iv = float(intervals.mean()) if intervals.size else None
            per_flow_rows.append({
                "flow": _flow_name(trace, int(first_rows[f])),
                "label": int(flow_label[f]),
                "packets": int(len(rows)),
                "grants": int(len(g_rows)),
                "mean_grant_interval_ns": mean_iv,
                "interval_count": int(intervals.size),
            })
            flow_grants.append(len(g_rows))
        flow_pred = flow_majority_vote(votes)
        lab_flows = flow_label >= 0
        if np.any(lab_flows):
            fp = np.asarray(flow_pred)[lab_flows]
            fl = flow_label[lab_flows]
            flow_section = {
                "macro_f1": compute_macro_f1(fp, fl, num_classes),
                "per_class": _per_class_stats(fp, fl, num_classes),
                "flows": int(n_flows),
            }
        else:
            flow_section = {"macro_f1": 0.0, "per_class": [], "flows": int(n_flows)}
        data["flow_level"] = flow_section
        data["per_flow"] = per_flow_rows
        data["mean_grants_per_flow"] = float(np.mean(flow_grants))
    else:
        data["flow_level"] = {"macro_f1": 0.0, "per_class": [], "flows": 0}
        data["per_flow"] = []
        data["mean_grants_per_flow"] = 0.0

    lat_tx, lat_queue, lat_infer, lat_total = lat_lists
    data["latency"] = {
        "hist_edges_ns": LATENCY_HIST_EDGES_NS,
        "transmission": _phase_stats(np.asarray(lat_tx, dtype=np.int64)),
        "queueing": _phase_stats(np.asarray(lat_queue, dtype=np.int64)),
        "inference": _phase_stats(np.asarray(lat_infer, dtype=np.int64)),
        "total": _phase_stats(np.asarray(lat_total, dtype=np.int64)),
    }
    data["windows"] = [
        {"start_ns": w.window_start_ns, "flow_count": w.flow_count,
         "packet_rate_pps": w.packet_rate_pps, "packet_count": w.packet_count}
        for w in windows
    ]
    return Metrics(data=data)
