"""Packet trace loading, synthetic traffic generation, feature extraction.

Trace files are UTF-8 JSON Lines, one packet per line, with keys exactly
``{"ts_ns","src_ip","dst_ip","src_port","dst_port","proto","len","label"}``.
IPs are dotted quads, ``label`` is an integer class id or ``null``, and
``ts_ns`` is integer nanoseconds since trace start, non-decreasing. pcap is
deliberately not supported; convert externally.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple, Optional, Sequence

import numpy as np

from .errors import ClockError, ConfigError, TraceOrderError, TraceParseError

TRACE_KEYS = frozenset(
    {"ts_ns", "src_ip", "dst_ip", "src_port", "dst_port", "proto", "len", "label"}
)

NO_LABEL = -1  # in-memory stand-in for a JSON null label


class FiveTuple(NamedTuple):
    src_ip: int
    dst_ip: int
    src_port: int
    dst_port: int
    proto: int


@dataclass(frozen=True)
class PacketRecord:
    """One trace event."""

    ts_ns: int
    five_tuple: FiveTuple
    length: int
    label: Optional[int] = None


@dataclass(frozen=True)
class FeatureVector:
    """Per-packet feature: raw length and inter-packet delay (0 for the
    first packet of a flow)."""

    pkt_len: int
    ipd_ns: int


def parse_ip(text: str) -> int:
    parts = text.split(".")
    if len(parts) != 4:
        raise ValueError(f"bad IPv4 address {text!r}")
    value = 0
    for p in parts:
        octet = int(p)
        if not 0 <= octet <= 255:
            raise ValueError(f"bad IPv4 address {text!r}")
        value = (value << 8) | octet
    return value


def format_ip(value: int) -> str:
    return ".".join(str((value >> shift) & 0xFF) for shift in (24, 16, 8, 0))


class Trace(Sequence):
    """An ordered packet trace stored column-wise.

    Behaves as a sequence of :class:`PacketRecord` while keeping numpy
    columns (`ts_ns`, `src_ip`, ... , `length`, `label`) for the replay
    hot path. `label` uses -1 for unlabeled packets.
    """

    __slots__ = ("ts_ns", "src_ip", "dst_ip", "src_port", "dst_port", "proto", "length", "label")

    def __init__(self, ts_ns, src_ip, dst_ip, src_port, dst_port, proto, length, label):
        self.ts_ns = np.ascontiguousarray(ts_ns, dtype=np.int64)
        self.src_ip = np.ascontiguousarray(src_ip, dtype=np.uint32)
        self.dst_ip = np.ascontiguousarray(dst_ip, dtype=np.uint32)
        self.src_port = np.ascontiguousarray(src_port, dtype=np.uint16)
        self.dst_port = np.ascontiguousarray(dst_port, dtype=np.uint16)
        self.proto = np.ascontiguousarray(proto, dtype=np.uint8)
        self.length = np.ascontiguousarray(length, dtype=np.uint16)
        self.label = np.ascontiguousarray(label, dtype=np.int16)

    @classmethod
    def from_records(cls, records: Iterable[PacketRecord]) -> "Trace":
        cols = ([], [], [], [], [], [], [], [])
        for r in records:
            cols[0].append(r.ts_ns)
            cols[1].append(r.five_tuple.src_ip)
            cols[2].append(r.five_tuple.dst_ip)
            cols[3].append(r.five_tuple.src_port)
            cols[4].append(r.five_tuple.dst_port)
            cols[5].append(r.five_tuple.proto)
            cols[6].append(r.length)
            cols[7].append(NO_LABEL if r.label is None else r.label)
        return cls(*cols)

    @classmethod
    def empty(cls) -> "Trace":
        return cls(*([[]] * 8))

    def __len__(self) -> int:
        return len(self.ts_ns)

    def __getitem__(self, i) -> PacketRecord:
        if isinstance(i, slice):
            raise TypeError("Trace does not support slicing")
        lbl = int(self.label[i])
        return PacketRecord(
            ts_ns=int(self.ts_ns[i]),
            five_tuple=FiveTuple(
                int(self.src_ip[i]),
                int(self.dst_ip[i]),
                int(self.src_port[i]),
                int(self.dst_port[i]),
                int(self.proto[i]),
            ),
            length=int(self.length[i]),
            label=None if lbl == NO_LABEL else lbl,
        )

    def __iter__(self) -> Iterator[PacketRecord]:
        for i in range(len(self)):
            yield self[i]

    def distinct_flows(self) -> int:
        packed = (
            self.src_ip.astype(np.uint64) << 32
            | self.dst_ip.astype(np.uint64)
        )
        ports = (
            self.src_port.astype(np.uint64) << 24
            | self.dst_port.astype(np.uint64) << 8
            | self.proto.astype(np.uint64)
        )
        return len(np.unique(np.stack([packed, ports], axis=1), axis=0))


def _parse_line(line_no: int, line: str) -> tuple:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TraceParseError(line_no, f"invalid JSON: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise TraceParseError(line_no, "record is not a JSON object")
    keys = set(obj)
    if keys != TRACE_KEYS:
        missing = sorted(TRACE_KEYS - keys)
        extra = sorted(keys - TRACE_KEYS)
        raise TraceParseError(line_no, f"bad keys (missing={missing}, extra={extra})")
    try:
        ts = int(obj["ts_ns"])
        src = parse_ip(obj["src_ip"])
        dst = parse_ip(obj["dst_ip"])
        sport = int(obj["src_port"])
        dport = int(obj["dst_port"])
        proto = int(obj["proto"])
        length = int(obj["len"])
        label = obj["label"]
    except (TypeError, ValueError) as exc:
        raise TraceParseError(line_no, str(exc)) from exc
    if ts < 0:
        raise TraceParseError(line_no, f"negative ts_ns {ts}")
    if not (0 <= sport <= 0xFFFF and 0 <= dport <= 0xFFFF):
        raise TraceParseError(line_no, "port out of range")
    if not 0 <= proto <= 0xFF:
        raise TraceParseError(line_no, "proto out of range")
    if not 1 <= length <= 0xFFFF:
        raise TraceParseError(line_no, f"len {length} out of range 1..65535")
    if label is None:
        label = NO_LABEL
    elif not isinstance(label, int) or isinstance(label, bool) or label < 0:
        raise TraceParseError(line_no, f"label must be null or a non-negative int, got {label!r}")
    return ts, src, dst, sport, dport, proto, length, label


def load_trace(path) -> Trace:
    """Load a JSON-Lines trace; rejects malformed lines and time regressions."""
    cols = ([], [], [], [], [], [], [], [])
    prev_ts = None
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            row = _parse_line(line_no, line)
            if prev_ts is not None and row[0] < prev_ts:
                raise TraceOrderError(
                    line_no, f"ts_ns {row[0]} is earlier than predecessor {prev_ts}"
                )
            prev_ts = row[0]
            for col, value in zip(cols, row):
                col.append(value)
    return Trace(*cols)


def save_trace(path, trace: Trace) -> None:
    """Write a trace in the JSON-Lines format accepted by :func:`load_trace`."""
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(trace)):
            lbl = int(trace.label[i])
            obj = {
                "ts_ns": int(trace.ts_ns[i]),
                "src_ip": format_ip(int(trace.src_ip[i])),
                "dst_ip": format_ip(int(trace.dst_ip[i])),
                "src_port": int(trace.src_port[i]),
                "dst_port": int(trace.dst_port[i]),
                "proto": int(trace.proto[i]),
                "len": int(trace.length[i]),
                "label": None if lbl == NO_LABEL else lbl,
            }
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


DEFAULT_LENGTH_BANDS = ((64, 384), (384, 704), (704, 1024), (1024, 1344))


@dataclass
class TrafficSpec:
    """Recipe for synthetic high-concurrency labeled traffic.

    Flow five-tuples are counter-derived so every flow is unique. Each flow
    gets a class from `class_mix` and draws packet lengths from that class's
    band, which makes the label a deterministic function of length — the
    ground truth for the end-to-end oracle task.
    """

    num_flows: int
    duration_ns: int
    mean_rate_pps: float = 1000.0
    rate_dist: str = "fixed"  # fixed | uniform | pareto
    pareto_shape: float = 4.0
    arrival: str = "fixed"  # fixed | poisson
    num_classes: int = 4
    class_mix: Sequence[float] = (0.25, 0.25, 0.25, 0.25)
    length_bands: Sequence[tuple] = DEFAULT_LENGTH_BANDS
    seed: int = 0

    def validate(self) -> None:
        if self.num_flows < 1:
            raise ConfigError("num_flows must be >= 1")
        if self.duration_ns <= 0:
            raise ConfigError("duration_ns must be > 0")
        if self.mean_rate_pps <= 0:
            raise ConfigError("mean_rate_pps must be > 0")
        if self.rate_dist not in ("fixed", "uniform", "pareto"):
            raise ConfigError(f"unknown rate_dist {self.rate_dist!r}")
        if self.arrival not in ("fixed", "poisson"):
            raise ConfigError(f"unknown arrival {self.arrival!r}")
        if self.rate_dist == "pareto" and self.pareto_shape <= 1.0:
            raise ConfigError("pareto_shape must be > 1 for a finite mean")
        if self.num_classes < 1 or len(self.class_mix) != self.num_classes:
            raise ConfigError("class_mix length must equal num_classes")
        if abs(sum(self.class_mix) - 1.0) > 1e-9:
            raise ConfigError("class_mix must sum to 1")
        if len(self.length_bands) != self.num_classes:
            raise ConfigError("length_bands length must equal num_classes")
        for lo, hi in self.length_bands:
            if not (1 <= lo < hi <= 0xFFFF):
                raise ConfigError(f"bad length band ({lo}, {hi})")


def flow_five_tuple(index: int) -> FiveTuple:
    """Counter-derived unique five-tuple for synthetic flow `index`."""
    if not 0 <= index < (1 << 24):
        raise ConfigError("synthetic flow index out of the 24-bit space")
    return FiveTuple(
        src_ip=(10 << 24) | index,
        dst_ip=(192 << 24) | (168 << 16) | 1,
        src_port=1024 + (index % 60000),
        dst_port=443,
        proto=6,
    )


def flow_rates(spec: TrafficSpec, rng: np.random.Generator) -> np.ndarray:
    """Per-flow packet rates (pps) under the spec's rate distribution."""
    n = spec.num_flows
    if spec.rate_dist == "fixed":
        return np.full(n, spec.mean_rate_pps)
    if spec.rate_dist == "uniform":
        return spec.mean_rate_pps * rng.uniform(0.5, 1.5, size=n)
    # Pareto with mean == mean_rate_pps: x_m = mean * (a-1)/a.
    a = spec.pareto_shape
    x_m = spec.mean_rate_pps * (a - 1.0) / a
    return x_m * (1.0 + rng.pareto(a, size=n))


def generate_synthetic(spec: TrafficSpec) -> Trace:
    """Generate a labeled trace; a pure function of the spec (seed included)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    rates = flow_rates(spec, rng)

    # Exact class proportions by largest remainder, then shuffled.
    mix = np.asarray(spec.class_mix, dtype=float)
    base = np.floor(mix * spec.num_flows).astype(int)
    short = spec.num_flows - base.sum()
    order = np.argsort(-(mix * spec.num_flows - base), kind="stable")
    base[order[:short]] += 1
    flow_class = np.repeat(np.arange(spec.num_classes), base)
    flow_class = flow_class[rng.permutation(spec.num_flows)]

    dur_s = spec.duration_ns * 1e-9
    ts_parts, flow_parts = [], []
    for i in range(spec.num_flows):
        gap_ns = 1e9 / rates[i]
        if spec.arrival == "fixed":
            count = int(math.floor(dur_s * rates[i]))
            if count < 1:
                continue
            start = rng.uniform(0.0, gap_ns)
            ts = (start + gap_ns * np.arange(count)).astype(np.int64)
        else:
            # Poisson arrivals: draw with headroom, then cut at duration.
            lam = dur_s * rates[i]
            count = int(lam + 6.0 * math.sqrt(lam) + 16.0)
            gaps = rng.exponential(gap_ns, size=count)
            ts = np.cumsum(gaps).astype(np.int64)
            ts = ts[ts < spec.duration_ns]
            if len(ts) == 0:
                continue
        ts = np.minimum(ts, spec.duration_ns - 1)
        ts_parts.append(ts)
        flow_parts.append(np.full(len(ts), i, dtype=np.int64))

    if not ts_parts:
        raise ConfigError("spec produced no packets; raise rate or duration")
    ts_all = np.concatenate(ts_parts)
    flow_all = np.concatenate(flow_parts)
    order = np.argsort(ts_all, kind="stable")  # ties stay in flow order
    ts_all, flow_all = ts_all[order], flow_all[order]

    labels = flow_class[flow_all].astype(np.int16)
    bands = np.asarray(spec.length_bands, dtype=np.int64)
    lo = bands[labels, 0]
    hi = bands[labels, 1]
    lengths = (lo + rng.random(len(ts_all)) * (hi - lo)).astype(np.uint16)

    idx = flow_all
    return Trace(
        ts_ns=ts_all,
        src_ip=(10 << 24) | idx,
        dst_ip=np.full(len(idx), (192 << 24) | (168 << 16) | 1, dtype=np.uint32),
        src_port=1024 + (idx % 60000),
        dst_port=np.full(len(idx), 443, dtype=np.uint16),
        proto=np.full(len(idx), 6, dtype=np.uint8),
        length=lengths,
        label=labels,
    )


def extract_feature(pkt: PacketRecord, prev_ts_ns: Optional[int] = None) -> FeatureVector:
    """Feature for one packet given the flow's previous packet timestamp."""
    if prev_ts_ns is None:
        return FeatureVector(pkt_len=pkt.length, ipd_ns=0)
    if prev_ts_ns > pkt.ts_ns:
        raise ClockError(
            f"previous timestamp {prev_ts_ns} is after packet timestamp {pkt.ts_ns}"
        )
    return FeatureVector(pkt_len=pkt.length, ipd_ns=pkt.ts_ns - prev_ts_ns)


# --- flow hashing (shared by the tracker and the replay hot path) ---

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_U64 = (1 << 64) - 1


def tuple_bytes(ft: FiveTuple) -> bytes:
    return (
        ft.src_ip.to_bytes(4, "big")
        + ft.dst_ip.to_bytes(4, "big")
        + ft.src_port.to_bytes(2, "big")
        + ft.dst_port.to_bytes(2, "big")
        + ft.proto.to_bytes(1, "big")
    )


_FMIX_C1 = 0xFF51AFD7ED558CCD
_FMIX_C2 = 0xC4CEB9FE1A85EC53


def flow_hash(ft: FiveTuple) -> int:
    """FNV-1a 64 over the big-endian packed five-tuple, then an avalanche
    finalizer so truncated slots stay uniform for structured keys."""
    h = FNV_OFFSET
    for b in tuple_bytes(ft):
        h = ((h ^ b) * FNV_PRIME) & _U64
    h ^= h >> 33
    h = (h * _FMIX_C1) & _U64
    h ^= h >> 33
    h = (h * _FMIX_C2) & _U64
    h ^= h >> 33
    return h


def flow_hash_columns(trace: Trace) -> np.ndarray:
    """Vectorized :func:`flow_hash` over a whole trace."""
    n = len(trace)
    h = np.full(n, FNV_OFFSET, dtype=np.uint64)
    prime = np.uint64(FNV_PRIME)
    cols = (
        trace.src_ip >> 24, trace.src_ip >> 16, trace.src_ip >> 8, trace.src_ip,
        trace.dst_ip >> 24, trace.dst_ip >> 16, trace.dst_ip >> 8, trace.dst_ip,
        trace.src_port >> 8, trace.src_port,
        trace.dst_port >> 8, trace.dst_port,
        trace.proto,
    )
    with np.errstate(over="ignore"):
        for col in cols:
            h ^= (col.astype(np.uint64) & np.uint64(0xFF))
            h *= prime
        h ^= h >> np.uint64(33)
        h *= np.uint64(_FMIX_C1)
        h ^= h >> np.uint64(33)
        h *= np.uint64(_FMIX_C2)
        h ^= h >> np.uint64(33)
    return h
