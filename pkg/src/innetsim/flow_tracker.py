"""Per-flow state table and the lightweight fallback classifier.

The table is a single-slot register array indexed by a truncated flow hash,
like switch SRAM: collisions evict and reinitialize the slot. Per window it
counts flows seen (via a per-slot bit) and total packets; both reset at the
window boundary and feed the rate limiter's probability model.

State lives in flat numpy arrays so the compiled replay kernel can walk the
same memory the Python operations mutate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigError, TreeFormatError
from .trace_io import FeatureVector, FiveTuple, flow_hash

UNCLASSIFIED = -1


@dataclass(frozen=True)
class FlowEntry:
    """Read-only snapshot of one table slot."""

    hash_tag: int
    backlog_pkts: int  # packets since the flow last sent features
    backlog_ts_ns: int  # when the flow last sent features (or flow start)
    cls: int  # stored inference result, UNCLASSIFIED if none
    ring_pos: int  # 1..ring_size once the flow has a packet
    pkt_cnt: int
    last_ts_ns: int  # previous packet timestamp, -1 before the first


@dataclass(frozen=True)
class WindowStats:
    flow_count: int  # flows seen this window (N)
    packet_rate_pps: float  # packets this window / window length (Q)
    packet_count: int
    window_start_ns: int


class FlowTable:
    """Fixed-capacity flow state, 2**hash_bits single-entry slots."""

    def __init__(self, hash_bits: int = 16, ring_size: int = 8,
                 window_ns: int = 100_000_000, start_ns: int = 0):
        if not 1 <= hash_bits <= 24:
            raise ConfigError("hash_bits must be in 1..24")
        if ring_size < 1:
            raise ConfigError("ring_size must be >= 1")
        if window_ns <= 0:
            raise ConfigError("window_ns must be > 0")
        self.hash_bits = hash_bits
        self.ring_size = ring_size
        self.window_ns = window_ns
        self.slots = 1 << hash_bits

        self.occupied = np.zeros(self.slots, dtype=np.uint8)
        self.seen = np.zeros(self.slots, dtype=np.uint8)  # touched this window
        self.tag = np.zeros(self.slots, dtype=np.uint64)
        self.backlog_pkts = np.zeros(self.slots, dtype=np.int64)
        self.backlog_ts = np.zeros(self.slots, dtype=np.int64)
        self.cls = np.full(self.slots, UNCLASSIFIED, dtype=np.int16)
        self.ring_pos = np.zeros(self.slots, dtype=np.int32)
        self.pkt_cnt = np.zeros(self.slots, dtype=np.int64)
        self.last_ts = np.full(self.slots, -1, dtype=np.int64)

        # [flows seen this window, packets this window]; shared with kernels.
        self.win_counters = np.zeros(2, dtype=np.int64)
        self.window_start_ns = start_ns

    # -- hashing --------------------------------------------------------

    def slot_and_tag(self, ft: FiveTuple) -> Tuple[int, int]:
        h = flow_hash(ft)
        return h & (self.slots - 1), h >> self.hash_bits

    # -- table operations --------------------------------------------------

    def lookup_or_insert(self, ft: FiveTuple, now_ns: int) -> Tuple[int, bool, bool]:
        """Return (slot, is_new, collided); inserts/evicts as needed."""
        slot, tag = self.slot_and_tag(ft)
        _, is_new, collided = self.lookup_or_insert_hashed(slot, tag, now_ns)
        return slot, is_new, collided

    def lookup_or_insert_hashed(self, slot: int, tag: int, now_ns: int) -> Tuple[int, bool, bool]:
        """lookup_or_insert for a precomputed (slot, tag); the replay path."""
        collided = False
        if self.occupied[slot] and self.tag[slot] == tag:
            is_new = False
        else:
            collided = bool(self.occupied[slot])
            self._init_slot(slot, tag, now_ns)
            is_new = True
        if not self.seen[slot]:
            self.seen[slot] = 1
            self.win_counters[0] += 1
        return slot, is_new, collided

    def _init_slot(self, slot: int, tag: int, now_ns: int) -> None:
        # `seen` is untouched: the per-window bit belongs to the slot, so a
        # colliding eviction cannot recount until the next window reset.
        self.occupied[slot] = 1
        self.tag[slot] = tag
        self.backlog_pkts[slot] = 0
        self.backlog_ts[slot] = now_ns  # flow start, so T_i is defined pre-grant
        self.cls[slot] = UNCLASSIFIED
        self.ring_pos[slot] = 0
        self.pkt_cnt[slot] = 0
        self.last_ts[slot] = -1

    def record_packet(self, slot: int, ts_ns: int) -> Tuple[int, int]:
        """Count a packet; returns (ring_pos, ipd_ns) for the feature write.

        ring_pos advances 1..ring_size and wraps back to 1 without a modulo,
        mirroring the dataplane register update.
        """
        prev = self.last_ts[slot]
        ipd = 0 if prev < 0 else int(ts_ns - prev)
        self.last_ts[slot] = ts_ns
        self.pkt_cnt[slot] += 1
        self.backlog_pkts[slot] += 1
        pos = self.ring_pos[slot]
        pos = 1 if pos == self.ring_size else pos + 1
        self.ring_pos[slot] = pos
        self.win_counters[1] += 1
        return int(pos), ipd

    def on_feature_sent(self, slot: int, now_ns: int) -> None:
        self.backlog_pkts[slot] = 0
        self.backlog_ts[slot] = now_ns

    def apply_inference_result(self, ft: FiveTuple, cls: int) -> bool:
        """Store a returned result; False if the slot was evicted meanwhile."""
        slot, tag = self.slot_and_tag(ft)
        return self.apply_result_slot(slot, tag, cls)

    def apply_result_slot(self, slot: int, tag: int, cls: int) -> bool:
        if self.occupied[slot] and self.tag[slot] == tag:
            self.cls[slot] = cls
            return True
        return False

    def end_window(self, now_ns: int) -> WindowStats:
        """Close the current window: report N and Q, reset the counters."""
        boundary = self.window_start_ns + self.window_ns
        if now_ns < boundary:
            raise ConfigError(
                f"end_window at {now_ns} before boundary {boundary}"
            )
        stats = WindowStats(
            flow_count=int(self.win_counters[0]),
            packet_rate_pps=float(self.win_counters[1]) / (self.window_ns * 1e-9),
            packet_count=int(self.win_counters[1]),
            window_start_ns=self.window_start_ns,
        )
        self.win_counters[:] = 0
        self.seen[:] = 0
        self.window_start_ns = boundary
        return stats

    # -- inspection ------------------------------------------------------

    def entry(self, slot: int) -> Optional[FlowEntry]:
        if not self.occupied[slot]:
            return None
        return FlowEntry(
            hash_tag=int(self.tag[slot]),
            backlog_pkts=int(self.backlog_pkts[slot]),
            backlog_ts_ns=int(self.backlog_ts[slot]),
            cls=int(self.cls[slot]),
            ring_pos=int(self.ring_pos[slot]),
            pkt_cnt=int(self.pkt_cnt[slot]),
            last_ts_ns=int(self.last_ts[slot]),
        )

    def entry_for(self, ft: FiveTuple) -> Optional[FlowEntry]:
        slot, tag = self.slot_and_tag(ft)
        e = self.entry(slot)
        if e is None or e.hash_tag != tag:
            return None
        return e


# -- fallback decision tree ----------------------------------------------

FEATURE_PKT_LEN = 0
FEATURE_IPD_NS = 1
_FEATURE_NAMES = {"pkt_len": FEATURE_PKT_LEN, "ipd_ns": FEATURE_IPD_NS}


class DecisionTree:
    """Threshold tree over (pkt_len, ipd_ns); descends left on `<=`.

    Node child indices >= 0 point at nodes; negative indices encode leaves
    as ``-(leaf_index + 1)``. The same encoding is used in the JSON form:
    ``{"nodes": [{"feature","threshold","left","right"}], "leaves": [cls],
    "root": idx}``.
    """

    def __init__(self, feature, threshold, left, right, leaves, root: int):
        self.feature = np.ascontiguousarray(feature, dtype=np.int8)
        self.threshold = np.ascontiguousarray(threshold, dtype=np.int64)
        self.left = np.ascontiguousarray(left, dtype=np.int32)
        self.right = np.ascontiguousarray(right, dtype=np.int32)
        self.leaves = np.ascontiguousarray(leaves, dtype=np.int16)
        self.root = int(root)
        self.max_depth = self._validate()

    @classmethod
    def single_leaf(cls, class_id: int) -> "DecisionTree":
        return cls([], [], [], [], [class_id], -1)

    def _validate(self) -> int:
        n_nodes, n_leaves = len(self.feature), len(self.leaves)
        if n_leaves == 0:
            raise TreeFormatError("tree needs at least one leaf")
        if len(self.threshold) != n_nodes or len(self.left) != n_nodes or len(self.right) != n_nodes:
            raise TreeFormatError("node arrays must have equal length")
        if n_nodes and not np.all((self.feature == FEATURE_PKT_LEN) | (self.feature == FEATURE_IPD_NS)):
            raise TreeFormatError("unknown feature id in tree")

        def check(idx: int, depth: int, seen) -> int:
            if depth > n_nodes + 1:
                raise TreeFormatError("tree contains a cycle")
            if idx < 0:
                leaf = -idx - 1
                if leaf >= n_leaves:
                    raise TreeFormatError(f"dangling leaf index {idx}")
                return depth
            if idx >= n_nodes:
                raise TreeFormatError(f"dangling node index {idx}")
            if idx in seen:
                raise TreeFormatError("tree contains a cycle")
            seen = seen | {idx}
            return max(
                check(int(self.left[idx]), depth + 1, seen),
                check(int(self.right[idx]), depth + 1, seen),
            )

        return check(self.root, 0, frozenset())

    def classify(self, pkt_len: int, ipd_ns: int) -> int:
        idx = self.root
        while idx >= 0:
            value = pkt_len if self.feature[idx] == FEATURE_PKT_LEN else ipd_ns
            idx = int(self.left[idx]) if value <= self.threshold[idx] else int(self.right[idx])
        return int(self.leaves[-idx - 1])

    def classify_fv(self, fv: FeatureVector) -> int:
        return self.classify(fv.pkt_len, fv.ipd_ns)

    @classmethod
    def from_json_obj(cls, obj: dict) -> "DecisionTree":
        try:
            nodes = obj["nodes"]
            leaves = obj["leaves"]
            root = obj["root"]
            feature = [_FEATURE_NAMES[n["feature"]] for n in nodes]
            threshold = [int(n["threshold"]) for n in nodes]
            left = [int(n["left"]) for n in nodes]
            right = [int(n["right"]) for n in nodes]
        except (KeyError, TypeError) as exc:
            raise TreeFormatError(f"bad tree JSON: {exc}") from exc
        return cls(feature, threshold, left, right, leaves, root)

    @classmethod
    def load(cls, path) -> "DecisionTree":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise TreeFormatError(f"bad tree JSON: {exc}") from exc
        return cls.from_json_obj(obj)

    def to_json_obj(self) -> dict:
        names = {FEATURE_PKT_LEN: "pkt_len", FEATURE_IPD_NS: "ipd_ns"}
        return {
            "nodes": [
                {
                    "feature": names[int(f)],
                    "threshold": int(t),
                    "left": int(l),
                    "right": int(r),
                }
                for f, t, l, r in zip(self.feature, self.threshold, self.left, self.right)
            ],
            "leaves": [int(c) for c in self.leaves],
            "root": self.root,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_obj(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def fallback_classify(tree: DecisionTree, fv: FeatureVector) -> int:
    """Packet-level preliminary inference for flows without a stored class."""
    return tree.classify_fv(fv)
