"""Per-flow feature rings and mirrored-packet assembly.

Each table slot owns a fixed ring of the flow's most recent features,
stored pre-quantized to the wire encoding (raw length, log-bucketed delay).
On a grant the ring contents are read out oldest-to-newest, the current
packet's feature (held in metadata, not yet written) is appended, and the
whole sequence rides a mirrored packet to the inference engine.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .errors import ConfigError, SimError
from .trace_io import FeatureVector, FiveTuple


def ipd_log_bucket(ipd_ns: int) -> int:
    """Log2 bucket of an inter-packet delay: floor(log2(1 + ipd_ns))."""
    if ipd_ns < 0:
        raise ConfigError("ipd_ns must be >= 0")
    return (ipd_ns + 1).bit_length() - 1


def quantize_feature(fv: FeatureVector) -> Tuple[int, int]:
    """Wire form of a feature: (length u16, ipd bucket u16)."""
    return fv.pkt_len, ipd_log_bucket(fv.ipd_ns)


def mirror_width_bits(feature_count: int) -> int:
    """Wire width of a mirrored packet carrying `feature_count` features:
    13-byte five-tuple + 1-byte count + 4 bytes per feature."""
    return 8 * (14 + 4 * feature_count)


@dataclass(frozen=True)
class MirrorPacket:
    """Flow id plus its feature sequence in arrival order (newest last)."""

    five_tuple: FiveTuple
    lens: Tuple[int, ...]
    ipd_buckets: Tuple[int, ...]
    emit_ts_ns: int

    def __post_init__(self):
        if len(self.lens) == 0 or len(self.lens) != len(self.ipd_buckets):
            raise SimError("mirror packet needs a non-empty feature sequence")

    @property
    def count(self) -> int:
        return len(self.lens)

    def encode(self) -> bytes:
        """Little-endian wire encoding; width matches mirror_width_bits."""
        ft = self.five_tuple
        head = struct.pack("<IIHHBB", ft.src_ip, ft.dst_ip, ft.src_port,
                           ft.dst_port, ft.proto, self.count)
        body = b"".join(
            struct.pack("<HH", l, b) for l, b in zip(self.lens, self.ipd_buckets)
        )
        return head + body

    @classmethod
    def decode(cls, blob: bytes, emit_ts_ns: int = 0) -> "MirrorPacket":
        if len(blob) < 14:
            raise SimError("mirror packet truncated")
        src, dst, sport, dport, proto, count = struct.unpack("<IIHHBB", blob[:14])
        if len(blob) != 14 + 4 * count:
            raise SimError("mirror packet length mismatch")
        lens, buckets = [], []
        for k in range(count):
            l, b = struct.unpack("<HH", blob[14 + 4 * k : 18 + 4 * k])
            lens.append(l)
            buckets.append(b)
        return cls(FiveTuple(src, dst, sport, dport, proto),
                   tuple(lens), tuple(buckets), emit_ts_ns)


class FeatureStore:
    """Rings of quantized features, one per flow-table slot."""

    def __init__(self, slots: int, ring_size: int):
        if ring_size < 1:
            raise ConfigError("ring_size must be >= 1")
        self.ring_size = ring_size
        self.lens = np.zeros((slots, ring_size), dtype=np.uint16)
        self.ipd_buckets = np.zeros((slots, ring_size), dtype=np.uint16)

    def push(self, slot: int, ring_pos: int, pkt_len: int, ipd_bucket: int) -> None:
        """Write into 1-based `ring_pos`, overwriting the slot's oldest."""
        if not 1 <= ring_pos <= self.ring_size:
            raise SimError(f"ring_pos {ring_pos} outside 1..{self.ring_size}")
        self.lens[slot, ring_pos - 1] = pkt_len
        self.ipd_buckets[slot, ring_pos - 1] = ipd_bucket

    def push_feature(self, slot: int, ring_pos: int, fv: FeatureVector) -> None:
        l, b = quantize_feature(fv)
        self.push(slot, ring_pos, l, b)

    def read_sequence(self, slot: int, ring_pos: int, filled: int) -> List[Tuple[int, int]]:
        """Stored features in arrival order, oldest first, ending at
        `ring_pos`; `filled` = min(pkt_cnt, ring_size) for the owning flow."""
        if filled < 0 or filled > self.ring_size:
            raise SimError(f"filled {filled} outside 0..{self.ring_size}")
        out = []
        for k in range(filled):
            idx = (ring_pos - filled + k) % self.ring_size  # ring_pos is 1-based
            out.append((int(self.lens[slot, idx]), int(self.ipd_buckets[slot, idx])))
        return out


def assemble_mirror(store: FeatureStore, slot: int, ring_pos: int, filled: int,
                    current_fv: FeatureVector, ft: FiveTuple, now_ns: int) -> MirrorPacket:
    """Build the mirrored packet for a grant: stored features in arrival
    order, then the current packet's feature from metadata. The current
    feature must not have been pushed yet."""
    seq = store.read_sequence(slot, ring_pos, filled)
    seq.append(quantize_feature(current_fv))
    return MirrorPacket(
        five_tuple=ft,
        lens=tuple(l for l, _ in seq),
        ipd_buckets=tuple(b for _, b in seq),
        emit_ts_ns=now_ns,
    )
