"""Pure-Python dataplane kernel: the semantics reference.

Composes the per-packet pipeline out of the module-level operations
(flow table, ring store, tree, token bucket). The compiled kernel in
``_core.pyx`` re-implements exactly this loop over the same arrays; the
parity suite holds the two to bit-identical behavior, including float
operation order.
"""

from __future__ import annotations

import numpy as np

from ..buffer_manager import ipd_log_bucket
from ..rate_limiter import _eval_prob_raw

REASON_DONE = 0
REASON_GRANT = 1
REASON_WINDOW = 2

PROB_FORCE_ONE = 0
PROB_TABLE = 1
PROB_EXACT = 2


class Kernel:
    def __init__(self, plane):
        self.plane = plane
        ring = plane.table.ring_size
        self.g_lens = np.zeros(ring + 1, dtype=np.uint16)
        self.g_ipds = np.zeros(ring + 1, dtype=np.uint16)
        self.g_count = 0
        self.g_slot = -1
        self.g_tag = 0
        self.g_ts = 0
        self.g_index = -1
        self._ts = self._slot = self._tag = self._len = None
        self._uniforms = self._pred = self._src = self._granted = None
        self._mode = PROB_FORCE_ONE
        self._cells = None
        self._t_step = self._c_step = 1.0
        self._t_bins = self._c_bins = 1
        self._n = self._q = self._v = 1.0

    def set_run_buffers(self, ts, slot, tag, length, uniforms, pred, src, granted):
        self._ts, self._slot, self._tag, self._len = ts, slot, tag, length
        self._uniforms = uniforms
        self._pred, self._src, self._granted = pred, src, granted

    def set_probability(self, mode, cells, t_step, c_step, n, q, v):
        self._mode = mode
        self._cells = cells
        if cells is not None:
            self._t_bins, self._c_bins = cells.shape
        self._t_step, self._c_step = float(t_step), float(c_step)
        self._n, self._q, self._v = float(n), float(q), float(v)

    def advance(self, i: int, n_pkts: int, t_stop: int, window_end: int):
        """Process packets [i, n_pkts) with ts < min(t_stop, window_end);
        stops after emitting a grant. Returns (next_index, reason)."""
        plane = self.plane
        table, store, tree, bucket = plane.table, plane.store, plane.tree, plane.bucket
        ring_size = table.ring_size
        ts, slots, tags, lens = self._ts, self._slot, self._tag, self._len
        uniforms = self._uniforms
        pred_out, src_out, granted_out = self._pred, self._src, self._granted

        while i < n_pkts:
            t = int(ts[i])
            if t >= t_stop:
                return i, REASON_DONE
            if t >= window_end:
                return i, REASON_WINDOW
            slot = int(slots[i])
            tag = int(tags[i])
            pkt_len = int(lens[i])

            table.lookup_or_insert_hashed(slot, tag, t)
            ring_pos, ipd_ns = table.record_packet(slot, t)
            ipd_b = ipd_log_bucket(ipd_ns)

            cls = int(table.cls[slot])
            if cls >= 0:
                pred, src = cls, 1
            else:
                pred, src = tree.classify(pkt_len, ipd_ns), 0
            pred_out[i] = pred
            src_out[i] = src

            prob = self._probability(t, slot)
            grant = bucket.step(t, prob, float(uniforms[i]))
            granted_out[i] = 1 if grant else 0

            if grant:
                stored = min(int(table.pkt_cnt[slot]) - 1, ring_size)
                newest = ring_size if ring_pos == 1 else ring_pos - 1
                seq = store.read_sequence(slot, newest, stored)
                for k, (l, b) in enumerate(seq):
                    self.g_lens[k] = l
                    self.g_ipds[k] = b
                self.g_lens[stored] = pkt_len
                self.g_ipds[stored] = ipd_b
                self.g_count = stored + 1
                self.g_slot = slot
                self.g_tag = tag
                self.g_ts = t
                self.g_index = i
                table.on_feature_sent(slot, t)

            store.push(slot, ring_pos, pkt_len, ipd_b)
            i += 1
            if grant:
                return i, REASON_GRANT
        return i, REASON_DONE

    def _probability(self, t: int, slot: int) -> float:
        if self._mode == PROB_FORCE_ONE:
            return 1.0
        table = self.plane.table
        elapsed_s = (t - int(table.backlog_ts[slot])) * 1e-9
        backlog = float(table.backlog_pkts[slot])
        if self._mode == PROB_TABLE:
            ti = int(elapsed_s / self._t_step)
            if ti >= self._t_bins:
                ti = self._t_bins - 1
            ci = int(backlog / self._c_step)
            if ci >= self._c_bins:
                ci = self._c_bins - 1
            return float(self._cells[ti, ci])
        return _eval_prob_raw(elapsed_s, backlog, self._n, self._q, self._v)


def make_infer(qm):
    """Classifier over wire-form feature arrays, numpy integer path."""
    from ..inference_engine import encode_sequence, infer_encoded

    enc, seq_len = qm.encoding, qm.seq_len

    def infer_fn(features) -> int:
        lens, ipds = features
        pairs = list(zip(lens.tolist(), ipds.tolist()))
        return infer_encoded(qm, encode_sequence(pairs, enc, seq_len))[0]

    return infer_fn
