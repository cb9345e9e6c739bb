# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled dataplane kernel; semantics twin of kernels/pyref.py.

Every arithmetic step (including double operation order) matches the
pure-Python reference so both backends produce bit-identical runs.
"""

import numpy as np

from libc.stdint cimport (int8_t, int16_t, int32_t, int64_t, uint8_t,
                          uint16_t, uint64_t)

from innetsim.errors import ClockError

cdef enum:
    _REASON_DONE = 0
    _REASON_GRANT = 1
    _REASON_WINDOW = 2
    _PROB_FORCE_ONE = 0
    _PROB_TABLE = 1
    _PROB_EXACT = 2

REASON_DONE = _REASON_DONE
REASON_GRANT = _REASON_GRANT
REASON_WINDOW = _REASON_WINDOW

PROB_FORCE_ONE = _PROB_FORCE_ONE
PROB_TABLE = _PROB_TABLE
PROB_EXACT = _PROB_EXACT

ctypedef int64_t i64
ctypedef uint64_t u64
ctypedef int32_t i32
ctypedef int16_t i16
ctypedef uint16_t u16
ctypedef uint8_t u8
ctypedef int8_t i8
ctypedef double f64


cdef inline int _ipd_bucket(long long ipd_ns) nogil:
    cdef unsigned long long v = <unsigned long long>(ipd_ns + 1)
    cdef int b = -1
    while v:
        v >>= 1
        b += 1
    return b


cdef class Kernel:
    cdef object plane
    cdef int ring_size
    # flow table
    cdef u8[::1] occupied
    cdef u8[::1] seen
    cdef u64[::1] tag
    cdef i64[::1] backlog_pkts
    cdef i64[::1] backlog_ts
    cdef i16[::1] cls
    cdef i32[::1] ring_pos
    cdef i64[::1] pkt_cnt
    cdef i64[::1] last_ts
    cdef i64[::1] win
    # feature rings
    cdef u16[:, ::1] ring_lens
    cdef u16[:, ::1] ring_ipds
    # fallback tree
    cdef i8[::1] tr_feature
    cdef i64[::1] tr_threshold
    cdef i32[::1] tr_left
    cdef i32[::1] tr_right
    cdef i16[::1] tr_leaves
    cdef int tr_root
    # token bucket
    cdef f64[::1] tokens
    cdef i64[::1] bucket_last
    cdef double rate, cap, cost
    # run buffers
    cdef i64[::1] ts
    cdef i64[::1] slot
    cdef u64[::1] tags_in
    cdef u16[::1] length
    cdef f64[::1] uniforms
    cdef i16[::1] pred
    cdef u8[::1] src
    cdef u8[::1] granted
    # probability state
    cdef int prob_mode
    cdef int has_cells
    cdef f64[:, ::1] cells
    cdef double t_step, c_step, p_n, p_q, p_v
    cdef int t_bins, c_bins
    # grant output
    cdef public object g_lens
    cdef public object g_ipds
    cdef u16[::1] g_lens_v
    cdef u16[::1] g_ipds_v
    cdef public int g_count
    cdef public long long g_slot
    cdef public unsigned long long g_tag
    cdef public long long g_ts
    cdef public long long g_index

    def __init__(self, plane):
        self.plane = plane
        table = plane.table
        store = plane.store
        tree = plane.tree
        bucket = plane.bucket
        self.ring_size = table.ring_size
        self.occupied = table.occupied
        self.seen = table.seen
        self.tag = table.tag
        self.backlog_pkts = table.backlog_pkts
        self.backlog_ts = table.backlog_ts
        self.cls = table.cls
        self.ring_pos = table.ring_pos
        self.pkt_cnt = table.pkt_cnt
        self.last_ts = table.last_ts
        self.win = table.win_counters
        self.ring_lens = store.lens
        self.ring_ipds = store.ipd_buckets
        self.tr_feature = tree.feature
        self.tr_threshold = tree.threshold
        self.tr_left = tree.left
        self.tr_right = tree.right
        self.tr_leaves = tree.leaves
        self.tr_root = tree.root
        self.tokens = bucket.tokens
        self.bucket_last = bucket.last_ns
        self.rate = bucket.token_rate
        self.cap = bucket.cap
        self.cost = bucket.cost
        self.prob_mode = _PROB_FORCE_ONE
        self.has_cells = 0
        self.t_step = self.c_step = 1.0
        self.p_n = self.p_q = self.p_v = 1.0
        self.t_bins = self.c_bins = 1
        self.g_lens = np.zeros(self.ring_size + 1, dtype=np.uint16)
        self.g_ipds = np.zeros(self.ring_size + 1, dtype=np.uint16)
        self.g_lens_v = self.g_lens
        self.g_ipds_v = self.g_ipds
        self.g_count = 0
        self.g_slot = -1
        self.g_tag = 0
        self.g_ts = 0
        self.g_index = -1

    def set_run_buffers(self, ts, slot, tag, length, uniforms, pred, src, granted):
        self.ts = ts
        self.slot = slot
        self.tags_in = tag
        self.length = length
        self.uniforms = uniforms
        self.pred = pred
        self.src = src
        self.granted = granted

    def set_probability(self, mode, cells, t_step, c_step, n, q, v):
        self.prob_mode = mode
        if cells is not None:
            self.cells = cells
            self.t_bins = cells.shape[0]
            self.c_bins = cells.shape[1]
            self.has_cells = 1
        else:
            self.has_cells = 0
        self.t_step = t_step
        self.c_step = c_step
        self.p_n = n
        self.p_q = q
        self.p_v = v

    cdef inline int _classify(self, long long pkt_len, long long ipd_ns) nogil:
        cdef int idx = self.tr_root
        cdef long long value
        while idx >= 0:
            if self.tr_feature[idx] == 0:
                value = pkt_len
            else:
                value = ipd_ns
            if value <= self.tr_threshold[idx]:
                idx = self.tr_left[idx]
            else:
                idx = self.tr_right[idx]
        return self.tr_leaves[-idx - 1]

    cdef inline double _probability(self, long long t, Py_ssize_t slot) nogil:
        cdef double elapsed_s, backlog, qt, nc, p
        cdef Py_ssize_t ti, ci
        if self.prob_mode == _PROB_FORCE_ONE:
            return 1.0
        elapsed_s = (t - self.backlog_ts[slot]) * 1e-9
        backlog = <double>self.backlog_pkts[slot]
        if self.prob_mode == _PROB_TABLE:
            ti = <Py_ssize_t>(elapsed_s / self.t_step)
            if ti >= self.t_bins:
                ti = self.t_bins - 1
            ci = <Py_ssize_t>(backlog / self.c_step)
            if ci >= self.c_bins:
                ci = self.c_bins - 1
            return self.cells[ti, ci]
        # exact piecewise model, same operation order as the Python reference
        qt = self.p_q * elapsed_s
        nc = self.p_n * backlog
        if qt == nc:
            return 1.0 if elapsed_s >= self.p_n / self.p_v else 0.0
        if qt > nc:
            p = backlog * (self.p_v * elapsed_s - self.p_n) / (qt - nc)
        else:
            p = elapsed_s * (self.p_v * backlog - self.p_q) / (nc - qt)
        if p < 0.0:
            return 0.0
        if p > 1.0:
            return 1.0
        return p

    def advance(self, Py_ssize_t i, Py_ssize_t n_pkts, long long t_stop,
                long long window_end):
        cdef long long t, last, gap_ns, ipd_ns, prev
        cdef Py_ssize_t slot
        cdef unsigned long long tag
        cdef int pkt_len, ring_pos, ipd_b, pred, srcv, ring_size, stored, newest, k, idx
        cdef double prob, refill, bucket
        cdef bint grant
        ring_size = self.ring_size
        while i < n_pkts:
            t = self.ts[i]
            if t >= t_stop:
                return i, _REASON_DONE
            if t >= window_end:
                return i, _REASON_WINDOW
            slot = <Py_ssize_t>self.slot[i]
            tag = self.tags_in[i]
            pkt_len = self.length[i]

            # lookup_or_insert_hashed (the window seen-bit survives evictions)
            if not (self.occupied[slot] and self.tag[slot] == tag):
                self.occupied[slot] = 1
                self.tag[slot] = tag
                self.backlog_pkts[slot] = 0
                self.backlog_ts[slot] = t
                self.cls[slot] = -1
                self.ring_pos[slot] = 0
                self.pkt_cnt[slot] = 0
                self.last_ts[slot] = -1
            if not self.seen[slot]:
                self.seen[slot] = 1
                self.win[0] += 1

            # record_packet
            prev = self.last_ts[slot]
            ipd_ns = 0 if prev < 0 else t - prev
            self.last_ts[slot] = t
            self.pkt_cnt[slot] += 1
            self.backlog_pkts[slot] += 1
            ring_pos = self.ring_pos[slot]
            ring_pos = 1 if ring_pos == ring_size else ring_pos + 1
            self.ring_pos[slot] = ring_pos
            self.win[1] += 1
            ipd_b = _ipd_bucket(ipd_ns)

            # forwarding decision: stored class, else the fallback tree
            if self.cls[slot] >= 0:
                pred = self.cls[slot]
                srcv = 1
            else:
                pred = self._classify(pkt_len, ipd_ns)
                srcv = 0
            self.pred[i] = <i16>pred
            self.src[i] = <u8>srcv

            prob = self._probability(t, slot)

            # token bucket step (same float order as TokenBucket.step)
            last = self.bucket_last[0]
            if last == 0:
                gap_ns = 0
            else:
                if t < last:
                    raise ClockError(f"time regressed: {t} < {last}")
                gap_ns = t - last
            self.bucket_last[0] = t
            refill = gap_ns * 1e-9 * self.rate * self.cost
            bucket = self.tokens[0] + refill
            if bucket > self.cap:
                bucket = self.cap
            grant = self.uniforms[i] < prob and bucket >= self.cost
            if grant:
                bucket -= self.cost
            self.tokens[0] = bucket
            self.granted[i] = 1 if grant else 0

            if grant:
                stored = <int>(self.pkt_cnt[slot] - 1)
                if stored > ring_size:
                    stored = ring_size
                newest = ring_size if ring_pos == 1 else ring_pos - 1
                for k in range(stored):
                    idx = (newest - stored + k) % ring_size
                    if idx < 0:
                        idx += ring_size
                    self.g_lens_v[k] = self.ring_lens[slot, idx]
                    self.g_ipds_v[k] = self.ring_ipds[slot, idx]
                self.g_lens_v[stored] = <u16>pkt_len
                self.g_ipds_v[stored] = <u16>ipd_b
                self.g_count = stored + 1
                self.g_slot = slot
                self.g_tag = tag
                self.g_ts = t
                self.g_index = i
                # on_feature_sent
                self.backlog_pkts[slot] = 0
                self.backlog_ts[slot] = t

            # push the current feature into the ring
            self.ring_lens[slot, ring_pos - 1] = <u16>pkt_len
            self.ring_ipds[slot, ring_pos - 1] = <u16>ipd_b
            i += 1
            if grant:
                return i, _REASON_GRANT
        return i, _REASON_DONE


# -- packed integer inference -------------------------------------------------

cdef class _PackedInfer:
    cdef i64[:, ::1] meta  # kind, act, frac, act_frac, in_dim, d0, d1, d2
    cdef i64[::1] w_off
    cdef i64[::1] b_off
    cdef i64[::1] b_len
    cdef i8[::1] weights
    cdef i32[::1] biases
    cdef int n_layers, seq_len, len_bucket, len_vocab, ipd_vocab
    cdef i64[:, ::1] buf_a
    cdef i64[:, ::1] buf_b

    def __init__(self, meta, w_off, b_off, b_len, weights, biases,
                 seq_len, len_bucket, len_vocab, ipd_vocab, max_seq, max_ch):
        self.meta = meta
        self.w_off = w_off
        self.b_off = b_off
        self.b_len = b_len
        self.weights = weights
        self.biases = biases
        self.n_layers = meta.shape[0]
        self.seq_len = seq_len
        self.len_bucket = len_bucket
        self.len_vocab = len_vocab
        self.ipd_vocab = ipd_vocab
        rows = max(max_seq, 2)  # the recurrent path needs two scratch rows
        cols = max(max_ch, 2)
        self.buf_a = np.zeros((rows, cols), dtype=np.int64)
        self.buf_b = np.zeros((rows, cols), dtype=np.int64)

    cdef inline long long _requant(self, long long acc, int shift, int relu) nogil:
        cdef long long half, mag, out
        if shift > 0:
            half = <long long>1 << (shift - 1)
            mag = (acc if acc >= 0 else -acc) + half
            mag >>= shift
            out = mag if acc > 0 else (-mag if acc < 0 else 0)
        elif shift < 0:
            out = acc << (-shift)
        else:
            out = acc
        if relu and out < 0:
            out = 0
        if out > 127:
            out = 127
        elif out < -128:
            out = -128
        return out

    def __call__(self, features):
        lens_arr, ipds_arr = features
        cdef u16[::1] lens = np.ascontiguousarray(lens_arr, dtype=np.uint16)
        cdef u16[::1] ipds = np.ascontiguousarray(ipds_arr, dtype=np.uint16)
        return self._run(lens, ipds)

    cdef int _run(self, u16[::1] lens, u16[::1] ipds):
        cdef i64[:, ::1] xs = self.buf_a
        cdef i64[:, ::1] nxt = self.buf_b
        cdef i64[:, ::1] tmp
        cdef Py_ssize_t pos, o, kk, ci, j, t
        cdef int count, offset, li, pi, seq, ch, in_f
        cdef int kind, act, frac, act_frac, in_dim, d0, d1, d2
        cdef int out_ch, kernel, in_ch, hidden, out_dim, shift, sx, sh, f_h
        cdef long long acc, accx, acch, wbase, best
        cdef int best_cls, d_len, d_ipd
        cdef long long n_feat = lens.shape[0]

        seq = self.seq_len
        # encode (keep the most recent seq_len features, pad with index 0)
        count = <int>n_feat
        offset = 0
        if count > seq:
            offset = count - seq
            count = seq
        d_len = <int>self.meta[0, 6]
        d_ipd = <int>self.meta[1, 6]
        ch = d_len + d_ipd
        wbase = self.w_off[0]
        for pos in range(seq):
            if pos < count:
                if lens[offset + pos] == 0 and ipds[offset + pos] == 0:
                    li = 0
                    pi = 0
                else:
                    li = <int>lens[offset + pos] // self.len_bucket
                    if li > self.len_vocab - 2:
                        li = self.len_vocab - 2
                    li += 1
                    pi = <int>ipds[offset + pos]
                    if pi > self.ipd_vocab - 2:
                        pi = self.ipd_vocab - 2
                    pi += 1
            else:
                li = 0
                pi = 0
            for j in range(d_len):
                xs[pos, j] = self.weights[self.w_off[0] + li * d_len + j]
            for j in range(d_ipd):
                xs[pos, d_len + j] = self.weights[self.w_off[1] + pi * d_ipd + j]
        in_f = <int>self.meta[0, 3]

        for t in range(2, self.n_layers):
            kind = <int>self.meta[t, 0]
            act = <int>self.meta[t, 1]
            frac = <int>self.meta[t, 2]
            act_frac = <int>self.meta[t, 3]
            in_dim = <int>self.meta[t, 4]
            d0 = <int>self.meta[t, 5]
            d1 = <int>self.meta[t, 6]
            d2 = <int>self.meta[t, 7]
            wbase = self.w_off[t]
            if kind == 2:  # conv1d: d0 out_ch, d1 kernel, d2 in_ch
                out_ch = d0
                kernel = d1
                in_ch = d2
                shift = frac + in_f - act_frac
                for pos in range(seq - kernel + 1):
                    for o in range(out_ch):
                        acc = self.biases[self.b_off[t] + o] if self.b_len[t] else 0
                        for kk in range(kernel):
                            for ci in range(in_ch):
                                acc += (<long long>self.weights[
                                            wbase + (o * kernel + kk) * in_ch + ci]
                                        * xs[pos + kk, ci])
                        nxt[pos, o] = self._requant(acc, shift, act)
                tmp = xs
                xs = nxt
                nxt = tmp
                seq = seq - kernel + 1
                ch = out_ch
                in_f = act_frac
            elif kind == 3:  # rnn: weights are [hidden, in_dim + hidden]
                hidden = d0
                f_h = act_frac
                sx = f_h - in_f if f_h > in_f else 0
                sh = in_f - f_h if in_f > f_h else 0
                shift = frac + (in_f if in_f > f_h else f_h) - f_h
                for j in range(hidden):
                    nxt[0, j] = 0
                for pos in range(seq):
                    for o in range(hidden):
                        accx = 0
                        acch = 0
                        for j in range(in_dim):
                            accx += (<long long>self.weights[
                                         wbase + o * (in_dim + hidden) + j]
                                     * xs[pos, j])
                        for j in range(hidden):
                            acch += (<long long>self.weights[
                                         wbase + o * (in_dim + hidden) + in_dim + j]
                                     * nxt[0, j])
                        acc = (accx << sx) + (acch << sh)
                        if self.b_len[t]:
                            acc += self.biases[self.b_off[t] + o]
                        nxt[1, o] = self._requant(acc, shift, act)
                    for j in range(hidden):
                        nxt[0, j] = nxt[1, j]
                for j in range(hidden):
                    xs[0, j] = nxt[0, j]
                seq = 1
                ch = hidden
                in_f = act_frac
            else:  # fc: d0 out, d1 in; xs is row-major so flatten is direct
                out_dim = d0
                if t == self.n_layers - 1:
                    best = 0
                    best_cls = 0
                    for o in range(out_dim):
                        acc = self.biases[self.b_off[t] + o] if self.b_len[t] else 0
                        for pos in range(seq):
                            for ci in range(ch):
                                acc += (<long long>self.weights[
                                            wbase + o * d1 + pos * ch + ci]
                                        * xs[pos, ci])
                        if o == 0 or acc > best:
                            best = acc
                            best_cls = o
                    return best_cls
                shift = frac + in_f - act_frac
                for o in range(out_dim):
                    acc = self.biases[self.b_off[t] + o] if self.b_len[t] else 0
                    for pos in range(seq):
                        for ci in range(ch):
                            acc += (<long long>self.weights[
                                        wbase + o * d1 + pos * ch + ci]
                                    * xs[pos, ci])
                    nxt[0, o] = self._requant(acc, shift, act)
                tmp = xs
                xs = nxt
                nxt = tmp
                seq = 1
                ch = out_dim
                in_f = act_frac
        raise RuntimeError("model did not end in a dense layer")


_KIND_CODES = {"embedding": 0, "fc": 1, "conv1d": 2, "rnn": 3}


def make_infer(qm):
    """Pack a quantized model into flat arrays and return a C classifier."""
    n_layers = len(qm.layers)
    meta = np.zeros((n_layers, 8), dtype=np.int64)
    w_off = np.zeros(n_layers, dtype=np.int64)
    b_off = np.zeros(n_layers, dtype=np.int64)
    b_len = np.zeros(n_layers, dtype=np.int64)
    w_parts, b_parts = [], []
    w_total = b_total = 0
    enc = qm.encoding
    max_seq, max_ch = qm.seq_len, 1
    seq, ch = qm.seq_len, 0
    for t, layer in enumerate(qm.layers):
        shape = layer.weights.shape
        meta[t, 0] = _KIND_CODES[layer.kind]
        meta[t, 1] = 1 if layer.act == "relu" else 0
        meta[t, 2] = layer.frac_bits
        meta[t, 3] = layer.act_frac_bits
        meta[t, 4] = layer.in_dim
        dims = list(shape) + [0] * (3 - len(shape))
        meta[t, 5], meta[t, 6], meta[t, 7] = dims
        w_off[t] = w_total
        flat = np.ascontiguousarray(layer.weights, dtype=np.int8).ravel()
        w_parts.append(flat)
        w_total += flat.size
        if layer.bias is not None and len(layer.bias):
            b_off[t] = b_total
            b_len[t] = len(layer.bias)
            b_parts.append(np.ascontiguousarray(layer.bias, dtype=np.int32))
            b_total += len(layer.bias)
        # track scratch extents
        if layer.kind == "embedding":
            ch += shape[1]
        elif layer.kind == "conv1d":
            seq = seq - shape[1] + 1
            ch = shape[0]
        elif layer.kind == "rnn":
            seq, ch = 1, shape[0]
        else:
            seq, ch = 1, shape[0]
        max_seq = max(max_seq, seq)
        max_ch = max(max_ch, ch, 2)
    weights = (np.concatenate(w_parts) if w_parts
               else np.zeros(0, dtype=np.int8))
    biases = (np.concatenate(b_parts) if b_parts
              else np.zeros(0, dtype=np.int32))
    return _PackedInfer(meta, w_off, b_off, b_len, weights, biases,
                        qm.seq_len, enc.len_bucket, enc.len_vocab,
                        enc.ipd_vocab, max_seq, max_ch)
