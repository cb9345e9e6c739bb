"""Integer forward passes over quantized models, plus the float oracle.

All arithmetic on the quantized path is plain integers: int8 operands,
wide accumulation, then a requantize step that shifts back to the output
scale with half-away-from-zero rounding, optional ReLU, and an int8 clamp.
Accumulation order is fixed (ascending input index) so results are
bit-reproducible everywhere; dimensions whose worst case could leave int32
are rejected at load time.

The recurrent cell is Elman-style with ReLU: the input and recurrent
products are shift-aligned to a common scale before summing, i.e.

    acc = (Wx.x << max(0, f_h - f_x)) + (Wh.h << max(0, f_x - f_h)) + b

with the bias at that aligned scale and requantization back to f_h.

A throughput-style latency estimate for a systolic array is included:
cycles = sum over layers of ceil(MACs / array_width^2) + a pipeline
constant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .buffer_manager import ipd_log_bucket
from .errors import DomainError, ModelShapeError
from .quantizer import EncodingSpec, FloatModel, QuantizedModel
from .trace_io import FeatureVector

# Systolic-array defaults, calibrated so the reference CNN lands at 1.2 us
# per inference at a 300 MHz model clock (331 compute + 29 pipeline cycles).
DEFAULT_ARRAY_WIDTH = 16
DEFAULT_PIPELINE_CYCLES = 29


@dataclass(frozen=True)
class EncodedInput:
    """Embedding indices per sequence position; index 0 is PAD."""

    len_ids: np.ndarray
    ipd_ids: np.ndarray


@dataclass(frozen=True)
class Logits:
    """Raw output accumulators plus the scale to read them at."""

    values: np.ndarray  # int32 per class
    act_frac_bits: int

    def as_float(self) -> np.ndarray:
        return self.values.astype(np.float64) / float(1 << self.act_frac_bits)


# -- input encoding ----------------------------------------------------------


def encode_bucketed(pkt_len: int, ipd_bucket: int, enc: EncodingSpec) -> Tuple[int, int]:
    """Indices for a wire-form feature (raw length, log-bucketed delay)."""
    if pkt_len == 0 and ipd_bucket == 0:
        return 0, 0  # PAD
    len_idx = 1 + min(pkt_len // enc.len_bucket, enc.len_vocab - 2)
    ipd_idx = 1 + min(ipd_bucket, enc.ipd_vocab - 2)
    return len_idx, ipd_idx


def encode_input(fv: FeatureVector, enc: EncodingSpec) -> Tuple[int, int]:
    """Indices for a raw feature; PAD (0, 0) maps to (0, 0)."""
    if fv.pkt_len == 0 and fv.ipd_ns == 0:
        return 0, 0
    return encode_bucketed(fv.pkt_len, ipd_log_bucket(fv.ipd_ns), enc)


def encode_sequence(features: Sequence, enc: EncodingSpec, seq_len: int) -> EncodedInput:
    """Encode a feature sequence, zero-padded (or truncated to the most
    recent entries) to exactly `seq_len` positions.

    Accepts FeatureVector items or (pkt_len, ipd_bucket) wire pairs.
    """
    if len(features) > seq_len:
        features = features[len(features) - seq_len :]
    len_ids = np.zeros(seq_len, dtype=np.int64)
    ipd_ids = np.zeros(seq_len, dtype=np.int64)
    for i, item in enumerate(features):
        if isinstance(item, FeatureVector):
            li, pi = encode_input(item, enc)
        else:
            li, pi = encode_bucketed(int(item[0]), int(item[1]), enc)
        len_ids[i] = li
        ipd_ids[i] = pi
    return EncodedInput(len_ids=len_ids, ipd_ids=ipd_ids)


# -- integer layer primitives ------------------------------------------------


def embedding_lookup(table: np.ndarray, idx: int) -> np.ndarray:
    """Row copy; pure."""
    if not 0 <= idx < table.shape[0]:
        raise DomainError(f"embedding index {idx} outside vocab {table.shape[0]}")
    return table[idx].copy()


def requantize(acc: np.ndarray, shift: int, relu: bool) -> np.ndarray:
    """Scale an accumulator back to int8: arithmetic shift with
    half-away-from-zero rounding (left shift if negative), optional ReLU,
    clamp to [-128, 127]."""
    acc = np.asarray(acc, dtype=np.int64)
    if shift > 0:
        half = 1 << (shift - 1)
        out = np.sign(acc) * ((np.abs(acc) + half) >> shift)
    elif shift < 0:
        out = acc << (-shift)
    else:
        out = acc.copy()
    if relu:
        np.maximum(out, 0, out)
    return np.clip(out, -128, 127).astype(np.int8)


def _accumulate_fc(layer, x: np.ndarray) -> np.ndarray:
    w = layer.weights.astype(np.int64)
    acc = w @ x.astype(np.int64)
    if layer.bias is not None:
        acc = acc + layer.bias.astype(np.int64)
    return acc


def fc_forward(layer, x: np.ndarray, in_frac_bits: int) -> np.ndarray:
    """Dense layer: int accumulate, requantize to the layer's output scale."""
    if x.shape[0] != layer.weights.shape[1]:
        raise ModelShapeError(
            f"fc expects {layer.weights.shape[1]} inputs, got {x.shape[0]}"
        )
    acc = _accumulate_fc(layer, x)
    shift = layer.frac_bits + in_frac_bits - layer.act_frac_bits
    return requantize(acc, shift, layer.act == "relu")


def conv1d_forward(layer, xs: np.ndarray, in_frac_bits: int) -> np.ndarray:
    """Valid-mode 1-D convolution over the sequence axis; channels are the
    vector dimension. Same accumulate/requantize contract as fc_forward."""
    out_ch, kernel, in_ch = layer.weights.shape
    seq, ch = xs.shape
    if ch != in_ch:
        raise ModelShapeError(f"conv1d expects {in_ch} channels, got {ch}")
    if seq < kernel:
        raise ModelShapeError(f"sequence {seq} shorter than kernel {kernel}")
    w = layer.weights.reshape(out_ch, kernel * in_ch).astype(np.int64)
    out_len = seq - kernel + 1
    acc = np.empty((out_len, out_ch), dtype=np.int64)
    xs64 = xs.astype(np.int64)
    for t in range(out_len):
        window = xs64[t : t + kernel].reshape(kernel * in_ch)
        acc[t] = w @ window
    if layer.bias is not None:
        acc = acc + layer.bias.astype(np.int64)[None, :]
    shift = layer.frac_bits + in_frac_bits - layer.act_frac_bits
    return requantize(acc, shift, layer.act == "relu")


def rnn_step(layer, h: np.ndarray, x: np.ndarray, in_frac_bits: int) -> np.ndarray:
    """One recurrent update; see the module docstring for the alignment."""
    hidden = layer.weights.shape[0]
    if x.shape[0] != layer.in_dim or h.shape[0] != hidden:
        raise ModelShapeError("rnn input/hidden width mismatch")
    wx = layer.weights[:, : layer.in_dim].astype(np.int64)
    wh = layer.weights[:, layer.in_dim :].astype(np.int64)
    f_h = layer.act_frac_bits
    sx = max(0, f_h - in_frac_bits)
    sh = max(0, in_frac_bits - f_h)
    acc = ((wx @ x.astype(np.int64)) << sx) + ((wh @ h.astype(np.int64)) << sh)
    if layer.bias is not None:
        acc = acc + layer.bias.astype(np.int64)
    shift = layer.frac_bits + max(in_frac_bits, f_h) - f_h
    return requantize(acc, shift, layer.act == "relu")


# -- whole-model forward ------------------------------------------------------


def _embed(qm_or_fm, enc_in: EncodedInput) -> np.ndarray:
    len_table = qm_or_fm.layers[0].weights
    ipd_table = qm_or_fm.layers[1].weights
    rows = [
        np.concatenate([embedding_lookup(len_table, int(li)),
                        embedding_lookup(ipd_table, int(pi))])
        for li, pi in zip(enc_in.len_ids, enc_in.ipd_ids)
    ]
    return np.stack(rows)


def infer_encoded(qm: QuantizedModel, enc_in: EncodedInput) -> Tuple[int, Logits]:
    """Quantized forward pass; argmax ties break toward the lowest class."""
    xs = _embed(qm, enc_in)  # int8 [seq, ch]
    in_f = qm.layers[0].act_frac_bits
    last = len(qm.layers) - 1
    vec = None  # set once the sequence collapses
    for li in range(2, len(qm.layers)):
        layer = qm.layers[li]
        if layer.kind == "conv1d":
            xs = conv1d_forward(layer, xs, in_f)
        elif layer.kind == "rnn":
            h = np.zeros(layer.weights.shape[0], dtype=np.int8)
            for t in range(xs.shape[0]):
                h = rnn_step(layer, h, xs[t], in_f)
            vec = h
        else:  # fc
            x = vec if vec is not None else xs.reshape(-1)
            if li == last:
                acc = _accumulate_fc(layer, x.astype(np.int64))
                logits = Logits(
                    values=acc.astype(np.int32),
                    act_frac_bits=layer.frac_bits + in_f,
                )
                return int(np.argmax(logits.values)), logits
            vec = fc_forward(layer, x, in_f)
        in_f = layer.act_frac_bits
    raise ModelShapeError("model did not end in a dense layer")  # unreachable


def infer(qm: QuantizedModel, features: Sequence) -> Tuple[int, Logits]:
    """Classify a feature sequence (FeatureVectors or wire pairs)."""
    enc_in = encode_sequence(features, qm.encoding, qm.seq_len)
    return infer_encoded(qm, enc_in)


def _float_forward(fm: FloatModel, enc_in: EncodedInput, peaks=None) -> np.ndarray:
    xs = _embed(fm, enc_in).astype(np.float64)
    vec = None
    for li in range(2, len(fm.layers)):
        layer = fm.layers[li]
        if layer.kind == "conv1d":
            out_ch, kernel, in_ch = layer.weights.shape
            w = layer.weights.reshape(out_ch, kernel * in_ch)
            out = np.stack(
                [w @ xs[t : t + kernel].reshape(-1) for t in range(xs.shape[0] - kernel + 1)]
            )
            if layer.bias is not None:
                out = out + layer.bias[None, :]
            if layer.act == "relu":
                out = np.maximum(out, 0.0)
            xs = out
            latest = xs
        elif layer.kind == "rnn":
            wx = layer.weights[:, : layer.in_dim]
            wh = layer.weights[:, layer.in_dim :]
            h = np.zeros(layer.weights.shape[0], dtype=np.float64)
            for t in range(xs.shape[0]):
                h = wx @ xs[t] + wh @ h + (layer.bias if layer.bias is not None else 0.0)
                if layer.act == "relu":
                    h = np.maximum(h, 0.0)
            vec = h
            latest = vec
        else:
            x = vec if vec is not None else xs.reshape(-1)
            out = layer.weights @ x
            if layer.bias is not None:
                out = out + layer.bias
            if layer.act == "relu":
                out = np.maximum(out, 0.0)
            vec = out
            latest = vec
        if peaks is not None:
            peaks[li] = max(peaks[li], float(np.max(np.abs(latest))) if latest.size else 0.0)
    return vec


def float_reference_infer(fm: FloatModel, features: Sequence) -> Tuple[int, np.ndarray]:
    """The same pipeline in real arithmetic; the quantization-loss oracle."""
    enc_in = (
        features
        if isinstance(features, EncodedInput)
        else encode_sequence(features, fm.encoding, fm.seq_len)
    )
    logits = _float_forward(fm, enc_in)
    return int(np.argmax(logits)), logits


def float_reference_infer_encoded(fm: FloatModel, enc_in: EncodedInput):
    return float_reference_infer(fm, enc_in)


def calibrate_activations(fm: FloatModel, calib_inputs: Sequence[EncodedInput]):
    """Max |activation| per layer over a calibration batch (float pipeline)."""
    peaks = [0.0] * len(fm.layers)
    for enc_in in calib_inputs:
        _float_forward(fm, enc_in, peaks=peaks)
    return peaks


# -- latency ------------------------------------------------------------------


def layer_macs(layer, seq: int) -> Tuple[int, int]:
    """(MAC count, sequence length after the layer); embeddings are LUTs."""
    if layer.kind == "embedding":
        return 0, seq
    if layer.kind == "fc":
        out, inp = layer.weights.shape
        return out * inp, 0
    if layer.kind == "conv1d":
        out_ch, kernel, in_ch = layer.weights.shape
        out_len = seq - kernel + 1
        return out_len * out_ch * kernel * in_ch, out_len
    hidden = layer.weights.shape[0]
    return seq * hidden * (layer.in_dim + hidden), 0


def model_macs(model, batch: int = 1) -> int:
    seq = model.seq_len
    total = 0
    for layer in model.layers:
        macs, seq = layer_macs(layer, seq)
        total += macs
    return total * batch


def latency_model(model, clock_hz: float, batch: int = 1,
                  array_width: int = DEFAULT_ARRAY_WIDTH,
                  pipeline_cycles: int = DEFAULT_PIPELINE_CYCLES) -> float:
    """Inference latency in nanoseconds on an INT8 systolic array running at
    `clock_hz`: per-layer ceil(MACs / array_width^2) cycles plus a pipeline
    constant."""
    if clock_hz <= 0:
        raise DomainError("clock_hz must be > 0")
    pes = array_width * array_width
    seq = model.seq_len
    cycles = pipeline_cycles
    for layer in model.layers:
        macs, seq = layer_macs(layer, seq)
        cycles += -(-macs * batch // pes)  # ceil
    return cycles / clock_hz * 1e9
