"""Reference models and the default fallback tree.

Both reference networks classify the synthetic length-band task by
construction: the length embedding one-hots a flow's band onto a class
channel, identity convolutions (first-tap) or an identity recurrent cell
carry the channels through, and the dense head sums each class channel. All
weights are exact in both float and INT8 form, so their behavior is known
analytically: argmax equals the majority band of the input sequence.

The fallback tree is deliberately coarse (it merges adjacent bands), leaving
visible headroom between tree-only and model-backed classification.
"""

from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np

from .flow_tracker import DecisionTree
from .inference_engine import EncodedInput, encode_sequence
from .quantizer import (EncodingSpec, FloatLayer, FloatModel, QuantizedModel,
                        quantize_model)
from .trace_io import DEFAULT_LENGTH_BANDS

DEFAULT_ENCODING = EncodingSpec(len_bucket=64, len_vocab=32, ipd_vocab=32)
DEFAULT_SEQ_LEN = 9  # ring of 8 plus the current packet's feature


def band_of_length(pkt_len: int, bands: Sequence[Tuple[int, int]] = DEFAULT_LENGTH_BANDS) -> int:
    """Class of a packet length, or -1 outside every band."""
    for k, (lo, hi) in enumerate(bands):
        if lo <= pkt_len < hi:
            return k
    return -1


def _band_embedding(scale: float, dim: int, enc: EncodingSpec,
                    bands: Sequence[Tuple[int, int]]) -> np.ndarray:
    """Length-embedding table mapping each band's index range onto one
    class channel with value `scale`; PAD and out-of-band rows stay zero."""
    table = np.zeros((enc.len_vocab, dim))
    for idx in range(1, enc.len_vocab):
        # idx covers lengths [ (idx-1)*bucket, idx*bucket ) up to the clamp
        rep_len = (idx - 1) * enc.len_bucket
        band = band_of_length(rep_len, bands)
        if band >= 0:
            table[idx, band] = scale
    return table


def _identity_conv(ch: int, kernel: int = 3) -> np.ndarray:
    """First-tap identity kernel: output position t copies input position t,
    so early positions survive valid-mode shrinkage even in padded tails."""
    w = np.zeros((ch, kernel, ch))
    for c in range(ch):
        w[c, 0, c] = 1.0
    return w


def calibration_batch(enc: EncodingSpec = DEFAULT_ENCODING,
                      seq_len: int = DEFAULT_SEQ_LEN,
                      bands: Sequence[Tuple[int, int]] = DEFAULT_LENGTH_BANDS,
                      ) -> List[EncodedInput]:
    """Small activation-calibration set: full and partial single-band
    sequences plus a mixed one."""
    out = []
    for lo, hi in bands:
        for length in (lo, (lo + hi) // 2, hi - 1):
            feats = [(length, k % 16) for k in range(seq_len)]
            out.append(encode_sequence(feats, enc, seq_len))
            out.append(encode_sequence(feats[:2], enc, seq_len))
    mixed = [((lo + hi) // 2, 3) for lo, hi in bands]
    out.append(encode_sequence(mixed, enc, seq_len))
    return out


def _widening_conv(in_ch: int, out_ch: int, kernel: int = 3) -> np.ndarray:
    """First-tap kernel that copies the input channels into the first
    `in_ch` output channels; extra output channels stay silent."""
    w = np.zeros((out_ch, kernel, in_ch))
    for c in range(in_ch):
        w[c, 0, c] = 1.0
    return w


def reference_cnn(bands: Sequence[Tuple[int, int]] = DEFAULT_LENGTH_BANDS,
                  enc: EncodingSpec = DEFAULT_ENCODING,
                  seq_len: int = DEFAULT_SEQ_LEN) -> Tuple[FloatModel, QuantizedModel]:
    """Three convolutions (16 -> 32 -> 64 -> 64 channels) and a two-layer
    dense head. The convolutions carry the band channels through untouched,
    so logits count band hits among the earliest sequence positions."""
    num_classes = len(bands)
    d_emb = 8  # per-embedding width; band channels are the first len(bands)
    ch = 2 * d_emb
    widths = (2 * ch, 4 * ch, 4 * ch)
    out_positions = seq_len - 6  # three valid k=3 convolutions
    fc1_out = 32
    fc1_w = np.zeros((fc1_out, out_positions * widths[2]))
    for cls in range(num_classes):
        fc1_w[cls, cls::widths[2]] = 1.0  # sum channel `cls` across positions
    fc2_w = np.zeros((num_classes, fc1_out))
    fc2_w[:, :num_classes] = np.eye(num_classes)
    fm = FloatModel(
        seq_len=seq_len,
        encoding=enc,
        layers=[
            FloatLayer("embedding", _band_embedding(0.5, d_emb, enc, bands)),
            FloatLayer("embedding", np.zeros((enc.ipd_vocab, d_emb))),
            FloatLayer("conv1d", _widening_conv(ch, widths[0]),
                       bias=np.zeros(widths[0]), act="relu"),
            FloatLayer("conv1d", _widening_conv(widths[0], widths[1]),
                       bias=np.zeros(widths[1]), act="relu"),
            FloatLayer("conv1d", _widening_conv(widths[1], widths[2]),
                       bias=np.zeros(widths[2]), act="relu"),
            FloatLayer("fc", fc1_w, bias=np.zeros(fc1_out), act="relu"),
            FloatLayer("fc", fc2_w, bias=np.zeros(num_classes)),
        ],
    )
    qm = quantize_model(fm, calibration_batch(enc, seq_len, bands))
    return fm, qm


def reference_rnn(bands: Sequence[Tuple[int, int]] = DEFAULT_LENGTH_BANDS,
                  enc: EncodingSpec = DEFAULT_ENCODING,
                  seq_len: int = DEFAULT_SEQ_LEN) -> Tuple[FloatModel, QuantizedModel]:
    """Identity recurrent cell accumulating band counts into the hidden
    state; classification reads the final hidden state."""
    num_classes = len(bands)
    d_emb = 8
    ch = 2 * d_emb
    rnn_w = np.hstack([np.eye(ch), np.eye(ch)])  # Wx | Wh
    fc_w = np.zeros((num_classes, ch))
    fc_w[:, :num_classes] = np.eye(num_classes)
    fm = FloatModel(
        seq_len=seq_len,
        encoding=enc,
        layers=[
            FloatLayer("embedding", _band_embedding(0.25, d_emb, enc, bands)),
            FloatLayer("embedding", np.zeros((enc.ipd_vocab, d_emb))),
            FloatLayer("rnn", rnn_w, bias=np.zeros(ch), act="relu", in_dim=ch),
            FloatLayer("fc", fc_w, bias=np.zeros(num_classes)),
        ],
    )
    qm = quantize_model(fm, calibration_batch(enc, seq_len, bands))
    return fm, qm


def default_tree(bands: Sequence[Tuple[int, int]] = DEFAULT_LENGTH_BANDS) -> DecisionTree:
    """Depth-1 fallback: splits the band range in half, so it is right for
    roughly half the classes — good enough pre-inference, visibly worse
    than the model."""
    mid = len(bands) // 2
    threshold = bands[mid][0] - 1
    return DecisionTree(
        feature=[0],  # pkt_len
        threshold=[threshold],
        left=[-1],
        right=[-2],
        leaves=[0, mid],
        root=0,
    )
