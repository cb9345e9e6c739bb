"""Float-to-INT8 model conversion with per-layer fixed-point scales.

Scales are powers of two ("decimal point positions"): an int8 value q at
`frac_bits` f represents q / 2**f. Each layer picks the largest f in [0, 7]
that does not saturate its extremum; activation scales come the same way
from a calibration batch. Biases are int32 at the accumulator scale
(weight frac + input frac). Rounding is half-away-from-zero throughout.

Model structure is fixed at build time: a packet-length embedding and a
delay embedding (concatenated per position), then any stack of conv1d /
recurrent / fully-connected layers; the last layer's width is the class
count. Two interchange formats: a float JSON form and the quantized binary
form (magic ``FXQM``).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ModelFormatError, ModelShapeError

MAGIC = b"FXQM"
VERSION = 1

KINDS = ("embedding", "fc", "conv1d", "rnn")
_KIND_CODE = {k: i for i, k in enumerate(KINDS)}
ACTS = ("none", "relu")
_ACT_CODE = {a: i for i, a in enumerate(ACTS)}

INT32_MAX = 2**31 - 1


@dataclass(frozen=True)
class EncodingSpec:
    """Input encoding: length bucketing and vocab sizes; index 0 is PAD."""

    len_bucket: int = 64
    len_vocab: int = 32
    ipd_vocab: int = 32

    def __post_init__(self):
        if self.len_bucket < 1 or self.len_vocab < 2 or self.ipd_vocab < 2:
            raise ModelShapeError("bad encoding spec")


@dataclass
class FloatLayer:
    """One layer with real-valued parameters.

    Canonical weight shapes: embedding [vocab, dim]; fc [out, in];
    conv1d [out_ch, kernel, in_ch]; rnn [hidden, in_dim + hidden]
    (input columns first, recurrent columns after).
    """

    kind: str
    weights: np.ndarray
    bias: Optional[np.ndarray] = None
    act: str = "none"
    in_dim: int = 0  # rnn only

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelShapeError(f"unknown layer kind {self.kind!r}")
        if self.act not in ACTS:
            raise ModelShapeError(f"unknown activation {self.act!r}")
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)


@dataclass
class QuantLayer:
    kind: str
    weights: np.ndarray  # int8, same canonical shape as FloatLayer
    bias: Optional[np.ndarray]  # int32 at accumulator scale
    frac_bits: int  # weight scale, 0..7
    act_frac_bits: int  # output scale (accumulator scale on the last layer)
    act: str = "none"
    in_dim: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.int8)
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.int32)
        if not 0 <= self.frac_bits <= 7:
            raise ModelShapeError("frac_bits must be in 0..7")
        if not 0 <= self.act_frac_bits <= 255:
            raise ModelShapeError("act_frac_bits out of range")


def _check_structure(layers: Sequence, seq_len: int, encoding: EncodingSpec) -> None:
    """Validate that adjacent layer dimensions compose; raises ModelShapeError."""
    if seq_len < 1:
        raise ModelShapeError("seq_len must be >= 1")
    if len(layers) < 3:
        raise ModelShapeError("model needs two embeddings plus at least one layer")
    le, ie = layers[0], layers[1]
    if le.kind != "embedding" or ie.kind != "embedding":
        raise ModelShapeError("layers 0 and 1 must be the length and delay embeddings")
    if le.weights.shape[0] != encoding.len_vocab:
        raise ModelShapeError("length embedding vocab mismatch")
    if ie.weights.shape[0] != encoding.ipd_vocab:
        raise ModelShapeError("delay embedding vocab mismatch")
    seq, ch = seq_len, le.weights.shape[1] + ie.weights.shape[1]
    for layer in layers[2:]:
        if layer.kind == "embedding":
            raise ModelShapeError("embedding layers only allowed at the front")
        if layer.kind == "conv1d":
            if seq == 0:
                raise ModelShapeError("conv1d after the sequence was collapsed")
            out_ch, kernel, in_ch = layer.weights.shape
            if in_ch != ch:
                raise ModelShapeError(f"conv1d expects {in_ch} channels, pipeline has {ch}")
            if kernel > seq:
                raise ModelShapeError(f"conv1d kernel {kernel} exceeds sequence {seq}")
            seq, ch = seq - kernel + 1, out_ch
        elif layer.kind == "rnn":
            if seq == 0:
                raise ModelShapeError("rnn after the sequence was collapsed")
            hidden, packed = layer.weights.shape
            if layer.in_dim != ch or packed != layer.in_dim + hidden:
                raise ModelShapeError("rnn weight shape does not match pipeline width")
            seq, ch = 0, hidden
        elif layer.kind == "fc":
            out, inp = layer.weights.shape
            flat = seq * ch if seq else ch
            if inp != flat:
                raise ModelShapeError(f"fc expects {inp} inputs, pipeline has {flat}")
            seq, ch = 0, out
        if layer.bias is not None and len(layer.bias) != _bias_len(layer):
            raise ModelShapeError("bias length mismatch")
    if seq != 0 or layers[-1].kind != "fc":
        raise ModelShapeError("model must end with a dense output layer")


def _bias_len(layer) -> int:
    return layer.weights.shape[0]


@dataclass
class FloatModel:
    """Real-valued model plus its input contract."""

    seq_len: int
    encoding: EncodingSpec
    layers: List[FloatLayer]

    def __post_init__(self):
        _check_structure(self.layers, self.seq_len, self.encoding)

    @property
    def num_classes(self) -> int:
        return self.layers[-1].weights.shape[0]


@dataclass
class QuantizedModel:
    seq_len: int
    encoding: EncodingSpec
    layers: List[QuantLayer]

    def __post_init__(self):
        _check_structure(self.layers, self.seq_len, self.encoding)
        _check_accumulators(self.layers)

    @property
    def num_classes(self) -> int:
        return self.layers[-1].weights.shape[0]


def _check_accumulators(layers: Sequence[QuantLayer]) -> None:
    """Reject dimensions whose worst-case accumulator could leave int32."""
    in_f = layers[0].act_frac_bits  # embeddings share one scale
    for layer in layers[2:]:
        if layer.kind == "fc":
            taps = layer.weights.shape[1]
            worst = taps * 128 * 128
        elif layer.kind == "conv1d":
            _, kernel, in_ch = layer.weights.shape
            worst = kernel * in_ch * 128 * 128
        else:  # rnn: aligned input and recurrent terms
            hidden = layer.weights.shape[0]
            sx = max(0, layer.act_frac_bits - in_f)
            sh = max(0, in_f - layer.act_frac_bits)
            worst = (layer.in_dim << sx) * 128 * 128 + (hidden << sh) * 128 * 128
        if layer.bias is not None and len(layer.bias):
            worst += int(np.max(np.abs(layer.bias.astype(np.int64))))
        if worst > INT32_MAX:
            raise ModelShapeError(
                f"{layer.kind} accumulator bound {worst} exceeds int32"
            )
        in_f = layer.act_frac_bits


# -- scalar quantization ---------------------------------------------------


def choose_frac_bits(values) -> int:
    """Largest f in [0, 7] with max|v| * 2**f <= 127; 7 for all-zero input."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ModelShapeError("choose_frac_bits on empty array")
    peak = float(np.max(np.abs(arr)))
    if peak == 0.0:
        return 7
    for f in range(7, -1, -1):
        if peak * (1 << f) <= 127.0:
            return f
    return 0


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_tensor(values, frac_bits: int) -> np.ndarray:
    """Elementwise q = clamp(round_half_away(v * 2**f), -128, 127)."""
    if not 0 <= frac_bits <= 7:
        raise ModelShapeError("frac_bits must be in 0..7")
    arr = np.asarray(values, dtype=np.float64)
    q = round_half_away(arr * float(1 << frac_bits))
    return np.clip(q, -128, 127).astype(np.int8)


def _quantize_bias(values: np.ndarray, acc_frac: int) -> np.ndarray:
    q = round_half_away(values * float(1 << acc_frac))
    return np.clip(q, -INT32_MAX - 1, INT32_MAX).astype(np.int32)


def quantize_model(fm: FloatModel, calib_inputs: Sequence) -> QuantizedModel:
    """Quantize with activation scales calibrated on `calib_inputs`
    (encoded index sequences, see inference_engine.encode_sequence)."""
    if not calib_inputs:
        raise ModelShapeError("calibration batch must be non-empty")
    from . import inference_engine  # deferred: engine imports our types

    act_peaks = inference_engine.calibrate_activations(fm, calib_inputs)

    # Both embeddings feed one accumulator, so they share a scale.
    emb_f = choose_frac_bits(
        np.concatenate([fm.layers[0].weights.ravel(), fm.layers[1].weights.ravel()])
    )
    out: List[QuantLayer] = []
    for emb in fm.layers[:2]:
        out.append(
            QuantLayer(
                kind="embedding",
                weights=quantize_tensor(emb.weights, emb_f),
                bias=None,
                frac_bits=emb_f,
                act_frac_bits=emb_f,
                act="none",
            )
        )
    in_f = emb_f
    last = len(fm.layers) - 1
    for li in range(2, len(fm.layers)):
        layer = fm.layers[li]
        w_f = choose_frac_bits(layer.weights)
        if li == last:
            act_f = w_f + in_f  # logits stay at accumulator scale
        else:
            act_f = choose_frac_bits([act_peaks[li]])
        if layer.kind == "rnn":
            # input and recurrent terms are shift-aligned before summing
            acc_f = w_f + max(in_f, act_f)
        else:
            acc_f = w_f + in_f
        bias = layer.bias
        qbias = _quantize_bias(bias, acc_f) if bias is not None else None
        out.append(
            QuantLayer(
                kind=layer.kind,
                weights=quantize_tensor(layer.weights, w_f),
                bias=qbias,
                frac_bits=w_f,
                act_frac_bits=act_f,
                act=layer.act,
                in_dim=layer.in_dim,
            )
        )
        in_f = act_f
    return QuantizedModel(seq_len=fm.seq_len, encoding=fm.encoding, layers=out)


# -- binary quantized-model format ------------------------------------------


def _dims_of(layer) -> Tuple[int, ...]:
    s = layer.weights.shape
    if layer.kind == "embedding":
        return s  # vocab, dim
    if layer.kind == "fc":
        return s  # out, in
    if layer.kind == "conv1d":
        return s  # out_ch, kernel, in_ch
    return (layer.in_dim, s[0])  # rnn: in_dim, hidden


_DIM_COUNT = {"embedding": 2, "fc": 2, "conv1d": 3, "rnn": 2}


def write_model(path, qm: QuantizedModel) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HH", VERSION, len(qm.layers)))
        enc = qm.encoding
        fh.write(struct.pack("<HHHH", qm.seq_len, enc.len_bucket,
                             enc.len_vocab, enc.ipd_vocab))
        for layer in qm.layers:
            dims = _dims_of(layer)
            fh.write(struct.pack("<B", _KIND_CODE[layer.kind]))
            fh.write(struct.pack(f"<{len(dims)}H", *dims))
            fh.write(struct.pack("<BBB", layer.frac_bits, layer.act_frac_bits,
                                 _ACT_CODE[layer.act]))
            fh.write(layer.weights.astype("<i1").tobytes(order="C"))
            bias = layer.bias if layer.bias is not None else np.zeros(0, np.int32)
            fh.write(struct.pack("<I", len(bias)))
            fh.write(bias.astype("<i4").tobytes())


def _take(fh, n: int) -> bytes:
    blob = fh.read(n)
    if len(blob) != n:
        raise ModelFormatError("model file truncated")
    return blob


def read_model(path) -> QuantizedModel:
    with open(path, "rb") as fh:
        if _take(fh, 4) != MAGIC:
            raise ModelFormatError("bad magic; not a quantized model file")
        version, n_layers = struct.unpack("<HH", _take(fh, 4))
        if version != VERSION:
            raise ModelFormatError(f"unsupported model version {version}")
        seq_len, len_bucket, len_vocab, ipd_vocab = struct.unpack("<HHHH", _take(fh, 8))
        encoding = EncodingSpec(len_bucket, len_vocab, ipd_vocab)
        layers: List[QuantLayer] = []
        for _ in range(n_layers):
            (code,) = struct.unpack("<B", _take(fh, 1))
            if code >= len(KINDS):
                raise ModelFormatError(f"unknown layer kind code {code}")
            kind = KINDS[code]
            nd = _DIM_COUNT[kind]
            dims = struct.unpack(f"<{nd}H", _take(fh, 2 * nd))
            frac, act_frac, act_code = struct.unpack("<BBB", _take(fh, 3))
            if act_code >= len(ACTS):
                raise ModelFormatError(f"unknown activation code {act_code}")
            if kind == "embedding":
                shape: Tuple[int, ...] = dims
                in_dim = 0
            elif kind == "fc":
                shape = dims
                in_dim = 0
            elif kind == "conv1d":
                shape = dims
                in_dim = 0
            else:
                in_dim, hidden = dims
                shape = (hidden, in_dim + hidden)
            count = int(np.prod(shape))
            weights = np.frombuffer(_take(fh, count), dtype="<i1").reshape(shape)
            (blen,) = struct.unpack("<I", _take(fh, 4))
            bias = (
                np.frombuffer(_take(fh, 4 * blen), dtype="<i4").copy()
                if blen
                else None
            )
            layers.append(
                QuantLayer(
                    kind=kind,
                    weights=weights.copy(),
                    bias=bias,
                    frac_bits=frac,
                    act_frac_bits=act_frac,
                    act=ACTS[act_code],
                    in_dim=in_dim,
                )
            )
        if fh.read(1):
            raise ModelFormatError("trailing bytes after the last layer")
    return QuantizedModel(seq_len=seq_len, encoding=encoding, layers=layers)


# -- float-model JSON interchange -------------------------------------------


def float_model_to_json_obj(fm: FloatModel) -> dict:
    layers = []
    for layer in fm.layers:
        obj = {
            "kind": layer.kind,
            "act": layer.act,
            "shape": list(layer.weights.shape),
            "weights": layer.weights.ravel().tolist(),
        }
        if layer.kind == "rnn":
            obj["in_dim"] = layer.in_dim
        if layer.bias is not None:
            obj["bias"] = layer.bias.tolist()
        layers.append(obj)
    enc = fm.encoding
    return {
        "format": "float-model",
        "version": VERSION,
        "seq_len": fm.seq_len,
        "encoding": {
            "len_bucket": enc.len_bucket,
            "len_vocab": enc.len_vocab,
            "ipd_vocab": enc.ipd_vocab,
        },
        "layers": layers,
    }


def float_model_from_json_obj(obj: dict) -> FloatModel:
    try:
        if obj.get("format") != "float-model":
            raise ModelFormatError("not a float-model JSON object")
        if obj.get("version") != VERSION:
            raise ModelFormatError(f"unsupported float model version {obj.get('version')}")
        enc = EncodingSpec(**obj["encoding"])
        layers = []
        for lo in obj["layers"]:
            weights = np.asarray(lo["weights"], dtype=np.float64).reshape(lo["shape"])
            bias = np.asarray(lo["bias"], dtype=np.float64) if "bias" in lo else None
            layers.append(
                FloatLayer(
                    kind=lo["kind"],
                    weights=weights,
                    bias=bias,
                    act=lo.get("act", "none"),
                    in_dim=int(lo.get("in_dim", 0)),
                )
            )
        return FloatModel(seq_len=int(obj["seq_len"]), encoding=enc, layers=layers)
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"bad float model JSON: {exc}") from exc


def save_float_model(path, fm: FloatModel) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(float_model_to_json_obj(fm), fh)
        fh.write("\n")


def load_float_model(path) -> FloatModel:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"bad float model JSON: {exc}") from exc
    return float_model_from_json_obj(obj)
