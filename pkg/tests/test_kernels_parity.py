"""The compiled kernel must reproduce the pure-Python reference bit for bit."""

import json

import numpy as np
import pytest

from innetsim import kernels
from innetsim.models import reference_cnn, reference_rnn
from innetsim.quantizer import QuantLayer, QuantizedModel, EncodingSpec
from innetsim.sim_core import SimConfig, run
from innetsim.trace_io import TrafficSpec, generate_synthetic

needs_ext = pytest.mark.skipif("ext" not in kernels.available_backends(),
                               reason="compiled kernel not built")


def _strip_backend(metrics):
    data = dict(metrics.data)
    data.pop("backend")
    return json.dumps(data, sort_keys=True)


@needs_ext
@pytest.mark.parametrize("prob_source", ["exact", "table"])
def test_full_run_bit_identical(prob_source):
    # collisions (hash_bits=8), window rollovers, queue pressure, engine on
    spec = TrafficSpec(num_flows=120, duration_ns=300_000_000, mean_rate_pps=1200,
                       rate_dist="pareto", pareto_shape=3.0, arrival="poisson",
                       seed=21)
    trace = generate_synthetic(spec)
    cfg = SimConfig(engine_rate_hz=4000.0, channel_bps=5e7, window_ns=60_000_000,
                    seed=9, hash_bits=8, queue_depth=8, prob_source=prob_source)
    a = run(cfg, trace, backend="py")
    b = run(cfg, trace, backend="ext")
    assert _strip_backend(a) == _strip_backend(b)


@needs_ext
def test_model_off_run_bit_identical():
    spec = TrafficSpec(num_flows=40, duration_ns=200_000_000, mean_rate_pps=800,
                       arrival="poisson", rate_dist="uniform", seed=4)
    trace = generate_synthetic(spec)
    cfg = SimConfig(engine_rate_hz=900.0, channel_bps=1e9, window_ns=50_000_000,
                    seed=2, model_path="none", prob_source="exact")
    a = run(cfg, trace, backend="py")
    b = run(cfg, trace, backend="ext")
    assert _strip_backend(a) == _strip_backend(b)


@needs_ext
@pytest.mark.parametrize("builder", [reference_cnn, reference_rnn])
def test_infer_parity_reference_models(builder, rng):
    _, qm = builder()
    py = kernels.make_infer_on("py", qm)
    cy = kernels.make_infer_on("ext", qm)
    for _ in range(300):
        count = int(rng.integers(1, 12))
        lens = rng.integers(0, 2000, count).astype(np.uint16)
        ipds = rng.integers(0, 40, count).astype(np.uint16)
        assert py((lens, ipds)) == cy((lens, ipds))


@needs_ext
def test_infer_parity_random_models(rng):
    # random quantized stacks: conv/rnn/fc in both mid and final positions
    for trial in range(20):
        enc = EncodingSpec(len_bucket=64, len_vocab=16, ipd_vocab=16)
        seq_len = int(rng.integers(3, 10))
        d1, d2 = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        ch = d1 + d2
        layers = [
            QuantLayer("embedding", rng.integers(-128, 128, (16, d1)).astype(np.int8),
                       None, 6, 6),
            QuantLayer("embedding", rng.integers(-128, 128, (16, d2)).astype(np.int8),
                       None, 6, 6),
        ]
        cur_seq, cur_ch = seq_len, ch
        if trial % 2 == 0:
            k = int(rng.integers(1, min(3, cur_seq) + 1))
            out_ch = int(rng.integers(1, 8))
            layers.append(QuantLayer(
                "conv1d", rng.integers(-128, 128, (out_ch, k, cur_ch)).astype(np.int8),
                rng.integers(-1000, 1000, out_ch).astype(np.int32),
                int(rng.integers(0, 8)), int(rng.integers(0, 8)), act="relu"))
            cur_seq, cur_ch = cur_seq - k + 1, out_ch
            layers.append(QuantLayer(
                "fc", rng.integers(-128, 128, (3, cur_seq * cur_ch)).astype(np.int8),
                rng.integers(-1000, 1000, 3).astype(np.int32),
                int(rng.integers(0, 8)), 14))
        else:
            hidden = int(rng.integers(1, 8))
            layers.append(QuantLayer(
                "rnn", rng.integers(-128, 128, (hidden, cur_ch + hidden)).astype(np.int8),
                rng.integers(-1000, 1000, hidden).astype(np.int32),
                int(rng.integers(0, 8)), int(rng.integers(0, 8)), act="relu",
                in_dim=cur_ch))
            layers.append(QuantLayer(
                "fc", rng.integers(-128, 128, (3, hidden)).astype(np.int8),
                rng.integers(-1000, 1000, 3).astype(np.int32),
                int(rng.integers(0, 8)), 14))
        qm = QuantizedModel(seq_len=seq_len, encoding=enc, layers=layers)
        py = kernels.make_infer_on("py", qm)
        cy = kernels.make_infer_on("ext", qm)
        for _ in range(40):
            count = int(rng.integers(1, seq_len + 3))
            lens = rng.integers(0, 2000, count).astype(np.uint16)
            ipds = rng.integers(0, 30, count).astype(np.uint16)
            assert py((lens, ipds)) == cy((lens, ipds))
