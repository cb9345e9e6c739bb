#!/usr/bin/env python3
"""Benchmark the compiled dataplane kernel against the pure-Python fallback.

Runs the same replay workloads on both backends, checks the outputs are
bit-identical, and prints throughput plus speedup. Usage:

    python benchmarks/bench_kernels.py [--packets 200000]
"""

import argparse
import json
import time

import numpy as np

from innetsim import kernels
from innetsim.models import reference_rnn
from innetsim.sim_core import SimConfig, run
from innetsim.trace_io import TrafficSpec, generate_synthetic


def replay_workload(packets: int):
    flows = max(50, packets // 1000)
    rate = 1000.0
    duration_ns = int(packets / (flows * rate) * 1e9)
    spec = TrafficSpec(num_flows=flows, duration_ns=duration_ns,
                       mean_rate_pps=rate, rate_dist="uniform",
                       arrival="poisson", seed=17)
    trace = generate_synthetic(spec)
    cfg = SimConfig(engine_rate_hz=flows * rate / 13.333, channel_bps=1e12,
                    window_ns=100_000_000, seed=4, prob_source="table",
                    model_path="none")
    return trace, cfg


def infer_workload():
    _, qm = reference_rnn()
    rng = np.random.default_rng(7)
    batches = [(rng.integers(1, 1500, 9).astype(np.uint16),
                rng.integers(0, 32, 9).astype(np.uint16))
               for _ in range(2000)]
    return qm, batches


def time_replay(backend, trace, cfg):
    t0 = time.perf_counter()
    metrics = run(cfg, trace, backend=backend)
    elapsed = time.perf_counter() - t0
    data = dict(metrics.data)
    data.pop("backend")
    return elapsed, json.dumps(data, sort_keys=True)


def time_infer(backend, qm, batches, repeats=10):
    fn = kernels.make_infer_on(backend, qm)
    out = []
    t0 = time.perf_counter()
    for _ in range(repeats):
        out = [fn(b) for b in batches]
    elapsed = (time.perf_counter() - t0) / repeats
    return elapsed, out


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--packets", type=int, default=200_000)
    args = parser.parse_args()

    backends = kernels.available_backends()
    print(f"available backends: {backends}")
    if "ext" not in backends:
        print("compiled kernel not built; run `pip install -e . "
              "--no-build-isolation` first")
        return 1

    trace, cfg = replay_workload(args.packets)
    print(f"\nreplay workload: {len(trace)} packets, "
          f"{trace.distinct_flows()} flows, table-mode limiter")
    results = {}
    for backend in ("py", "ext"):
        elapsed, fingerprint = time_replay(backend, trace, cfg)
        results[backend] = (elapsed, fingerprint)
        print(f"  {backend:>3}: {elapsed:8.3f} s "
              f"({len(trace) / elapsed / 1e6:6.2f} Mpkt/s)")
    same = results["py"][1] == results["ext"][1]
    print(f"  outputs bit-identical: {same}")
    print(f"  speedup: {results['py'][0] / results['ext'][0]:.1f}x")
    if not same:
        return 1

    qm, batches = infer_workload()
    print(f"\ninference workload: {len(batches)} sequences, reference "
          f"recurrent model")
    inf_results = {}
    for backend in ("py", "ext"):
        elapsed, out = time_infer(backend, qm, batches)
        inf_results[backend] = (elapsed, out)
        per_call = elapsed / len(batches) * 1e6
        print(f"  {backend:>3}: {per_call:8.2f} us/inference")
    same = inf_results["py"][1] == inf_results["ext"][1]
    print(f"  outputs identical: {same}")
    print(f"  speedup: {inf_results['py'][0] / inf_results['ext'][0]:.1f}x")
    return 0 if same else 1


if __name__ == "__main__":
    raise SystemExit(main())
