"""Probabilistic token-bucket rate limiter for the feature channel.

The per-request grant probability is a piecewise-linear function of how long
a flow has been backlogged (`elapsed_s`) and how many packets it accumulated
(`backlog_pkts`), parameterized by the window's flow count N, aggregate
packet rate Q, and the channel's grant capacity V. Slow flows ramp from 0 at
N/V up to 1 at Q/(Q_i*V); fast flows ramp over the reversed interval, so
high-rate flows are denied more often and transmission opportunities stay
fair. A grant costs one token from a bucket refilling at V.

The dataplane cannot evaluate the expression, so it is discretized into a
uniform (elapsed, backlog) lookup grid rebuilt by the control plane every
window.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ClockError, ConfigError, DomainError


def compute_rate(engine_rate_hz: float, channel_bps: float, msg_bits: float) -> float:
    """Grant capacity in grants/second: min(engine rate, channel/message)."""
    if engine_rate_hz <= 0 or channel_bps <= 0 or msg_bits <= 0:
        raise ConfigError("engine rate, channel bandwidth and message width must be > 0")
    return min(engine_rate_hz, channel_bps / msg_bits)


@dataclass(frozen=True)
class RateParams:
    """Inputs of the probability model for one timing window."""

    token_rate: float  # V, grants/second
    flow_count: float  # N, flows seen last window
    packet_rate: float  # Q, packets/second last window
    engine_rate_hz: float  # F
    channel_bps: float  # B
    msg_bits: float  # W

    def __post_init__(self):
        if self.flow_count < 1:
            raise DomainError("flow_count must be >= 1")
        if self.packet_rate <= 0:
            raise DomainError("packet_rate must be > 0")
        if self.token_rate <= 0:
            raise DomainError("token_rate must be > 0")
        expected = compute_rate(self.engine_rate_hz, self.channel_bps, self.msg_bits)
        if self.token_rate != expected:
            raise ConfigError(
                f"token_rate {self.token_rate} != min(F, B/W) = {expected}"
            )

    @classmethod
    def from_inputs(cls, engine_rate_hz, channel_bps, msg_bits, flow_count, packet_rate):
        return cls(
            token_rate=compute_rate(engine_rate_hz, channel_bps, msg_bits),
            flow_count=float(flow_count),
            packet_rate=float(packet_rate),
            engine_rate_hz=float(engine_rate_hz),
            channel_bps=float(channel_bps),
            msg_bits=float(msg_bits),
        )


def _eval_prob_raw(elapsed_s: float, backlog_pkts: float,
                   n: float, q: float, v: float) -> float:
    """Piecewise model without precondition checks (elapsed_s >= 0 ok)."""
    qt = q * elapsed_s
    nc = n * backlog_pkts
    if qt == nc:
        return 1.0 if elapsed_s >= n / v else 0.0
    if qt > nc:  # ramp_start N/V below ramp_end Q*T/(C*V): lower-rate flow
        p = backlog_pkts * (v * elapsed_s - n) / (qt - nc)
    else:  # reversed interval: higher-rate flow
        p = elapsed_s * (v * backlog_pkts - q) / (nc - qt)
    if p < 0.0:
        return 0.0
    if p > 1.0:
        return 1.0
    return p


def evaluate_probability(elapsed_s: float, backlog_pkts: float, params: RateParams) -> float:
    """Grant probability for a flow backlogged `elapsed_s` with
    `backlog_pkts` packets; always in [0, 1]."""
    if elapsed_s <= 0:
        raise DomainError("elapsed_s must be > 0")
    if backlog_pkts < 1:
        raise DomainError("backlog_pkts must be >= 1")
    return _eval_prob_raw(
        float(elapsed_s), float(backlog_pkts),
        params.flow_count, params.packet_rate, params.token_rate,
    )


def _eval_prob_grid(t: np.ndarray, c: np.ndarray, n: float, q: float, v: float) -> np.ndarray:
    """Vectorized twin of :func:`_eval_prob_raw` (same operations per cell)."""
    qt = q * t
    nc = n * c
    with np.errstate(divide="ignore", invalid="ignore"):
        slow = c * (v * t - n) / (qt - nc)
        fast = t * (v * c - q) / (nc - qt)
    p = np.where(qt > nc, slow, fast)
    p = np.clip(p, 0.0, 1.0)
    step = np.where(t >= n / v, 1.0, 0.0)
    return np.where(qt == nc, step, p)


def expected_grant_interval(flow_rate_pps: float, params: RateParams) -> float:
    """Closed-form expected seconds between grants for a flow at the given
    rate: (Q_i*N + Q) / (2*Q_i*V)."""
    if flow_rate_pps <= 0:
        raise DomainError("flow_rate_pps must be > 0")
    n, q, v = params.flow_count, params.packet_rate, params.token_rate
    return (flow_rate_pps * n + q) / (2.0 * flow_rate_pps * v)


@dataclass
class ProbabilityTable:
    """Uniform discretization of the probability model over a
    (elapsed, backlog) grid; cell (i, j) holds the exact value at the
    bin center. Lookups snap to the nearest center and clamp at the edges."""

    t_bins: int
    c_bins: int
    t_max_s: float
    c_max: float
    cells: np.ndarray  # (t_bins, c_bins) float64 in [0, 1]
    params: RateParams

    @property
    def t_step(self) -> float:
        return self.t_max_s / self.t_bins

    @property
    def c_step(self) -> float:
        return self.c_max / self.c_bins

    def t_centers(self) -> np.ndarray:
        return (np.arange(self.t_bins) + 0.5) * self.t_step

    def c_centers(self) -> np.ndarray:
        return (np.arange(self.c_bins) + 0.5) * self.c_step

    def to_csv(self, fh) -> None:
        """Emit `t_bin_center_s, c_bin_center, probability` rows."""
        writer = csv.writer(fh)
        writer.writerow(["t_bin_center_s", "c_bin_center", "probability"])
        tc, cc = self.t_centers(), self.c_centers()
        for i in range(self.t_bins):
            for j in range(self.c_bins):
                writer.writerow([repr(float(tc[i])), repr(float(cc[j])),
                                 repr(float(self.cells[i, j]))])


def build_probability_table(params: RateParams, t_bins: int, c_bins: int,
                            t_max_s: float, c_max: float) -> ProbabilityTable:
    if t_bins < 1 or c_bins < 1:
        raise ConfigError("bins must be >= 1")
    if t_max_s <= 0 or c_max < 1:
        raise ConfigError("t_max_s must be > 0 and c_max >= 1")
    t = (np.arange(t_bins, dtype=np.float64) + 0.5) * (t_max_s / t_bins)
    c = (np.arange(c_bins, dtype=np.float64) + 0.5) * (c_max / c_bins)
    cells = _eval_prob_grid(t[:, None], c[None, :],
                            params.flow_count, params.packet_rate, params.token_rate)
    return ProbabilityTable(
        t_bins=t_bins, c_bins=c_bins, t_max_s=float(t_max_s), c_max=float(c_max),
        cells=np.ascontiguousarray(cells), params=params,
    )


def lookup_probability(table: ProbabilityTable, elapsed_s: float, backlog_pkts: float) -> float:
    """Nearest-bin-center lookup; clamps beyond the grid. Pure."""
    if elapsed_s < 0 or backlog_pkts < 0:
        raise DomainError("lookup arguments must be >= 0")
    ti = int(elapsed_s / table.t_step)
    if ti >= table.t_bins:
        ti = table.t_bins - 1
    ci = int(backlog_pkts / table.c_step)
    if ci >= table.c_bins:
        ci = table.c_bins - 1
    return float(table.cells[ti, ci])


class TokenBucket:
    """Token bucket at `token_rate` grants/second; one grant costs `cost`
    tokens. Scalar state sits in 1-element arrays shared with the kernels.
    """

    def __init__(self, token_rate: float, cap: float, cost: float = 1.0,
                 initial: float = 0.0):
        if cap <= 0 or cost <= 0 or token_rate <= 0:
            raise ConfigError("token_rate, cap and cost must be > 0")
        if not 0.0 <= initial <= cap:
            raise ConfigError("initial tokens outside [0, cap]")
        self.token_rate = float(token_rate)
        self.cap = float(cap)
        self.cost = float(cost)
        self.tokens = np.array([initial], dtype=np.float64)
        self.last_ns = np.array([0], dtype=np.int64)  # 0 = no packet seen yet

    @property
    def bucket(self) -> float:
        return float(self.tokens[0])

    def step(self, t_now_ns: int, prob: float, rand_u: float) -> bool:
        """One request at `t_now_ns`: refill for the elapsed gap, then grant
        iff `rand_u < prob` and a full cost is available."""
        last = int(self.last_ns[0])
        if last == 0:
            gap_ns = 0
        else:
            if t_now_ns < last:
                raise ClockError(f"time regressed: {t_now_ns} < {last}")
            gap_ns = t_now_ns - last
        self.last_ns[0] = t_now_ns
        refill = gap_ns * 1e-9 * self.token_rate * self.cost
        bucket = self.tokens[0] + refill
        if bucket > self.cap:
            bucket = self.cap
        grant = False
        if rand_u < prob and bucket >= self.cost:
            bucket -= self.cost
            grant = True
        self.tokens[0] = bucket
        return grant
