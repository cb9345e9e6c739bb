"""Packet-level simulator of an in-network inference pipeline.

A switch-side data engine (flow table, probabilistic token-bucket rate
limiter, per-flow feature rings) feeds mirrored feature sequences across a
bandwidth-limited channel into an INT8 fixed-point inference engine, and the
classification results flow back to the switch. Everything runs in virtual
time under a deterministic discrete-event loop.
"""

__version__ = "0.1.0"

from .kernels import backend_name  # noqa: F401
