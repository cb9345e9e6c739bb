"""Bounded queue front-end of the inference engine.

Incoming mirrored packets split into a flow-identifier FIFO and an input
FIFO of feature sequences; results land in an output FIFO and are paired
strictly head-to-head with the identifier queue, which is what keeps flows
and their results matched. Overflow drops the whole request — never one
half — so pairing can never skew.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Any, Optional, Tuple

from .errors import ConfigError, SimError


@dataclass
class InferenceRequest:
    """One admitted mirrored packet, as the engine sees it."""

    flow_id: Any  # opaque to the queues (five-tuple in the simulator)
    features: Any
    meta: Any = None  # simulator bookkeeping (slot, tag, timestamps)


class IoState:
    """Flow-id FIFO + input FIFO + output FIFO with fixed depths.

    Conservation: len(flow id fifo) == len(input fifo) + in_flight +
    len(output fifo) at every quiescent point.
    """

    def __init__(self, depth: int = 64):
        if depth < 1:
            raise ConfigError("queue depth must be >= 1")
        self.depth = depth
        self.flow_id_fifo: deque = deque()
        self.input_fifo: deque = deque()
        self.output_fifo: deque = deque()
        self.in_flight = 0
        self.drop_count = 0

    def enqueue_request(self, request: InferenceRequest) -> bool:
        """Admit a request atomically; on any full queue, drop it whole."""
        if len(self.flow_id_fifo) >= self.depth or len(self.input_fifo) >= self.depth:
            self.drop_count += 1
            return False
        self.flow_id_fifo.append(request.flow_id)
        self.input_fifo.append(request)
        return True

    def start_inference(self) -> Optional[InferenceRequest]:
        """Engine pulls the input head; returns None when idle-empty."""
        if not self.input_fifo:
            return None
        if len(self.output_fifo) >= self.depth:
            return None  # back-pressure: results have nowhere to land
        self.in_flight += 1
        return self.input_fifo.popleft()

    def complete_inference(self, result: Any) -> None:
        """Append a finished result; single engine => completion order is
        issue order."""
        if self.in_flight < 1:
            raise SimError("complete_inference with nothing in flight")
        self.in_flight -= 1
        self.output_fifo.append(result)

    def emit_response(self) -> Optional[Tuple[Any, Any]]:
        """Pair the head flow id with the head result, or None."""
        if not self.flow_id_fifo or not self.output_fifo:
            return None
        return self.flow_id_fifo.popleft(), self.output_fifo.popleft()

    def conserved(self) -> bool:
        return len(self.flow_id_fifo) == (
            len(self.input_fifo) + self.in_flight + len(self.output_fifo)
        )
