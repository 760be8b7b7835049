"""Deterministic discrete-event network simulation.

A single global event queue ordered by (fire_time, sequence) drives every
run. All randomness (per-message latency) comes from one seeded generator,
so a fixed seed plus a fixed schedule reproduces the exact event trace.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

# Message kinds flowing through the simulated network.
JOIN = "JOIN"
MULTICAST = "MULTICAST"
AGG_UP = "AGG_UP"
HEARTBEAT = "HEARTBEAT"
PREDICT = "PREDICT"


@dataclass
class LinkModel:
    """Per-message latency band and link bandwidth.

    Latency is sampled uniformly from [lat_lo, lat_hi] ms per message;
    transmission time adds payload_bytes / bandwidth ms on top.
    """

    lat_lo: float = 10.0
    lat_hi: float = 50.0
    bandwidth: float = 1048.576  # bytes per ms (~1 MiB/s)

    def __post_init__(self) -> None:
        if self.lat_lo > self.lat_hi:
            raise ValueError("lat_lo must be <= lat_hi")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")


@dataclass
class FailureSchedule:
    """Timed fail/rejoin actions, applied by the harness."""

    events: list[tuple[float, int, str]] = field(default_factory=list)

    def __post_init__(self) -> None:
        last = -1.0
        for t, _node, action in self.events:
            if t < last:
                raise ValueError("failure schedule times must be non-decreasing")
            if action not in ("fail", "rejoin"):
                raise ValueError(f"unknown failure action {action!r}")
            last = t


class Simulator:
    """Event loop with a simulated clock, message latency and drop-to-dead.

    `alive` is a predicate used at delivery time; messages to nodes that
    died in flight are counted as dropped, never delivered.
    """

    def __init__(self, seed: int = 0, link: Optional[LinkModel] = None,
                 alive: Optional[Callable[[int], bool]] = None,
                 keep_trace: bool = False):
        self.now = 0.0
        self.link = link or LinkModel()
        self.rng = random.Random(seed)
        self.alive = alive or (lambda _nid: True)
        self._queue: list[tuple[float, int, Callable[[], None]]] = []
        self._seq = 0
        self.executed = 0
        self.sent = 0
        self.delivered = 0
        self.dropped = 0
        self.ingress_bytes: dict[int, int] = {}
        self.egress_bytes: dict[int, int] = {}
        self.ingress_msgs: dict[int, int] = {}
        self.egress_msgs: dict[int, int] = {}
        self.trace: list[tuple[float, str, int, int, int]] = [] if keep_trace else None

    def schedule(self, delay: float, action: Callable[[], None]) -> int:
        if delay < 0:
            raise ValueError("delay must be >= 0")
        self._seq += 1
        heapq.heappush(self._queue, (self.now + delay, self._seq, action))
        return self._seq

    def send(self, src: int, dst: int, payload_bytes: int,
             on_deliver: Callable[[], None], kind: str = MULTICAST) -> None:
        """Schedule a delivery at now + latency + bytes/bandwidth."""
        if not self.alive(src):
            raise ValueError("sender is not alive")
        latency = self.rng.uniform(self.link.lat_lo, self.link.lat_hi)
        delay = latency + payload_bytes / self.link.bandwidth
        self.sent += 1
        self.egress_bytes[src] = self.egress_bytes.get(src, 0) + payload_bytes
        self.egress_msgs[src] = self.egress_msgs.get(src, 0) + 1

        def deliver() -> None:
            if not self.alive(dst):
                self.dropped += 1
                return
            self.delivered += 1
            self.ingress_bytes[dst] = self.ingress_bytes.get(dst, 0) + payload_bytes
            self.ingress_msgs[dst] = self.ingress_msgs.get(dst, 0) + 1
            if self.trace is not None:
                self.trace.append((self.now, kind, src, dst, payload_bytes))
            on_deliver()

        self.schedule(delay, deliver)

    def run_until(self, t_end: float) -> int:
        """Execute all events with fire_time <= t_end; returns the count."""
        if t_end < self.now:
            raise ValueError("cannot run backwards")
        count = 0
        while self._queue and self._queue[0][0] <= t_end:
            t, _seq, action = heapq.heappop(self._queue)
            self.now = t
            self.executed += 1
            count += 1
            action()
        self.now = t_end
        return count

    def run(self) -> int:
        """Drain the whole queue."""
        count = 0
        while self._queue:
            t, _seq, action = heapq.heappop(self._queue)
            self.now = t
            self.executed += 1
            count += 1
            action()
        return count

    def pending(self) -> int:
        return len(self._queue)

    def reset_counters(self) -> None:
        self.sent = self.delivered = self.dropped = 0
        self.ingress_bytes.clear()
        self.egress_bytes.clear()
        self.ingress_msgs.clear()
        self.egress_msgs.clear()

    def trace_hash(self) -> str:
        if self.trace is None:
            raise ValueError("simulator was created with keep_trace=False")
        h = hashlib.sha256()
        for t, kind, src, dst, nbytes in self.trace:
            h.update(f"{t!r}|{kind}|{src:x}|{dst:x}|{nbytes}\n".encode())
        return h.hexdigest()


def write_trace(sim: Simulator, path: str) -> None:
    """Export the event trace as tab-separated (time, type, from, to, bytes)."""
    if sim.trace is None:
        raise ValueError("simulator was created with keep_trace=False")
    with open(path, "w", encoding="utf-8") as fh:
        for t, kind, src, dst, nbytes in sim.trace:
            fh.write(f"{t!r}\t{kind}\t{src:032x}\t{dst:032x}\t{nbytes}\n")
