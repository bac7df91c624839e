"""Gossip propagation model and simulated-clock latency bookkeeping.

Push gossip: every informed node forwards to `fanout` uniformly random
peers per hop. Latency measurements decompose each transaction request
into retrieve (TRD), validate (VTR), and confirm (TCT) phases on a
simulated clock; the manager node serves validation requests one at a
time, so concurrency shows up as queueing delay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class GossipCoverageError(RuntimeError):
    """Gossip failed to reach all nodes within the hop cap."""


@dataclass(frozen=True)
class GossipNetwork:
    node_count: int
    fanout: int
    hop_latency_ms: float = 5.0
    hop_jitter_ms: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.node_count < 1:
            raise ValueError("node_count must be >= 1")
        if self.fanout < 1:
            raise ValueError("fanout must be >= 1")


def _hop_delay(net: GossipNetwork, rng: np.random.Generator) -> float:
    return net.hop_latency_ms + net.hop_jitter_ms * float(rng.random())


def gossip_broadcast(
    net: GossipNetwork, origin: int
) -> tuple[int, np.ndarray]:
    """Simulate push gossip from `origin`.

    Returns (hops until full coverage, per-node receive times in ms).
    Raises GossipCoverageError if the hop cap is exceeded (never hangs).
    """
    if not 0 <= origin < net.node_count:
        raise ValueError("origin out of range")
    rng = np.random.default_rng([net.seed, origin])
    times = np.full(net.node_count, np.inf)
    times[origin] = 0.0
    if net.node_count == 1:
        return 0, times
    informed = {origin}
    hop_cap = max(64, 10 * math.ceil(math.log2(net.node_count)) + 10)
    for hop in range(1, hop_cap + 1):
        newly = {}
        for node in sorted(informed):
            # uniform over the other nodes (no self-sends)
            peers = rng.integers(0, net.node_count - 1, size=net.fanout)
            for peer in peers:
                peer = int(peer)
                if peer >= node:
                    peer += 1
                t = times[node] + _hop_delay(net, rng)
                if peer not in informed and (
                    peer not in newly or t < newly[peer]
                ):
                    newly[peer] = t
        for peer, t in newly.items():
            times[peer] = t
            informed.add(peer)
        if len(informed) == net.node_count:
            return hop, times
    raise GossipCoverageError(
        f"{len(informed)}/{net.node_count} nodes reached after {hop_cap} hops"
    )


def sequential_broadcast(net: GossipNetwork, origin: int) -> tuple[int, np.ndarray]:
    """Baseline without gossip: the origin contacts every node one by one."""
    if not 0 <= origin < net.node_count:
        raise ValueError("origin out of range")
    rng = np.random.default_rng([net.seed, origin])
    times = np.zeros(net.node_count)
    clock = 0.0
    for node in range(net.node_count):
        if node == origin:
            continue
        clock += _hop_delay(net, rng)
        times[node] = clock
    return max(0, net.node_count - 1), times


@dataclass(frozen=True)
class RequestLatency:
    request_id: int
    concurrency: int
    init_ms: float
    trd_ms: float
    vtr_ms: float
    tct_ms: float
    end_to_end_ms: float


@dataclass(frozen=True)
class LatencyReport:
    requests: tuple[RequestLatency, ...]
    broadcast_ms: float  # propagation of the confirmations to all nodes
    total_elapsed_ms: float

    def median_end_to_end(self) -> float:
        return float(np.median([r.end_to_end_ms for r in self.requests]))


def measure_latencies(
    concurrency: int,
    net: GossipNetwork | None = None,
    use_gossip: bool = True,
    seed: int = 0,
    base_trd_ms: float = 30.0,
    base_vtr_ms: float = 35.0,
    base_tct_ms: float = 70.0,
) -> LatencyReport:
    """Simulate `concurrency` simultaneous transaction requests.

    end_to_end = request init + TRD + manager response + TCT, where the
    manager validates one request at a time (queueing).
    """
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    rng = np.random.default_rng([seed, concurrency])

    def jitter(base):
        return base * (0.9 + 0.2 * float(rng.random()))

    requests = []
    manager_busy_ms = 0.0
    for i in range(concurrency):
        init = jitter(1.0)
        trd = jitter(base_trd_ms)
        vtr = jitter(base_vtr_ms)
        tct = jitter(base_tct_ms)
        # queue wait accrues while earlier validations run
        manager_response = manager_busy_ms + vtr
        manager_busy_ms += vtr
        end_to_end = init + trd + manager_response + tct
        requests.append(
            RequestLatency(i, concurrency, init, trd, vtr, tct, end_to_end)
        )

    last_done = max(r.end_to_end_ms for r in requests)
    if net is None:
        broadcast_ms = 0.0
    elif use_gossip:
        _, times = gossip_broadcast(net, origin=0)
        broadcast_ms = float(times.max())
    else:
        _, times = sequential_broadcast(net, origin=0)
        broadcast_ms = float(times.max())
    return LatencyReport(
        requests=tuple(requests),
        broadcast_ms=broadcast_ms,
        total_elapsed_ms=last_done + broadcast_ms,
    )
