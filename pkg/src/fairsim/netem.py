"""Three-node WAN testbed: initiator <-> router <-> target.

Each direction of each cable is a :class:`Link` with a bandwidth, a
propagation delay, a drop-tail queue and an optional Bernoulli loss. The
emulated delay and loss live on the router's two egress links, the way the
emulator box sat in the middle of the real testbed.

Links are evaluated eagerly: ``transmit`` computes the arrival time from the
link's own FIFO state, so a packet crossing two hops costs a single event.
This is exact because each router egress link is fed by exactly one ingress
link, whose arrivals are already in FIFO order.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from enum import Enum

from .sim_core import MS, SEC, RngStream, STREAM_LOSS_FORWARD, STREAM_LOSS_REVERSE, Simulator

FRAME_BYTES = 1500
HEADER_BYTES = 40
ACK_BYTES = HEADER_BYTES


class Drop(str, Enum):
    QUEUE_FULL = "queue_full"
    RANDOM_LOSS = "random_loss"


class ConfigError(ValueError):
    """Invalid network or experiment configuration."""


class Packet:
    __slots__ = ("src", "dst", "size_bytes", "segment", "enqueue_time")

    def __init__(self, src, dst, size_bytes: int, segment, enqueue_time: int = 0):
        self.src = src
        self.dst = dst
        self.size_bytes = size_bytes
        self.segment = segment
        self.enqueue_time = enqueue_time


def serialization_ns(size_bytes: int, bandwidth_bps: int) -> int:
    return -(-size_bytes * 8 * SEC // bandwidth_bps)


class Link:
    """One direction of a cable: FIFO, drop-tail, optional random loss."""

    def __init__(self, name: str, bandwidth_bps: int, one_way_delay: int = 0,
                 queue_capacity_pkts: int = 100, loss_prob: float = 0.0,
                 rng: RngStream | None = None):
        if bandwidth_bps <= 0:
            raise ConfigError(f"link {name}: bandwidth must be positive")
        if not 0.0 <= loss_prob <= 1.0:
            raise ConfigError(f"link {name}: loss_prob must be in [0, 1]")
        if loss_prob > 0 and rng is None:
            raise ConfigError(f"link {name}: lossy link needs an rng stream")
        if one_way_delay < 0:
            raise ConfigError(f"link {name}: negative delay")
        self.name = name
        self.bandwidth_bps = bandwidth_bps
        self.one_way_delay = one_way_delay
        self.queue_capacity_pkts = queue_capacity_pkts
        self.loss_prob = loss_prob
        self.rng = rng
        self.busy_until = 0
        # (start, finish) of every packet not yet fully serialized
        self._backlog: deque[tuple[int, int]] = deque()
        self._ser_cache: dict[int, int] = {}
        self.offered = 0
        self.delivered = 0
        self.dropped_random = 0
        self.dropped_queue = 0

    def serialization(self, size_bytes: int) -> int:
        ser = self._ser_cache.get(size_bytes)
        if ser is None:
            ser = self._ser_cache[size_bytes] = serialization_ns(size_bytes, self.bandwidth_bps)
        return ser

    def queue_length(self, now: int) -> int:
        """Packets waiting behind the one currently on the wire."""
        backlog = self._backlog
        while backlog and backlog[0][1] <= now:
            backlog.popleft()
        if backlog and backlog[0][0] <= now:
            return len(backlog) - 1
        return len(backlog)

    def transmit(self, now: int, size_bytes: int) -> int | Drop:
        """Arrival time at the far end, or the reason the packet was dropped."""
        self.offered += 1
        if self.loss_prob and self.rng.uniform() < self.loss_prob:
            self.dropped_random += 1
            return Drop.RANDOM_LOSS
        if self.queue_length(now) >= self.queue_capacity_pkts:
            self.dropped_queue += 1
            return Drop.QUEUE_FULL
        start = self.busy_until if self.busy_until > now else now
        finish = start + self.serialization(size_bytes)
        self.busy_until = finish
        self._backlog.append((start, finish))
        self.delivered += 1
        return finish + self.one_way_delay


def transmit(link: Link, now: int, pkt: Packet) -> int | Drop:
    if pkt.size_bytes > FRAME_BYTES:
        raise ConfigError(f"packet of {pkt.size_bytes} bytes exceeds the {FRAME_BYTES}-byte frame")
    pkt.enqueue_time = now
    return link.transmit(now, pkt.size_bytes)


def path_rtt(forward: tuple[Link, Link], reverse: tuple[Link, Link], size_bytes: int,
             ack_bytes: int = ACK_BYTES) -> int:
    """Unloaded round trip: data over ``forward`` hops, ack back over ``reverse``."""
    total = 0
    for link in forward:
        total += link.serialization(size_bytes) + link.one_way_delay
    for link in reverse:
        total += link.serialization(ack_bytes) + link.one_way_delay
    return total


@dataclass
class NetConfig:
    bandwidth_bps: int = 1_000_000_000
    delay_ms: float = 0.0
    delay_is_one_way: bool = True
    loss_prob: float = 0.027
    queue_capacity_pkts: int = 100


INITIATOR = "initiator"
TARGET = "target"


class Testbed:
    """initiator -- router -- target with delay and loss on router egress."""

    __test__ = False  # not a pytest test class despite the name

    def __init__(self, sim: Simulator, cfg: NetConfig, seed: int):
        self.sim = sim
        self.cfg = cfg
        delay = int(round(cfg.delay_ms * MS))
        if not cfg.delay_is_one_way:
            delay //= 2
        bw, qcap = cfg.bandwidth_bps, cfg.queue_capacity_pkts
        self.links = {
            (INITIATOR, "router"): Link("initiator->router", bw, 0, qcap),
            ("router", TARGET): Link("router->target", bw, delay, qcap, cfg.loss_prob,
                                     RngStream(seed, STREAM_LOSS_FORWARD)),
            (TARGET, "router"): Link("target->router", bw, 0, qcap),
            ("router", INITIATOR): Link("router->initiator", bw, delay, qcap, cfg.loss_prob,
                                        RngStream(seed, STREAM_LOSS_REVERSE)),
        }
        self._routes = {
            INITIATOR: (self.links[(INITIATOR, "router")], self.links[("router", TARGET)]),
            TARGET: (self.links[(TARGET, "router")], self.links[("router", INITIATOR)]),
        }
        self._handlers: dict[str, object] = {}
        self.drops = {Drop.QUEUE_FULL: 0, Drop.RANDOM_LOSS: 0}

    def attach(self, host: str, handler) -> None:
        """``handler(packet)`` is called when a packet arrives at ``host``."""
        self._handlers[host] = handler

    def route(self, src: str) -> tuple[Link, Link]:
        return self._routes[src]

    def send(self, pkt: Packet) -> int | Drop:
        first, second = self._routes[pkt.src]
        if pkt.size_bytes > FRAME_BYTES:
            raise ConfigError(f"packet of {pkt.size_bytes} bytes exceeds the {FRAME_BYTES}-byte frame")
        sim = self.sim
        pkt.enqueue_time = sim.now
        at_router = first.transmit(sim.now, pkt.size_bytes)
        if at_router.__class__ is Drop:
            self.drops[at_router] += 1
            return at_router
        arrival = second.transmit(at_router, pkt.size_bytes)
        if arrival.__class__ is Drop:
            self.drops[arrival] += 1
            return arrival
        sim.schedule(arrival, self._handlers[pkt.dst], pkt)
        return arrival

    def rtt(self, size_bytes: int = FRAME_BYTES) -> int:
        return path_rtt(self._routes[INITIATOR], self._routes[TARGET], size_bytes)

    def lossy_links(self) -> list[Link]:
        return [link for link in self.links.values() if link.loss_prob > 0]

    def loss_counts(self) -> tuple[int, int]:
        """(packets offered to lossy links, packets randomly dropped)."""
        lossy = self.lossy_links()
        return sum(l.offered for l in lossy), sum(l.dropped_random for l in lossy)
