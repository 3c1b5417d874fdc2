"""UDP impairment relay: uniform per-packet delay and random loss, both ways.

Each client address gets its own upstream socket towards the target, so
replies can be matched back.  Delivery runs off one heap ordered by
``(deliver_at, sequence)``, which keeps packets FIFO whenever their delay
draws tie, in particular when the delay bounds are equal.
"""

from __future__ import annotations

import asyncio
import heapq
import itertools
import logging
import random
from dataclasses import dataclass
from typing import Optional

from ..proxy import BindFailed

log = logging.getLogger(__name__)

UPLINK = "uplink"
DOWNLINK = "downlink"


@dataclass
class RelayConfig:
    listen_host: str = "127.0.0.1"
    listen_port: int = 0
    target_host: str = "127.0.0.1"
    target_port: int = 853
    delay_ms: tuple = (0.0, 0.0)  # uniform bounds, applied to each direction separately
    loss_rate: float = 0.0
    loss_direction: str = "both"  # "uplink", "downlink" or "both"
    seed: Optional[int] = None

    def __post_init__(self):
        lo, hi = self.delay_ms
        if lo < 0 or lo > hi:
            raise ValueError(f"bad delay bounds {self.delay_ms}")
        if not 0 <= self.loss_rate <= 1:
            raise ValueError("loss rate must lie in [0, 1]")
        if self.loss_direction not in (UPLINK, DOWNLINK, "both"):
            raise ValueError(f"unknown loss direction {self.loss_direction!r}")


@dataclass
class DirectionCounters:
    received: int = 0
    dropped: int = 0
    forwarded: int = 0
    octets: int = 0


class _ListenSide(asyncio.DatagramProtocol):
    def __init__(self, relay: "ImpairmentRelay"):
        self.relay = relay

    def datagram_received(self, data, addr):
        self.relay._impair(UPLINK, data, addr)

    def error_received(self, exc):
        log.debug("relay listen socket error: %s", exc)


class _Upstream(asyncio.DatagramProtocol):
    """Socket from the relay to the target on behalf of one client."""

    def __init__(self, relay: "ImpairmentRelay", client_addr):
        self.relay = relay
        self.client_addr = client_addr
        self.transport = None
        self.backlog = []

    def connection_made(self, transport):
        self.transport = transport
        for data in self.backlog:
            transport.sendto(data)
        self.backlog.clear()

    def datagram_received(self, data, addr):
        self.relay._impair(DOWNLINK, data, self.client_addr)

    def error_received(self, exc):
        log.debug("relay upstream socket error: %s", exc)

    def send(self, data):
        if self.transport is None:
            self.backlog.append(data)
        else:
            self.transport.sendto(data)


class ImpairmentRelay:
    def __init__(self, config: RelayConfig):
        self.config = config
        self.rng = random.Random(config.seed)
        self.counters = {UPLINK: DirectionCounters(), DOWNLINK: DirectionCounters()}
        self.port = None
        self._transport = None
        self._upstreams = {}
        self._heap = []
        self._seq = itertools.count()
        self._timer = None
        self._tasks = set()

    async def start(self) -> "ImpairmentRelay":
        loop = asyncio.get_running_loop()
        try:
            self._transport, _ = await loop.create_datagram_endpoint(
                lambda: _ListenSide(self), local_addr=(self.config.listen_host, self.config.listen_port))
        except OSError as exc:
            raise BindFailed(f"relay cannot bind {self.config.listen_host}:{self.config.listen_port}: {exc}") from exc
        self.port = self._transport.get_extra_info("sockname")[1]
        return self

    def close(self):
        if self._timer is not None:
            self._timer.cancel()
        for task in self._tasks:
            task.cancel()
        for upstream in self._upstreams.values():
            if upstream.transport is not None:
                upstream.transport.close()
        if self._transport is not None:
            self._transport.close()
        self._heap.clear()

    async def __aenter__(self):
        return await self.start()

    async def __aexit__(self, *exc):
        self.close()

    def _impair(self, direction, data, client_addr):
        counters = self.counters[direction]
        counters.received += 1
        lossy = self.config.loss_direction in ("both", direction)
        if lossy and self.config.loss_rate and self.rng.random() < self.config.loss_rate:
            counters.dropped += 1
            return
        if direction == UPLINK and client_addr not in self._upstreams:
            self._open_upstream(client_addr)
        loop = asyncio.get_running_loop()
        lo, hi = self.config.delay_ms
        deliver_at = loop.time() + self.rng.uniform(lo, hi) / 1000.0
        heapq.heappush(self._heap, (deliver_at, next(self._seq), direction, data, client_addr))
        self._arm(loop)

    def _arm(self, loop):
        head = self._heap[0][0]
        if self._timer is not None:
            if self._timer.when() <= head:
                return
            self._timer.cancel()
        self._timer = loop.call_at(head, self._release)

    def _release(self):
        self._timer = None
        loop = asyncio.get_running_loop()
        now = loop.time()
        while self._heap and self._heap[0][0] <= now:
            _, _, direction, data, client_addr = heapq.heappop(self._heap)
            self._send(direction, data, client_addr)
        if self._heap:
            self._arm(loop)

    def _send(self, direction, data, client_addr):
        counters = self.counters[direction]
        counters.forwarded += 1
        counters.octets += len(data)
        if direction == UPLINK:
            self._upstreams[client_addr].send(data)
        elif self._transport is not None:
            self._transport.sendto(data, client_addr)

    def _open_upstream(self, client_addr):
        upstream = _Upstream(self, client_addr)
        self._upstreams[client_addr] = upstream
        loop = asyncio.get_running_loop()
        target = (self.config.target_host, self.config.target_port)
        task = asyncio.ensure_future(loop.create_datagram_endpoint(lambda: upstream, remote_addr=target))
        self._tasks.add(task)
        task.add_done_callback(self._upstream_opened)

    def _upstream_opened(self, task):
        self._tasks.discard(task)
        if not task.cancelled() and task.exception() is not None:
            log.warning("relay cannot reach target: %s", task.exception())

    def stats(self) -> dict:
        return {d: dict(c.__dict__) for d, c in self.counters.items()}


async def start_relay(config: RelayConfig) -> ImpairmentRelay:
    return await ImpairmentRelay(config).start()
