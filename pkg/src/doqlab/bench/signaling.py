"""Frame and octet accounting on the fake network.

Runs the real client and server engines over ``FakeNetwork`` on virtual time
and reads the resulting frame ledger.  One-time costs (handshake, optional
PMTU probing) are reported apart from the per-query traffic.
"""

from __future__ import annotations

import asyncio
from dataclasses import dataclass, field
from typing import Optional

from ..client import ClientConfig, LookupRun, run_workload
from ..clock import run_virtual
from ..doq import DeliveryMode, DoqServerConnection, ModePreference
from ..proxy import StubResolver, StubZoneConfig
from ..transport import (
    CLIENT_TO_SERVER,
    DIRECTIONS,
    SERVER_TO_CLIENT,
    FakeNetwork,
    FakeNetworkConfig,
    FrameCostModel,
    FrameLedger,
)

# time allowed after the last response for trailing ACK and MAX_STREAMS packets
SETTLE_TIME = 1.0


def stub_zone_resolver(zone: Optional[StubZoneConfig] = None):
    """In-process equivalent of the UDP stub resolver."""
    stub = StubResolver(zone or StubZoneConfig())

    async def resolve(query):
        return stub.answer(query.with_sections(additionals=()))

    return resolve


@dataclass
class FakeRun:
    run: Optional[LookupRun]
    ledger: FrameLedger
    servers: list = field(default_factory=list)


def _preference(mode: DeliveryMode) -> ModePreference:
    return ModePreference.FORCE_STREAM if DeliveryMode(mode) == DeliveryMode.STREAM else ModePreference.AUTO


async def fake_workload(client: ClientConfig, model: FakeNetworkConfig, seed=0, resolver=None,
                        server_max_datagram_frame_size: int = 65535,
                        settle: float = SETTLE_TIME) -> FakeRun:
    """One fresh connection on a fake network carrying ``client.count`` queries."""
    net = FakeNetwork(model, seed)
    servers, tasks = [], []
    resolver = resolver or stub_zone_resolver()

    def on_session(session):
        server = DoqServerConnection(session, resolver)
        servers.append(server)
        tasks.append(asyncio.ensure_future(server.run()))

    net.listen(on_session, max_datagram_frame_size=server_max_datagram_frame_size)
    session = await net.connect(max_datagram_frame_size=client.max_datagram_frame_size)
    run = await run_workload(session, client)
    await asyncio.sleep(settle)
    for task in tasks:
        task.cancel()
    await asyncio.gather(*tasks, return_exceptions=True)
    return FakeRun(run, net.connections[0].ledger, servers)


@dataclass
class SignalingResult:
    mode: str
    queries: int
    total_octets: int
    per_query_octets: int
    one_time_octets: int
    octets_by_direction: dict
    frames: dict
    frames_by_direction: dict

    def to_dict(self) -> dict:
        return dict(self.__dict__)


async def _handshake_only(model: FakeNetworkConfig, mode: DeliveryMode) -> FrameLedger:
    net = FakeNetwork(model, 0)
    net.listen(lambda session: None)
    size = 65535 if mode == DeliveryMode.DATAGRAM else 0
    await net.connect(max_datagram_frame_size=size)
    await asyncio.sleep(SETTLE_TIME)
    return net.connections[0].ledger


def simulate_signaling(n_queries: int, mode, model: Optional[FakeNetworkConfig] = None,
                       spacing: float = 0.5, seed=0) -> SignalingResult:
    """Octets and frames for ``n_queries`` lookups in ``mode`` on a fresh connection."""
    if n_queries < 0:
        raise ValueError("query count must be non-negative")
    mode = DeliveryMode(mode)
    model = model or FakeNetworkConfig()
    if n_queries == 0:
        ledger = run_virtual(_handshake_only(model, mode))
    else:
        client = ClientConfig(count=n_queries, spacing=spacing, mode_preference=_preference(mode), seed=seed)
        ledger = run_virtual(fake_workload(client, model, seed)).ledger
    per_query = ledger.octets(include_one_time=False)
    return SignalingResult(
        mode=mode.value,
        queries=n_queries,
        total_octets=ledger.octets(),
        per_query_octets=per_query,
        one_time_octets=ledger.one_time_octets(),
        octets_by_direction={d: ledger.octets(d) for d in DIRECTIONS},
        frames=ledger.histogram(include_one_time=False),
        frames_by_direction={d: ledger.histogram(d, include_one_time=False) for d in DIRECTIONS},
    )


def signaling_gap(n_queries: int, model: Optional[FakeNetworkConfig] = None, **kwargs) -> int:
    """Stream-mode octets minus datagram-mode octets, one-time costs excluded."""
    stream = simulate_signaling(n_queries, DeliveryMode.STREAM, model, **kwargs)
    datagram = simulate_signaling(n_queries, DeliveryMode.DATAGRAM, model, **kwargs)
    return stream.per_query_octets - datagram.per_query_octets


def per_query_gap(costs: Optional[FrameCostModel] = None) -> int:
    """Closed form of the per-exchange gap under the fake cost model."""
    costs = costs or FrameCostModel()
    return costs.max_streams_packet + costs.ack_packet + 2 * (costs.stream_frame_header - costs.datagram_frame_header)


def round_trips(ledger: FrameLedger, queries: int, include_acks: bool = False) -> float:
    """Client sends plus credit refills the client must wait on, per query.

    With ``include_acks`` every ACK-only packet outside the handshake counts
    as one more exchange.
    """
    if queries == 0:
        return 0.0
    sends = ledger.count("DATAGRAM", CLIENT_TO_SERVER) + ledger.count("STREAM", CLIENT_TO_SERVER)
    total = sends + ledger.count("MAX_STREAMS", SERVER_TO_CLIENT)
    if include_acks:
        total += ledger.histogram(include_one_time=False).get("ACK", 0)
    return total / queries
