"""What the DoQ engine needs from a QUIC stack, and an in-memory stand-in.

:class:`Session` and :class:`StreamHandle` are the whole surface the exchange
engine touches.  Two implementations exist: the aioquic adapter in
:mod:`doqlab.quic_adapter` and :class:`FakeNetwork`, a packet-level
simulator driven entirely by the running loop's clock.  The fake does not
implement QUIC; it reproduces the packets that matter for DoQ accounting
(STREAM, DATAGRAM, ACK, MAX_STREAMS, ...) with configurable octet costs and
records each one in a :class:`FrameLedger`.
"""

from __future__ import annotations

import abc
import asyncio
import collections
import json
import math
import random
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

ALPN = "doq"
DEFAULT_IDLE_TIMEOUT = 30.0
RECOMMENDED_MAX_DATAGRAM_FRAME_SIZE = 65535

CLIENT_TO_SERVER = "client_to_server"
SERVER_TO_CLIENT = "server_to_client"
DIRECTIONS = (CLIENT_TO_SERVER, SERVER_TO_CLIENT)

FRAME_TYPES = (
    "STREAM", "DATAGRAM", "MAX_STREAMS", "ACK", "PADDING", "PING",
    "CRYPTO", "RESET_STREAM", "STOP_SENDING", "CONNECTION_CLOSE",
)


class TransportError(Exception):
    pass


class ConnectionClosed(TransportError):
    def __init__(self, error_code: Optional[int] = None, reason: str = ""):
        super().__init__(f"connection closed (code={error_code}, reason={reason!r})")
        self.error_code = error_code
        self.reason = reason


class StreamsExhausted(TransportError):
    """No bidirectional stream credit left; wait for the peer's MAX_STREAMS."""


class DatagramsUnsupported(TransportError):
    pass


class DatagramTooLarge(TransportError):
    pass


class PeerStreamError(TransportError):
    """The peer reset (or asked us to stop) a stream with an application code."""

    def __init__(self, code: int):
        super().__init__(f"peer aborted stream with code 0x{code:x}")
        self.code = code


class StreamAborted(TransportError):
    """This endpoint stopped reading or reset the stream itself."""


def varint_size(value: int) -> int:
    if value < 1 << 6:
        return 1
    if value < 1 << 14:
        return 2
    if value < 1 << 30:
        return 4
    return 8


@dataclass(frozen=True)
class SessionCapabilities:
    local_max_datagram_frame_size: int = 0
    peer_max_datagram_frame_size: int = 0
    negotiated_alpn: str = ALPN
    idle_timeout: float = DEFAULT_IDLE_TIMEOUT

    @property
    def local_datagrams(self) -> bool:
        return self.local_max_datagram_frame_size > 0

    @property
    def peer_datagrams(self) -> bool:
        return self.peer_max_datagram_frame_size > 0

    @property
    def datagrams_supported(self) -> bool:
        return self.local_datagrams and self.peer_datagrams

    def max_datagram_payload(self) -> int:
        """Largest payload the peer agreed to receive in one DATAGRAM frame."""
        if not self.datagrams_supported:
            return 0
        size = self.peer_max_datagram_frame_size
        return max(0, size - 1 - varint_size(size))


class StreamHandle(abc.ABC):
    stream_id: int

    @abc.abstractmethod
    def write(self, data: bytes, end_stream: bool = False) -> None: ...

    def finish(self) -> None:
        self.write(b"", end_stream=True)

    @abc.abstractmethod
    async def read_to_end(self) -> bytes: ...

    @abc.abstractmethod
    def stop(self, error_code: int) -> None:
        """Ask the peer to stop sending (STOP_SENDING)."""

    @abc.abstractmethod
    def reset(self, error_code: int) -> None:
        """Abandon our sending half (RESET_STREAM)."""


class Session(abc.ABC):
    is_client: bool
    capabilities: SessionCapabilities

    @abc.abstractmethod
    def open_bidirectional_stream(self) -> StreamHandle: ...

    @abc.abstractmethod
    async def wait_for_stream_credit(self) -> None: ...

    @abc.abstractmethod
    async def accept_bidirectional_stream(self) -> StreamHandle: ...

    @abc.abstractmethod
    def send_datagram(self, payload: bytes) -> None: ...

    @abc.abstractmethod
    async def receive_datagram(self) -> bytes: ...

    @abc.abstractmethod
    def close(self, error_code: int = 0, reason: str = "") -> None: ...

    @abc.abstractmethod
    async def wait_closed(self) -> None: ...

    @property
    @abc.abstractmethod
    def closed(self) -> bool: ...

    def max_datagram_payload(self) -> int:
        return self.capabilities.max_datagram_payload()

    async def open_stream_when_possible(self) -> StreamHandle:
        while True:
            try:
                return self.open_bidirectional_stream()
            except StreamsExhausted:
                await self.wait_for_stream_credit()

    def _check_datagram(self, payload: bytes) -> None:
        if self.closed:
            raise self.close_error or ConnectionClosed()
        if not self.capabilities.datagrams_supported:
            raise DatagramsUnsupported("datagrams were not negotiated on this session")
        limit = self.max_datagram_payload()
        if len(payload) > limit:
            raise DatagramTooLarge(f"{len(payload)} octets exceeds the {limit}-octet datagram budget")

    close_error: Optional[ConnectionClosed] = None


class Inbox:
    """A FIFO whose getters fail once the owner closes it."""

    def __init__(self):
        self._items = collections.deque()
        self._waiters = collections.deque()
        self._error = None

    def put(self, item) -> None:
        while self._waiters:
            waiter = self._waiters.popleft()
            if not waiter.done():
                waiter.set_result(item)
                return
        self._items.append(item)

    async def get(self):
        if self._items:
            return self._items.popleft()
        if self._error is not None:
            raise self._error
        waiter = asyncio.get_running_loop().create_future()
        self._waiters.append(waiter)
        return await waiter

    def close(self, error: BaseException) -> None:
        self._error = error
        while self._waiters:
            waiter = self._waiters.popleft()
            if not waiter.done():
                waiter.set_exception(error)

    def __len__(self):
        return len(self._items)


# -- wire tap ---------------------------------------------------------------

class _TappedStream(StreamHandle):
    def __init__(self, inner: StreamHandle, tap: "TappedSession"):
        self._inner = inner
        self._tap = tap
        self.stream_id = inner.stream_id

    def write(self, data, end_stream=False):
        self._inner.write(data, end_stream)
        if data:
            self._tap.record("stream_out", data, self.stream_id)

    async def read_to_end(self):
        data = await self._inner.read_to_end()
        self._tap.record("stream_in", data, self.stream_id)
        return data

    def stop(self, error_code):
        self._inner.stop(error_code)

    def reset(self, error_code):
        self._inner.reset(error_code)


class TappedSession(Session):
    """Delegating session that keeps a copy of every payload crossing it."""

    def __init__(self, inner: Session):
        self.inner = inner
        self.is_client = inner.is_client
        self.records = []

    def record(self, kind, data, stream_id=None):
        self.records.append((kind, bytes(data), stream_id))

    @property
    def capabilities(self):
        return self.inner.capabilities

    @property
    def close_error(self):
        return self.inner.close_error

    def max_datagram_payload(self):
        return self.inner.max_datagram_payload()

    def open_bidirectional_stream(self):
        return _TappedStream(self.inner.open_bidirectional_stream(), self)

    async def wait_for_stream_credit(self):
        await self.inner.wait_for_stream_credit()

    async def accept_bidirectional_stream(self):
        return _TappedStream(await self.inner.accept_bidirectional_stream(), self)

    def send_datagram(self, payload):
        self.inner.send_datagram(payload)
        self.record("datagram_out", payload)

    async def receive_datagram(self):
        data = await self.inner.receive_datagram()
        self.record("datagram_in", data)
        return data

    def close(self, error_code=0, reason=""):
        self.inner.close(error_code, reason)

    async def wait_closed(self):
        await self.inner.wait_closed()

    @property
    def closed(self):
        return self.inner.closed

    def __getattr__(self, name):
        return getattr(self.inner, name)


# -- fake network -----------------------------------------------------------

@dataclass(frozen=True)
class PerRetiredStream:
    """Replenish one stream of credit for every stream the server retires."""


@dataclass(frozen=True)
class HighWatermark:
    """Replenish in bulk once ``fraction`` of the initial allowance is used up."""

    fraction: float = 0.5

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise ValueError(f"watermark fraction {self.fraction} outside (0, 1]")


@dataclass(frozen=True)
class FrameCostModel:
    """Octets charged per simulated packet, as a packet capture would count them.

    Data-carrying packets cost ``data_packet_overhead`` plus the frame header
    plus payload.  Control packets are charged their whole size.  The ACK
    size is calibrated so that one stream-mode exchange costs 130 octets more
    than a datagram exchange: 66 (MAX_STREAMS) + 60 (the ACK it elicits)
    + 2 x 2 (stream ID field on query and response frames).
    """

    data_packet_overhead: int = 65
    stream_frame_header: int = 5
    datagram_frame_header: int = 3
    ack_packet: int = 60
    max_streams_packet: int = 66
    control_packet: int = 50
    handshake_client: int = 1342
    handshake_server: int = 3726
    pmtud_bytes: int = 11600
    include_pmtud: bool = False


@dataclass(frozen=True)
class FakeNetworkConfig:
    datagram_loss_rate: float = 0.0
    # which datagrams the loss applies to: "uplink" (client sends), "downlink", "both"
    loss_direction: str = "uplink"
    one_way_delay: tuple = (10.0, 10.0)  # uniform bounds, ms
    stream_credit_policy: object = field(default_factory=PerRetiredStream)
    initial_stream_credit: int = 100
    frame_cost_model: FrameCostModel = field(default_factory=FrameCostModel)
    max_ack_delay: float = 25.0  # ms
    idle_timeout: float = DEFAULT_IDLE_TIMEOUT

    def __post_init__(self):
        if not 0 <= self.datagram_loss_rate <= 1:
            raise ValueError("loss rate must lie in [0, 1]")
        lo, hi = self.one_way_delay
        if lo < 0 or lo > hi:
            raise ValueError(f"bad delay bounds {self.one_way_delay}")
        if self.loss_direction not in ("uplink", "downlink", "both"):
            raise ValueError(f"unknown loss direction {self.loss_direction!r}")
        if self.initial_stream_credit < 1:
            raise ValueError("initial stream credit must be positive")


@dataclass
class LedgerEntry:
    time: float
    direction: str
    frame_type: str
    octets: int
    delivered: bool
    one_time: bool = False


@dataclass
class FrameLedger:
    entries: list = field(default_factory=list)

    def histogram(self, direction: str | None = None, include_one_time: bool = True) -> dict:
        counts = collections.Counter(
            e.frame_type for e in self._select(direction, include_one_time))
        return dict(counts)

    def octets(self, direction: str | None = None, include_one_time: bool = True) -> int:
        return sum(e.octets for e in self._select(direction, include_one_time))

    def one_time_octets(self, direction: str | None = None) -> int:
        return sum(e.octets for e in self._select(direction, True) if e.one_time)

    def count(self, frame_type: str, direction: str | None = None) -> int:
        return sum(1 for e in self._select(direction, True) if e.frame_type == frame_type)

    def handshakes(self) -> int:
        return sum(1 for e in self.entries
                   if e.frame_type == "CRYPTO" and e.direction == CLIENT_TO_SERVER)

    def _select(self, direction, include_one_time):
        for e in self.entries:
            if direction is not None and e.direction != direction:
                continue
            if not include_one_time and e.one_time:
                continue
            yield e

    def summary(self) -> dict:
        return {
            d: {"frames": self.histogram(d), "octets": self.octets(d),
                "one_time_octets": self.one_time_octets(d)}
            for d in DIRECTIONS
        }

    def to_json(self) -> str:
        return json.dumps({"entries": [asdict(e) for e in self.entries],
                           "summary": self.summary()}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FrameLedger":
        return cls([LedgerEntry(**e) for e in json.loads(text)["entries"]])


@dataclass
class _Packet:
    pn: int
    frame_type: str
    octets: int
    ack_eliciting: bool
    body: object = None
    acks: tuple = ()


class FakeStream(StreamHandle):
    def __init__(self, session: "FakeSession", stream_id: int):
        self.session = session
        self.stream_id = stream_id
        self._recv = bytearray()
        self._recv_done = asyncio.get_running_loop().create_future()
        self.fin_received = False
        self.peer_reset_code = None
        self.locally_stopped = False
        self.fin_sent = False
        self.reset_sent = False
        self.send_acked = False
        self.stop_code = None
        self.retired = False

    @property
    def recv_finished(self):
        return self.fin_received or self.peer_reset_code is not None or self.locally_stopped

    @property
    def send_finished(self):
        return self.reset_sent or (self.fin_sent and self.send_acked)

    def write(self, data, end_stream=False):
        session = self.session
        session._raise_if_closed()
        if self.reset_sent:
            if self.stop_code is not None:
                raise PeerStreamError(self.stop_code)
            raise StreamAborted("stream was reset")
        if self.fin_sent:
            raise StreamAborted("write after FIN")
        costs = session.net.config.frame_cost_model
        octets = costs.data_packet_overhead + costs.stream_frame_header + len(data)
        on_ack = None
        if end_stream:
            self.fin_sent = True
            on_ack = self._on_fin_acked
        session._transmit("STREAM", octets, True, (self.stream_id, bytes(data), end_stream),
                          reliable=True, on_ack=on_ack)

    async def read_to_end(self):
        if not self._recv_done.done():
            await asyncio.shield(self._recv_done)
        self._recv_done.result()
        return bytes(self._recv)

    def stop(self, error_code):
        self.session._raise_if_closed()
        if self.recv_finished:
            return
        self.locally_stopped = True
        self._finish_recv(StreamAborted("stopped locally"))
        self.session._transmit("STOP_SENDING", self.session.costs.control_packet, True,
                               (self.stream_id, error_code), reliable=True)
        self.session._maybe_retire(self)

    def reset(self, error_code):
        self.session._raise_if_closed()
        if self.reset_sent or self.send_finished:
            return
        self.reset_sent = True
        self.session._transmit("RESET_STREAM", self.session.costs.control_packet, True,
                               (self.stream_id, error_code), reliable=True)
        self.session._maybe_retire(self)

    # events from the network
    def _on_data(self, data, fin):
        if self.recv_finished:
            return
        self._recv.extend(data)
        if fin:
            self.fin_received = True
            self._finish_recv(None)
            self.session._maybe_retire(self)

    def _on_peer_reset(self, code):
        if self.recv_finished:
            return
        self.peer_reset_code = code
        self._finish_recv(PeerStreamError(code))
        self.session._maybe_retire(self)

    def _on_stop_sending(self, code):
        self.stop_code = code
        if not self.fin_sent and not self.reset_sent:
            self.reset(code)

    def _on_fin_acked(self):
        self.send_acked = True
        self.session._maybe_retire(self)

    def _finish_recv(self, error):
        if self._recv_done.done():
            return
        if error is None:
            self._recv_done.set_result(None)
        else:
            self._recv_done.set_exception(error)
            # mark retrieved so an unread failure does not warn at GC
            self._recv_done.exception()


class FakeSession(Session):
    def __init__(self, net: "FakeNetwork", conn: "_FakeConnection", is_client: bool,
                 local_max_datagram_frame_size: int, idle_timeout: float):
        self.net = net
        self.conn = conn
        self.is_client = is_client
        self.local_max_datagram_frame_size = local_max_datagram_frame_size
        self.idle_timeout = idle_timeout
        self.capabilities = SessionCapabilities(local_max_datagram_frame_size=local_max_datagram_frame_size)
        self.direction = CLIENT_TO_SERVER if is_client else SERVER_TO_CLIENT
        self.loop = asyncio.get_running_loop()
        self.peer: Optional[FakeSession] = None
        self.costs = net.config.frame_cost_model
        self.streams = {}
        self._next_pn = 0
        self._unacked = {}
        self._ack_pending = []
        self._ack_timer = None
        self._idle_timer = None
        self._datagrams = Inbox()
        self._accept = Inbox()
        self._credit_waiters = []
        self._closed = asyncio.Event()
        self.close_error = None
        self.established = False
        # client view of its bidirectional stream credit
        self.stream_limit = net.config.initial_stream_credit
        self.streams_opened = 0
        # server bookkeeping for MAX_STREAMS
        self.advertised_limit = net.config.initial_stream_credit
        self.retired_unadvertised = 0
        self.retired_total = 0
        self.datagrams_sent = 0
        self.datagrams_received = 0

    # -- Session API ----------------------------------------------------------

    @property
    def closed(self):
        return self._closed.is_set()

    def frame_ledger(self) -> FrameLedger:
        return self.conn.ledger

    def open_bidirectional_stream(self):
        self._raise_if_closed()
        if not self.is_client:
            raise TransportError("the fake only models client-initiated streams")
        if self.streams_opened >= self.stream_limit:
            raise StreamsExhausted(f"limit of {self.stream_limit} bidirectional streams reached")
        stream = FakeStream(self, 4 * self.streams_opened)
        self.streams_opened += 1
        self.streams[stream.stream_id] = stream
        return stream

    async def wait_for_stream_credit(self):
        self._raise_if_closed()
        if self.streams_opened < self.stream_limit:
            return
        waiter = self.loop.create_future()
        self._credit_waiters.append(waiter)
        await waiter

    async def accept_bidirectional_stream(self):
        self._raise_if_closed()
        return await self._accept.get()

    def send_datagram(self, payload):
        self._check_datagram(payload)
        costs = self.costs
        octets = costs.data_packet_overhead + costs.datagram_frame_header + len(payload)
        self.datagrams_sent += 1
        self._transmit("DATAGRAM", octets, True, bytes(payload), reliable=False)

    async def receive_datagram(self):
        self._raise_if_closed()
        if not self.capabilities.datagrams_supported:
            raise DatagramsUnsupported("datagrams were not negotiated on this session")
        return await self._datagrams.get()

    def close(self, error_code=0, reason=""):
        if self.closed:
            return
        self._transmit("CONNECTION_CLOSE", self.costs.control_packet, False,
                       (error_code, reason), reliable=True)
        self._terminate(ConnectionClosed(error_code, reason))

    async def wait_closed(self):
        await self._closed.wait()

    # -- internals ----------------------------------------------------------

    def _raise_if_closed(self):
        if self.closed:
            raise self.close_error

    def _terminate(self, error: ConnectionClosed):
        if self.closed:
            return
        self.close_error = error
        self._closed.set()
        for timer in (self._ack_timer, self._idle_timer):
            if timer is not None:
                timer.cancel()
        self._datagrams.close(error)
        self._accept.close(error)
        for waiter in self._credit_waiters:
            if not waiter.done():
                waiter.set_exception(error)
        self._credit_waiters.clear()
        for stream in self.streams.values():
            stream._finish_recv(error)

    def _touch(self):
        if self._idle_timer is not None:
            self._idle_timer.cancel()
        self._idle_timer = self.loop.call_later(self.idle_timeout, self._on_idle)

    def _on_idle(self):
        self._terminate(ConnectionClosed(None, "idle timeout"))

    def _transmit(self, frame_type, octets, ack_eliciting, body, reliable, on_ack=None,
                  one_time=False):
        pn = self._next_pn
        self._next_pn += 1
        acks = ()
        if frame_type != "ACK" and self._ack_pending and not one_time:
            acks = tuple(self._ack_pending)
            self._ack_pending.clear()
            if self._ack_timer is not None:
                self._ack_timer.cancel()
                self._ack_timer = None
        packet = _Packet(pn, frame_type, octets, ack_eliciting, body, acks)
        if on_ack is not None:
            self._unacked[pn] = on_ack
        self.net._carry(self, packet, reliable, one_time)
        if self.established:
            self._touch()

    def _deliver(self, packet: _Packet):
        if self.closed:
            return
        if self.established:
            self._touch()
        for pn in packet.acks:
            callback = self._unacked.pop(pn, None)
            if callback is not None:
                callback()
        if packet.ack_eliciting:
            self._ack_pending.append(packet.pn)
            if self._ack_timer is None:
                self._ack_timer = self.loop.call_later(self.net.config.max_ack_delay / 1000.0,
                                                       self._flush_ack)
        handler = getattr(self, "_on_" + packet.frame_type.lower())
        handler(packet.body)

    def _flush_ack(self):
        self._ack_timer = None
        if self.closed or not self._ack_pending:
            return
        acks = tuple(self._ack_pending)
        self._ack_pending.clear()
        self._transmit("ACK", self.costs.ack_packet, False, acks, reliable=True)

    def _on_ack(self, acked):
        for pn in acked:
            callback = self._unacked.pop(pn, None)
            if callback is not None:
                callback()

    def _on_stream(self, body):
        stream_id, data, fin = body
        stream = self.streams.get(stream_id)
        if stream is None:
            if self.is_client:
                return
            stream = FakeStream(self, stream_id)
            self.streams[stream_id] = stream
            self._accept.put(stream)
        stream._on_data(data, fin)

    def _on_datagram(self, payload):
        self.datagrams_received += 1
        self._datagrams.put(payload)

    def _on_reset_stream(self, body):
        stream_id, code = body
        stream = self.streams.get(stream_id)
        if stream is not None:
            stream._on_peer_reset(code)

    def _on_stop_sending(self, body):
        stream_id, code = body
        stream = self.streams.get(stream_id)
        if stream is not None:
            stream._on_stop_sending(code)

    def _on_max_streams(self, limit):
        if limit > self.stream_limit:
            self.stream_limit = limit
            waiters, self._credit_waiters = self._credit_waiters, []
            for waiter in waiters:
                if not waiter.done():
                    waiter.set_result(None)

    def _on_connection_close(self, body):
        code, reason = body
        self._terminate(ConnectionClosed(code, reason))

    def _on_ping(self, body):
        pass

    def _maybe_retire(self, stream: FakeStream):
        if stream.retired or not (stream.recv_finished and stream.send_finished):
            return
        stream.retired = True
        if self.is_client:
            return
        self.retired_total += 1
        self.retired_unadvertised += 1
        policy = self.net.config.stream_credit_policy
        if isinstance(policy, HighWatermark):
            threshold = math.ceil(policy.fraction * self.net.config.initial_stream_credit)
            if self.retired_unadvertised < threshold:
                return
        self.advertised_limit += self.retired_unadvertised
        self.retired_unadvertised = 0
        self._transmit("MAX_STREAMS", self.costs.max_streams_packet, True,
                       self.advertised_limit, reliable=True)


class _FakeConnection:
    def __init__(self):
        self.ledger = FrameLedger()
        self.client: Optional[FakeSession] = None
        self.server: Optional[FakeSession] = None
        self.last_reliable_delivery = {CLIENT_TO_SERVER: 0.0, SERVER_TO_CLIENT: 0.0}
        # timers with equal deadlines fire in arbitrary order, so the pipe holds the packets
        self.reliable_pipe = {CLIENT_TO_SERVER: collections.deque(), SERVER_TO_CLIENT: collections.deque()}


class FakeNetwork:
    """Deterministic two-party packet simulator.

    All randomness (loss and delay draws) comes from one ``random.Random``
    seeded at construction, so the same seed, config and sequence of calls
    produce identical ledgers.
    """

    def __init__(self, config: FakeNetworkConfig | None = None, seed: int = 0):
        self.config = config or FakeNetworkConfig()
        self.rng = random.Random(seed)
        self.connections = []
        self._listener = None

    def listen(self, on_session: Callable[[FakeSession], None],
               max_datagram_frame_size: int = RECOMMENDED_MAX_DATAGRAM_FRAME_SIZE,
               idle_timeout: float | None = None) -> None:
        self._listener = (on_session, max_datagram_frame_size,
                          self.config.idle_timeout if idle_timeout is None else idle_timeout)

    async def connect(self, max_datagram_frame_size: int = RECOMMENDED_MAX_DATAGRAM_FRAME_SIZE,
                      idle_timeout: float | None = None) -> FakeSession:
        if self._listener is None:
            raise ConnectionClosed(None, "nobody listening")
        on_session, server_size, server_idle = self._listener
        client_idle = self.config.idle_timeout if idle_timeout is None else idle_timeout
        conn = _FakeConnection()
        client = FakeSession(self, conn, True, max_datagram_frame_size, client_idle)
        server = FakeSession(self, conn, False, server_size, server_idle)
        client.peer, server.peer = server, client
        conn.client, conn.server = client, server
        self.connections.append(conn)

        idle = min(client_idle, server_idle)
        for local, peer in ((client, server), (server, client)):
            local.capabilities = SessionCapabilities(
                local_max_datagram_frame_size=local.local_max_datagram_frame_size,
                peer_max_datagram_frame_size=peer.local_max_datagram_frame_size,
                idle_timeout=idle,
            )
            local.idle_timeout = idle

        loop = asyncio.get_running_loop()
        ready = loop.create_future()
        costs = self.config.frame_cost_model

        def server_hello(_body):
            server.established = True
            server._touch()
            server._transmit("CRYPTO", costs.handshake_server, False, None,
                             reliable=True, one_time=True)
            on_session(server)

        def client_done(_body):
            client.established = True
            client._touch()
            if not ready.done():
                ready.set_result(None)

        server._on_crypto = server_hello
        client._on_crypto = client_done
        client._transmit("CRYPTO", costs.handshake_client, False, None, reliable=True, one_time=True)
        await ready
        if costs.include_pmtud:
            client._transmit("PADDING", costs.pmtud_bytes, False, None, reliable=True, one_time=True)
        return client

    def _carry(self, sender: FakeSession, packet: _Packet, reliable: bool, one_time: bool):
        loop = asyncio.get_running_loop()
        config = self.config
        direction = sender.direction
        lost = False
        if not reliable and config.datagram_loss_rate > 0:
            lossy = (config.loss_direction == "both"
                     or (config.loss_direction == "uplink") == (direction == CLIENT_TO_SERVER))
            if lossy:
                lost = self.rng.random() < config.datagram_loss_rate
        lo, hi = config.one_way_delay
        delay = self.rng.uniform(lo, hi) / 1000.0
        now = loop.time()
        sender.conn.ledger.entries.append(
            LedgerEntry(round(now, 9), direction, packet.frame_type, packet.octets, not lost, one_time))
        if lost:
            return
        deliver_at = now + delay
        if reliable:
            # one ordered pipe per direction for everything that is not a datagram
            conn = sender.conn
            deliver_at = max(deliver_at, conn.last_reliable_delivery[direction])
            conn.last_reliable_delivery[direction] = deliver_at
            conn.reliable_pipe[direction].append(packet)
            loop.call_at(deliver_at, self._deliver_next, sender, direction)
            return
        loop.call_at(deliver_at, sender.peer._deliver, packet)

    @staticmethod
    def _deliver_next(sender: FakeSession, direction: str):
        sender.peer._deliver(sender.conn.reliable_pipe[direction].popleft())
