"""DoQ exchange engine: mode negotiation, per-transaction state machines, retransmission.

Stream mode opens one bidirectional stream per query and always uses
Transaction ID 0.  Datagram mode sends the same length-prefixed message as a
single DATAGRAM frame with a random nonzero ID, resends it on an exponential
back-off schedule, and relies on :class:`DatagramDispatcher` to match
responses by ID.
"""

from __future__ import annotations

import asyncio
import collections
import enum
import random
from dataclasses import dataclass, field
from typing import Awaitable, Callable, Optional

from .dns_codec import (
    DEFAULT_QUERY_PAD_BLOCK,
    DEFAULT_RESPONSE_PAD_BLOCK,
    DnsCodecError,
    DnsMessage,
    Rcode,
    RecordType,
    apply_padding,
    decode_message,
    encode_message,
    frame_message,
    make_query,
    make_response,
    names_equal,
    unframe_messages,
)
from .transport import (
    ConnectionClosed,
    DatagramTooLarge,
    PeerStreamError,
    Session,
    SessionCapabilities,
    StreamAborted,
    TransportError,
)

DEFAULT_PORT = 853
DEFAULT_PENDING_CAP = 1000


class DeliveryMode(str, enum.Enum):
    STREAM = "stream"
    DATAGRAM = "datagram"


class ModePreference(str, enum.Enum):
    AUTO = "auto"
    FORCE_STREAM = "stream"


class DoqErrorCode(enum.IntEnum):
    NO_ERROR = 0x0
    INTERNAL_ERROR = 0x1
    PROTOCOL_ERROR = 0x2
    REQUEST_CANCELLED = 0x3
    EXCESSIVE_LOAD = 0x4
    UNSPECIFIED_ERROR = 0x5


class DoqError(Exception):
    pass


class ProtocolError(DoqError):
    pass


class ExchangeTimeout(DoqError):
    pass


class RetriesExhausted(DoqError):
    def __init__(self, attempts: int):
        super().__init__(f"no response after {attempts} attempts")
        self.attempts = attempts


class AlreadyCompleted(DoqError):
    pass


class ExchangeCancelled(DoqError):
    pass


class CancellationUnsupported(DoqError):
    """Datagram exchanges cannot be cancelled: there is no stream to stop."""


class IdSpaceExhausted(DoqError):
    pass


def negotiate_mode(caps: SessionCapabilities, preference: ModePreference = ModePreference.AUTO) -> DeliveryMode:
    if preference == ModePreference.AUTO and caps.datagrams_supported:
        return DeliveryMode.DATAGRAM
    return DeliveryMode.STREAM


@dataclass(frozen=True)
class RetryPolicy:
    base_delay: float = 0.2
    factor: float = 2.0
    max_retries: int = 5
    jitter: bool = False

    def __post_init__(self):
        if self.base_delay <= 0 or self.factor < 1 or self.max_retries < 0:
            raise ValueError(f"invalid retry policy {self}")

    @property
    def max_attempts(self) -> int:
        return 1 + self.max_retries

    def delay(self, k: int, rng: Optional[random.Random] = None) -> float:
        """Wait after attempt ``k`` (1-based) before the next send or giving up."""
        if k < 1:
            raise ValueError("attempts are numbered from 1")
        wait = self.base_delay * self.factor ** (k - 1)
        if self.jitter:
            wait *= (rng or random).uniform(0.5, 1.5)
        return wait

    def send_offsets(self) -> list:
        """Offsets of each send from the first one, without jitter."""
        offsets, t = [0.0], 0.0
        for k in range(1, self.max_attempts):
            t += self.delay(k)
            offsets.append(t)
        return offsets

    def give_up_after(self) -> float:
        return sum(self.base_delay * self.factor ** k for k in range(self.max_attempts))

    @property
    def stream_deadline(self) -> float:
        return self.base_delay * self.factor ** self.max_retries


class Outcome(str, enum.Enum):
    PENDING = "pending"
    RESPONDED = "responded"
    FAILED = "failed"
    CANCELLED = "cancelled"


@dataclass
class ExchangeRecord:
    txid: int
    query_wire: bytes
    mode: DeliveryMode
    attempts: int = 0
    send_timestamps: list = field(default_factory=list)
    outcome: Outcome = Outcome.PENDING
    response: Optional[DnsMessage] = None
    failure: Optional[str] = None
    completed_at: Optional[float] = None
    bytes_sent: int = 0
    bytes_received: int = 0
    fell_back: bool = False

    @property
    def latency(self) -> Optional[float]:
        if self.outcome != Outcome.RESPONDED:
            return None
        return self.completed_at - self.send_timestamps[0]

    def note_send(self, now: float, octets: int):
        self.attempts += 1
        self.send_timestamps.append(now)
        self.bytes_sent += octets

    def respond(self, now: float, response: DnsMessage, octets: int):
        self.outcome = Outcome.RESPONDED
        self.response = response
        self.completed_at = now
        self.bytes_received += octets

    def fail(self, now: float, reason: str):
        if self.outcome == Outcome.PENDING:
            self.outcome = Outcome.FAILED
            self.failure = reason
            self.completed_at = now


def assign_transaction_id(mode: DeliveryMode, inflight, rng: random.Random) -> int:
    if mode == DeliveryMode.STREAM:
        return 0
    if sum(1 for i in inflight if i) >= 0xFFFF:
        raise IdSpaceExhausted("all 65535 nonzero transaction IDs are in flight")
    while True:
        txid = rng.randint(1, 0xFFFF)
        if txid not in inflight:
            return txid


def _questions_match(query: DnsMessage, response: DnsMessage) -> bool:
    if len(query.questions) != len(response.questions):
        return False
    return all(
        names_equal(q.qname, r.qname) and q.qtype == r.qtype and q.qclass == r.qclass
        for q, r in zip(query.questions, response.questions)
    )


def parse_single_message(payload: bytes) -> DnsMessage:
    """Unframe exactly one length-prefixed message and decode it."""
    messages, rest = unframe_messages(payload)
    if len(messages) != 1 or rest:
        raise ProtocolError(f"expected one framed message, got {len(messages)} and {len(rest)} stray octets")
    try:
        return decode_message(messages[0])
    except DnsCodecError as exc:
        raise ProtocolError(f"undecodable message: {exc}") from exc


# -- stream mode ------------------------------------------------------------

class StreamExchange:
    """One query on its own bidirectional stream; cancellable until the response lands."""

    def __init__(self, session: Session, query: DnsMessage, policy: RetryPolicy = RetryPolicy(),
                 record: Optional[ExchangeRecord] = None):
        if query.header.id != 0:
            raise ValueError("stream-mode queries carry Transaction ID 0")
        self.session = session
        self.query = query
        self.policy = policy
        self.wire = frame_message(encode_message(query))
        self.record = record or ExchangeRecord(0, self.wire, DeliveryMode.STREAM)
        self.stream = None
        self._cancelled = False

    async def run(self) -> DnsMessage:
        loop = asyncio.get_running_loop()
        record = self.record
        try:
            self.stream = await self.session.open_stream_when_possible()
            if self._cancelled:
                self._abort()
                raise ExchangeCancelled("cancelled before the query was sent")
            record.note_send(loop.time(), len(self.wire))
            self.stream.write(self.wire, end_stream=True)
            try:
                data = await asyncio.wait_for(self.stream.read_to_end(), self.policy.stream_deadline)
            except asyncio.TimeoutError:
                self._abort()
                raise ExchangeTimeout(f"no response within {self.policy.stream_deadline:g} s") from None
            except StreamAborted:
                if self._cancelled:
                    raise ExchangeCancelled("cancelled by the client") from None
                raise
            response = parse_single_message(data)
            if response.header.id != 0:
                raise ProtocolError(f"stream-mode response carries Transaction ID {response.header.id}")
            if not response.header.qr or not _questions_match(self.query, response):
                raise ProtocolError("response does not answer the query")
        except ExchangeCancelled:
            record.outcome = Outcome.CANCELLED
            record.completed_at = loop.time()
            raise
        except ProtocolError:
            record.fail(loop.time(), "ProtocolError")
            if not self.session.closed:
                self.session.close(DoqErrorCode.PROTOCOL_ERROR, "malformed stream response")
            raise
        except (DoqError, TransportError) as exc:
            record.fail(loop.time(), type(exc).__name__)
            raise
        record.respond(loop.time(), response, len(data))
        return response

    def cancel(self):
        if self.record.outcome != Outcome.PENDING:
            raise AlreadyCompleted(f"exchange already {self.record.outcome.value}")
        self._cancelled = True
        if self.stream is not None:
            self._abort()

    def _abort(self):
        if self.session.closed:
            return
        self.stream.stop(DoqErrorCode.REQUEST_CANCELLED)
        self.stream.reset(DoqErrorCode.REQUEST_CANCELLED)


async def exchange_stream(session: Session, query: DnsMessage, policy: RetryPolicy = RetryPolicy(),
                          record: Optional[ExchangeRecord] = None) -> DnsMessage:
    return await StreamExchange(session, query, policy, record).run()


# -- datagram mode ----------------------------------------------------------

class DatagramDispatcher:
    """Single consumer of a session's datagrams, fanning responses out by Transaction ID."""

    def __init__(self, session: Session, recent: int = 4096):
        self.session = session
        self._pending = {}
        self._recently_completed = collections.OrderedDict()
        self._recent = recent
        self._task = None
        self.delivered = 0
        self.orphans = 0
        self.duplicates = 0
        self.malformed = 0
        self.mismatched = 0

    @property
    def inflight(self) -> set:
        return set(self._pending)

    def start(self):
        if self._task is None:
            self._task = asyncio.ensure_future(self._receive_loop())
        return self

    async def stop(self):
        if self._task is not None:
            self._task.cancel()
            try:
                await self._task
            except asyncio.CancelledError:
                pass
            self._task = None

    def register(self, txid: int, query: DnsMessage) -> asyncio.Future:
        if txid == 0 or txid in self._pending:
            raise ValueError(f"transaction ID {txid} unusable")
        future = asyncio.get_running_loop().create_future()
        self._pending[txid] = (future, query)
        self._recently_completed.pop(txid, None)
        return future

    def release(self, txid: int):
        entry = self._pending.pop(txid, None)
        if entry is None:
            return
        if not entry[0].done():
            entry[0].cancel()
        self._recently_completed[txid] = None
        while len(self._recently_completed) > self._recent:
            self._recently_completed.popitem(last=False)

    async def _receive_loop(self):
        try:
            while True:
                self.route(await self.session.receive_datagram())
        except (ConnectionClosed, TransportError) as exc:
            for future, _ in self._pending.values():
                if not future.done():
                    future.set_exception(exc)

    def route(self, payload: bytes):
        try:
            msg = parse_single_message(payload)
        except ProtocolError:
            self.malformed += 1
            return
        txid = msg.header.id
        entry = self._pending.get(txid)
        if entry is None:
            if txid in self._recently_completed:
                self.duplicates += 1
            else:
                self.orphans += 1
            return
        future, query = entry
        if future.done():
            self.duplicates += 1
            return
        if not msg.header.qr or not _questions_match(query, msg):
            self.mismatched += 1
            return
        self.delivered += 1
        future.set_result((msg, len(payload)))


async def exchange_datagram(session: Session, query: DnsMessage, policy: RetryPolicy,
                            dispatcher: DatagramDispatcher, record: Optional[ExchangeRecord] = None,
                            rng: Optional[random.Random] = None) -> DnsMessage:
    txid = query.header.id
    if txid == 0:
        raise ValueError("datagram-mode queries need a nonzero Transaction ID")
    loop = asyncio.get_running_loop()
    wire = frame_message(encode_message(query))
    record = record or ExchangeRecord(txid, wire, DeliveryMode.DATAGRAM)
    limit = session.max_datagram_payload()
    if len(wire) > limit:
        raise DatagramTooLarge(f"{len(wire)}-octet query exceeds the {limit}-octet datagram budget")
    future = dispatcher.register(txid, query)
    try:
        for attempt in range(1, policy.max_attempts + 1):
            # the same bytes every time: no new ID, no new padding
            session.send_datagram(wire)
            record.note_send(loop.time(), len(wire))
            try:
                response, octets = await asyncio.wait_for(asyncio.shield(future), policy.delay(attempt, rng))
            except asyncio.TimeoutError:
                continue
            record.respond(loop.time(), response, octets)
            return response
        record.fail(loop.time(), "RetriesExhausted")
        raise RetriesExhausted(record.attempts)
    except (DoqError, TransportError) as exc:
        record.fail(loop.time(), type(exc).__name__)
        raise
    finally:
        dispatcher.release(txid)


# -- client connection ------------------------------------------------------

class DoqClientConnection:
    """Client half of one DoQ connection in whichever mode negotiation picked."""

    def __init__(self, session: Session, preference: ModePreference = ModePreference.AUTO,
                 policy: RetryPolicy = RetryPolicy(), padding_block: Optional[int] = DEFAULT_QUERY_PAD_BLOCK,
                 rng: Optional[random.Random] = None):
        self.session = session
        self.policy = policy
        self.padding_block = padding_block
        self.rng = rng or random.Random()
        self.mode = negotiate_mode(session.capabilities, preference)
        self.dispatcher = None
        if self.mode == DeliveryMode.DATAGRAM:
            self.dispatcher = DatagramDispatcher(session).start()
        self.fallbacks = 0

    def build_query(self, name, rtype=RecordType.A, mode: Optional[DeliveryMode] = None) -> DnsMessage:
        mode = mode or self.mode
        inflight = self.dispatcher.inflight if self.dispatcher else ()
        query = make_query(name, rtype, assign_transaction_id(mode, inflight, self.rng))
        if self.padding_block:
            query = apply_padding(query, self.padding_block)
        return query

    async def query(self, name, rtype=RecordType.A) -> ExchangeRecord:
        """Resolve one name; failures land in the returned record instead of raising."""
        loop = asyncio.get_running_loop()
        query = self.build_query(name, rtype)
        wire = frame_message(encode_message(query))
        record = ExchangeRecord(query.header.id, wire, self.mode)
        try:
            if self.mode == DeliveryMode.STREAM:
                await exchange_stream(self.session, query, self.policy, record)
                return record
            try:
                response = await exchange_datagram(self.session, query, self.policy, self.dispatcher,
                                                   record, self.rng)
            except DatagramTooLarge:
                response = None
                record.outcome = Outcome.PENDING
            if response is None or response.header.tc:
                await self._fall_back(record, name, rtype)
        except (DoqError, TransportError) as exc:
            record.fail(loop.time(), type(exc).__name__)
        return record

    async def _fall_back(self, record: ExchangeRecord, name, rtype):
        # truncated or oversized for a datagram: this one transaction goes over a stream
        self.fallbacks += 1
        record.fell_back = True
        record.outcome = Outcome.PENDING
        record.response = None
        record.mode = DeliveryMode.STREAM
        record.txid = 0
        query = self.build_query(name, rtype, DeliveryMode.STREAM)
        record.query_wire = frame_message(encode_message(query))
        await exchange_stream(self.session, query, self.policy, record)

    async def close(self):
        if self.dispatcher is not None:
            await self.dispatcher.stop()
        self.session.close(DoqErrorCode.NO_ERROR)


# -- server connection ------------------------------------------------------

Resolver = Callable[[DnsMessage], Awaitable[DnsMessage]]


class _Overloaded(Exception):
    pass


def fit_datagram_response(response: DnsMessage, limit: int, padding_block: Optional[int]):
    """Return ``(framed_wire, truncated)`` within ``limit``, or ``(None, True)`` if nothing fits.

    Padding goes first, then answers are dropped from the end with TC set.
    """
    msg, truncated = response, False
    while True:
        candidates = [apply_padding(msg, padding_block)] if padding_block else []
        for candidate in candidates + [msg]:
            wire = frame_message(encode_message(candidate))
            if len(wire) <= limit:
                return wire, truncated
        if not msg.answers:
            return None, True
        msg = msg.with_sections(answers=msg.answers[:-1]).with_header(tc=True)
        truncated = True


class DoqServerConnection:
    """Server half of one connection: answers stream and datagram queries."""

    def __init__(self, session: Session, resolver: Resolver, pending_cap: int = DEFAULT_PENDING_CAP,
                 padding_block: Optional[int] = DEFAULT_RESPONSE_PAD_BLOCK):
        self.session = session
        self.resolver = resolver
        self.pending_cap = pending_cap
        self.padding_block = padding_block
        self.mode = negotiate_mode(session.capabilities)
        self.pending = 0
        self.stream_queries = 0
        self.datagram_queries = 0
        self.malformed_datagrams = 0
        self.truncated = 0
        self.dropped_responses = 0
        self._tasks = set()

    async def run(self):
        readers = [asyncio.ensure_future(self._accept_streams())]
        if self.mode == DeliveryMode.DATAGRAM:
            readers.append(asyncio.ensure_future(self._receive_datagrams()))
        try:
            await asyncio.gather(*readers)
        finally:
            for task in readers + list(self._tasks):
                task.cancel()
            await asyncio.gather(*readers, *self._tasks, return_exceptions=True)

    def _spawn(self, coro):
        task = asyncio.ensure_future(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)

    async def _accept_streams(self):
        try:
            while True:
                stream = await self.session.accept_bidirectional_stream()
                self._spawn(self._serve_stream(stream))
        except ConnectionClosed:
            pass

    async def _receive_datagrams(self):
        try:
            while True:
                payload = await self.session.receive_datagram()
                self._spawn(self._serve_datagram(payload))
        except ConnectionClosed:
            pass

    def _admit(self):
        self.pending += 1
        if self.pending > self.pending_cap:
            self.session.close(DoqErrorCode.EXCESSIVE_LOAD, "too many pending queries")
            raise _Overloaded()

    async def _resolve(self, query: DnsMessage) -> DnsMessage:
        try:
            response = await self.resolver(query)
        except Exception:
            response = make_response(query, rcode=Rcode.SERVFAIL)
        return response.with_header(id=query.header.id)

    def _pad_block(self, query: DnsMessage) -> Optional[int]:
        # only pad for clients that spoke EDNS
        return self.padding_block if query.opt_record() is not None else None

    async def _serve_stream(self, stream):
        try:
            data = await stream.read_to_end()
        except (PeerStreamError, StreamAborted, ConnectionClosed):
            return
        try:
            query = parse_single_message(data)
            if query.header.qr or query.header.id != 0 or not query.questions:
                raise ProtocolError("not a stream-mode query")
        except ProtocolError as exc:
            if not self.session.closed:
                self.session.close(DoqErrorCode.PROTOCOL_ERROR, str(exc))
            return
        self.stream_queries += 1
        try:
            self._admit()
        except _Overloaded:
            return
        try:
            response = await self._resolve(query)
            block = self._pad_block(query)
            if block:
                response = apply_padding(response, block)
            stream.write(frame_message(encode_message(response)), end_stream=True)
        except (TransportError, DnsCodecError):
            self.dropped_responses += 1
        finally:
            self.pending -= 1

    async def _serve_datagram(self, payload: bytes):
        try:
            query = parse_single_message(payload)
        except ProtocolError:
            self.malformed_datagrams += 1
            return
        if query.header.qr or query.header.id == 0 or not query.questions:
            self.malformed_datagrams += 1
            return
        self.datagram_queries += 1
        try:
            self._admit()
        except _Overloaded:
            return
        try:
            response = await self._resolve(query)
            wire, truncated = fit_datagram_response(response, self.session.max_datagram_payload(),
                                                    self._pad_block(query))
            if wire is None:
                self.dropped_responses += 1
                return
            self.truncated += truncated
            self.session.send_datagram(wire)
        except (TransportError, DnsCodecError):
            self.dropped_responses += 1
        finally:
            self.pending -= 1


def cancel_exchange(exchange) -> None:
    """Cancel an in-flight exchange; only stream-mode exchanges can be cancelled."""
    if not isinstance(exchange, StreamExchange):
        raise CancellationUnsupported("a datagram-mode transaction cannot be cancelled")
    exchange.cancel()
