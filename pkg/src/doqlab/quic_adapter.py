"""The :class:`~doqlab.transport.Session` interface on top of aioquic."""

from __future__ import annotations

import asyncio
import contextlib
import datetime
import ipaddress
import ssl
from pathlib import Path
from typing import Callable, Optional

from aioquic.asyncio import QuicConnectionProtocol, connect, serve
from aioquic.quic import events
from aioquic.quic.configuration import QuicConfiguration
from aioquic.quic.logger import QuicLogger

from .transport import (
    ALPN,
    DEFAULT_IDLE_TIMEOUT,
    RECOMMENDED_MAX_DATAGRAM_FRAME_SIZE,
    ConnectionClosed,
    DatagramsUnsupported,
    Inbox,
    PeerStreamError,
    Session,
    SessionCapabilities,
    StreamAborted,
    StreamHandle,
    StreamsExhausted,
    varint_size,
)

# short header, connection ID, packet number and AEAD tag, with some slack
PACKET_OVERHEAD_ALLOWANCE = 64


class QuicStream(StreamHandle):
    def __init__(self, session: "QuicSession", stream_id: int):
        self.session = session
        self.stream_id = stream_id
        self._recv = bytearray()
        self._recv_done = asyncio.get_running_loop().create_future()
        self.fin_sent = False
        self.reset_sent = False
        self.stop_code = None

    def write(self, data, end_stream=False):
        session = self.session
        session._raise_if_closed()
        if self.stop_code is not None:
            raise PeerStreamError(self.stop_code)
        if self.reset_sent:
            raise StreamAborted("stream was reset")
        if self.fin_sent:
            raise StreamAborted("write after FIN")
        session.quic.send_stream_data(self.stream_id, bytes(data), end_stream)
        self.fin_sent = end_stream
        session.protocol.transmit()

    async def read_to_end(self):
        if not self._recv_done.done():
            await asyncio.shield(self._recv_done)
        self._recv_done.result()
        return bytes(self._recv)

    def stop(self, error_code):
        session = self.session
        session._raise_if_closed()
        if self._recv_done.done():
            return
        session.quic.stop_stream(self.stream_id, error_code)
        self._finish_recv(StreamAborted("stopped locally"))
        session.protocol.transmit()

    def reset(self, error_code):
        session = self.session
        session._raise_if_closed()
        if self.reset_sent:
            return
        self.reset_sent = True
        session.quic.reset_stream(self.stream_id, error_code)
        session.protocol.transmit()

    def _on_data(self, data, fin):
        if self._recv_done.done():
            return
        self._recv.extend(data)
        if fin:
            self._finish_recv(None)

    def _finish_recv(self, error):
        if self._recv_done.done():
            return
        if error is None:
            self._recv_done.set_result(None)
        else:
            self._recv_done.set_exception(error)
            self._recv_done.exception()


class QuicSession(Session):
    def __init__(self, protocol: "DoqProtocol", is_client: bool):
        self.protocol = protocol
        self.quic = protocol._quic
        self.is_client = is_client
        self.streams = {}
        self._datagrams = Inbox()
        self._accept = Inbox()
        self._credit_waiters = []
        self.close_error = None
        self.datagrams_sent = 0
        self.datagrams_received = 0

    @property
    def capabilities(self) -> SessionCapabilities:
        config = self.quic.configuration
        return SessionCapabilities(
            local_max_datagram_frame_size=config.max_datagram_frame_size or 0,
            peer_max_datagram_frame_size=self.quic._remote_max_datagram_frame_size or 0,
            negotiated_alpn=self.quic.tls.alpn_negotiated or ALPN,
            idle_timeout=config.idle_timeout,
        )

    def max_datagram_payload(self) -> int:
        # aioquic never splits a DATAGRAM frame, and one that does not fit a packet stalls its queue
        budget = self.quic.configuration.max_datagram_size - PACKET_OVERHEAD_ALLOWANCE
        budget -= 1 + varint_size(budget)
        return min(super().max_datagram_payload(), max(0, budget))

    @property
    def stream_limit(self) -> int:
        return self.quic._remote_max_streams_bidi

    @property
    def closed(self) -> bool:
        return self.close_error is not None

    def qlog_trace(self) -> Optional[dict]:
        trace = self.quic._quic_logger
        return trace.to_dict() if trace is not None else None

    def _raise_if_closed(self):
        if self.close_error is not None:
            raise self.close_error

    def open_bidirectional_stream(self):
        self._raise_if_closed()
        stream_id = self.quic.get_next_available_stream_id()
        # aioquic lets a client run past the peer's limit and blocks the data, so check here
        if self.is_client and stream_id // 4 + 1 > self.stream_limit:
            raise StreamsExhausted(f"peer allows {self.stream_limit} bidirectional streams")
        self.quic.send_stream_data(stream_id, b"")
        stream = QuicStream(self, stream_id)
        self.streams[stream_id] = stream
        return stream

    async def wait_for_stream_credit(self):
        self._raise_if_closed()
        waiter = asyncio.get_running_loop().create_future()
        self._credit_waiters.append(waiter)
        await waiter

    async def accept_bidirectional_stream(self):
        return await self._accept.get()

    def send_datagram(self, payload):
        self._check_datagram(payload)
        self.quic.send_datagram_frame(bytes(payload))
        self.datagrams_sent += 1
        self.protocol.transmit()

    async def receive_datagram(self):
        self._raise_if_closed()
        if not self.capabilities.datagrams_supported:
            raise DatagramsUnsupported("datagrams were not negotiated on this session")
        return await self._datagrams.get()

    def close(self, error_code=0, reason=""):
        if self.close_error is not None:
            return
        self.protocol.close(error_code=error_code, reason_phrase=reason)
        self._terminate(ConnectionClosed(error_code, reason))

    async def wait_closed(self):
        await self.protocol.wait_closed()

    # events from aioquic
    def _handle_event(self, event):
        if isinstance(event, events.StreamDataReceived):
            stream = self.streams.get(event.stream_id)
            if stream is None:
                stream = QuicStream(self, event.stream_id)
                self.streams[event.stream_id] = stream
                self._accept.put(stream)
            stream._on_data(event.data, event.end_stream)
        elif isinstance(event, events.DatagramFrameReceived):
            self.datagrams_received += 1
            self._datagrams.put(event.data)
        elif isinstance(event, events.StreamReset):
            stream = self.streams.get(event.stream_id)
            if stream is not None:
                stream._finish_recv(PeerStreamError(event.error_code))
        elif isinstance(event, events.StopSendingReceived):
            # aioquic already reset the sending half
            stream = self.streams.get(event.stream_id)
            if stream is not None:
                stream.stop_code = event.error_code
        elif isinstance(event, events.ConnectionTerminated):
            self._terminate(ConnectionClosed(event.error_code, event.reason_phrase))

    def _notify_credit(self):
        if not self._credit_waiters:
            return
        if self.quic.get_next_available_stream_id() // 4 + 1 <= self.stream_limit:
            waiters, self._credit_waiters = self._credit_waiters, []
            for waiter in waiters:
                if not waiter.done():
                    waiter.set_result(None)

    def _terminate(self, error: ConnectionClosed):
        if self.close_error is not None:
            return
        self.close_error = error
        self._datagrams.close(error)
        self._accept.close(error)
        for stream in self.streams.values():
            stream._finish_recv(error)
        for waiter in self._credit_waiters:
            if not waiter.done():
                waiter.set_exception(error)
        self._credit_waiters = []


class DoqProtocol(QuicConnectionProtocol):
    def __init__(self, quic, stream_handler=None, on_session: Optional[Callable] = None):
        super().__init__(quic, stream_handler)
        self.session = QuicSession(self, quic.configuration.is_client)
        self._on_session = on_session

    def quic_event_received(self, event):
        self.session._handle_event(event)
        if isinstance(event, events.HandshakeCompleted) and self._on_session is not None:
            self._on_session(self.session)

    def _process_events(self):
        super()._process_events()
        # MAX_STREAMS produces no event, so look after every batch
        self.session._notify_credit()


def make_configuration(is_client: bool, *, max_datagram_frame_size: int = RECOMMENDED_MAX_DATAGRAM_FRAME_SIZE,
                       idle_timeout: float = DEFAULT_IDLE_TIMEOUT, qlog: bool = False,
                       ca_file: Optional[str] = None, insecure_skip_verify: bool = False,
                       cert_file: Optional[str] = None, key_file: Optional[str] = None,
                       server_name: Optional[str] = None) -> QuicConfiguration:
    config = QuicConfiguration(
        is_client=is_client,
        alpn_protocols=[ALPN],
        idle_timeout=idle_timeout,
        max_datagram_frame_size=max_datagram_frame_size or None,
        quic_logger=QuicLogger() if qlog else None,
        server_name=server_name,
    )
    if is_client:
        if insecure_skip_verify:
            config.verify_mode = ssl.CERT_NONE
        elif ca_file:
            config.load_verify_locations(ca_file)
    else:
        config.load_cert_chain(cert_file, key_file)
    return config


@contextlib.asynccontextmanager
async def open_session(host: str, port: int, configuration: QuicConfiguration):
    """Connect and yield a :class:`QuicSession`; closes the connection on exit."""
    async with connect(host, port, configuration=configuration, create_protocol=DoqProtocol) as protocol:
        yield protocol.session


async def start_server(host: str, port: int, configuration: QuicConfiguration,
                       on_session: Callable[[QuicSession], None]):
    """Listen for DoQ connections; ``on_session`` runs once each handshake completes."""

    def create_protocol(quic, stream_handler=None):
        return DoqProtocol(quic, stream_handler, on_session=on_session)

    return await serve(host, port, configuration=configuration, create_protocol=create_protocol)


def bound_port(server) -> int:
    return server._transport.get_extra_info("sockname")[1]


def make_self_signed_certificate(hostname: str = "localhost", ip: str = "127.0.0.1",
                                 days: int = 30) -> tuple[bytes, bytes]:
    """Return ``(certificate_pem, private_key_pem)`` for a throwaway test server."""
    from cryptography import x509
    from cryptography.hazmat.primitives import hashes, serialization
    from cryptography.hazmat.primitives.asymmetric import ec
    from cryptography.x509.oid import NameOID

    key = ec.generate_private_key(ec.SECP256R1())
    name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, hostname)])
    now = datetime.datetime.now(datetime.timezone.utc)
    cert = (
        x509.CertificateBuilder()
        .subject_name(name)
        .issuer_name(name)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - datetime.timedelta(minutes=5))
        .not_valid_after(now + datetime.timedelta(days=days))
        .add_extension(
            x509.SubjectAlternativeName([x509.DNSName(hostname), x509.IPAddress(ipaddress.ip_address(ip))]),
            critical=False,
        )
        .add_extension(x509.BasicConstraints(ca=True, path_length=None), critical=True)
        .sign(key, hashes.SHA256())
    )
    key_pem = key.private_bytes(serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8,
                                serialization.NoEncryption())
    return cert.public_bytes(serialization.Encoding.PEM), key_pem


def write_self_signed_certificate(directory, hostname: str = "localhost") -> tuple[str, str]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cert_pem, key_pem = make_self_signed_certificate(hostname)
    cert_path, key_path = directory / "cert.pem", directory / "key.pem"
    cert_path.write_bytes(cert_pem)
    key_path.write_bytes(key_pem)
    return str(cert_path), str(key_path)
