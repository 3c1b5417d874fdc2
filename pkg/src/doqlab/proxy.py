"""DoQ server that forwards every query to a classic UDP resolver, plus a stub resolver."""

from __future__ import annotations

import argparse
import asyncio
import logging
import random
import sys
import tempfile
from dataclasses import dataclass, field
from typing import Optional

from .client import parse_host_port
from .dns_codec import (
    DEFAULT_RESPONSE_PAD_BLOCK,
    DnsCodecError,
    DnsMessage,
    Rcode,
    RecordType,
    a_record,
    decode_message,
    encode_message,
    make_response,
    names_equal,
    parse_name,
    strip_padding,
)
from .doq import DEFAULT_PENDING_CAP, DEFAULT_PORT, DoqServerConnection
from .transport import DEFAULT_IDLE_TIMEOUT, RECOMMENDED_MAX_DATAGRAM_FRAME_SIZE

log = logging.getLogger("doqlab.proxy")


class BindFailed(OSError):
    pass


class UpstreamTimeout(Exception):
    pass


class UpstreamMalformed(Exception):
    pass


@dataclass
class ServerConfig:
    listen_host: str = "127.0.0.1"
    listen_port: int = DEFAULT_PORT
    cert_file: Optional[str] = None
    key_file: Optional[str] = None
    upstream_host: str = "8.8.8.8"
    upstream_port: int = 53
    upstream_timeout: float = 2.0
    upstream_retries: int = 2
    datagram_support: bool = False
    pending_query_cap: int = DEFAULT_PENDING_CAP
    padding_block_response: Optional[int] = DEFAULT_RESPONSE_PAD_BLOCK
    max_datagram_frame_size: int = RECOMMENDED_MAX_DATAGRAM_FRAME_SIZE
    idle_timeout: float = DEFAULT_IDLE_TIMEOUT
    qlog: bool = False

    def __post_init__(self):
        if self.upstream_timeout <= 0:
            raise ValueError("upstream_timeout must be positive")
        if self.upstream_retries < 0:
            raise ValueError("upstream_retries must be non-negative")


@dataclass
class StubZoneConfig:
    zone: str = "example.org"
    addresses: tuple = ("192.0.2.1", "192.0.2.2", "192.0.2.3", "192.0.2.4")
    ttl: int = 300
    # AAAA and other types at the apex: NOERROR with no answers, or NXDOMAIN
    nodata_for_other_types: bool = True

    @classmethod
    def parse(cls, text: str) -> "StubZoneConfig":
        """``name=ip1,ip2,...``"""
        zone, _, ips = text.partition("=")
        addresses = tuple(ip.strip() for ip in ips.split(",") if ip.strip())
        if not zone or not addresses:
            raise ValueError(f"stub zone must look like name=ip1,ip2,ip3,ip4, got {text!r}")
        return cls(zone=zone, addresses=addresses)


# -- upstream forwarding ----------------------------------------------------

class _UpstreamProtocol(asyncio.DatagramProtocol):
    def __init__(self, forwarder: "UpstreamForwarder"):
        self.forwarder = forwarder

    def datagram_received(self, data, addr):
        self.forwarder._on_response(data)


class UpstreamForwarder:
    """Relays decoded queries to one UDP resolver under fresh Transaction IDs."""

    def __init__(self, host: str, port: int, timeout: float = 2.0, retries: int = 2,
                 rng: Optional[random.Random] = None):
        self.host, self.port = host, port
        self.timeout = timeout
        self.retries = retries
        self.rng = rng or random.Random()
        self._pending = {}
        self._transport = None
        self.forwarded = 0
        self.timeouts = 0
        self.malformed = 0
        self.stray = 0

    async def start(self):
        loop = asyncio.get_running_loop()
        self._transport, _ = await loop.create_datagram_endpoint(
            lambda: _UpstreamProtocol(self), remote_addr=(self.host, self.port))
        return self

    def close(self):
        if self._transport is not None:
            self._transport.close()
        for future, _ in self._pending.values():
            if not future.done():
                future.cancel()

    @property
    def pending_ids(self) -> set:
        return set(self._pending)

    def _fresh_id(self) -> int:
        if len(self._pending) >= 0xFFFF:
            raise UpstreamTimeout("no free upstream transaction IDs")
        while True:
            txid = self.rng.randint(1, 0xFFFF)
            if txid not in self._pending:
                return txid

    async def forward(self, query: DnsMessage) -> DnsMessage:
        upstream_id = self._fresh_id()
        wire = encode_message(strip_padding(query).with_header(id=upstream_id))
        future = asyncio.get_running_loop().create_future()
        self._pending[upstream_id] = (future, query)
        self.forwarded += 1
        try:
            for _ in range(1 + self.retries):
                self._transport.sendto(wire)
                try:
                    response = await asyncio.wait_for(asyncio.shield(future), self.timeout)
                except asyncio.TimeoutError:
                    continue
                return response.with_header(id=query.header.id)
            self.timeouts += 1
            raise UpstreamTimeout(f"{self.host}:{self.port} silent after {1 + self.retries} attempts")
        finally:
            del self._pending[upstream_id]
            if not future.done():
                future.cancel()

    def _on_response(self, data: bytes):
        txid = int.from_bytes(data[:2], "big") if len(data) >= 2 else None
        entry = self._pending.get(txid)
        if entry is None:
            self.stray += 1
            return
        future, query = entry
        if future.done():
            return
        try:
            response = decode_message(data)
        except DnsCodecError as exc:
            self.malformed += 1
            future.set_exception(UpstreamMalformed(str(exc)))
            return
        same_question = len(response.questions) == len(query.questions) and all(
            names_equal(a.qname, b.qname) and a.qtype == b.qtype
            for a, b in zip(response.questions, query.questions))
        if not response.header.qr or not same_question:
            self.malformed += 1
            future.set_exception(UpstreamMalformed("response does not match the query"))
            return
        future.set_result(response)


# -- stub resolver ----------------------------------------------------------

class StubResolver(asyncio.DatagramProtocol):
    def __init__(self, config: StubZoneConfig):
        self.config = config
        self.zone = parse_name(config.zone)
        self.queries = 0
        self.dropped = 0
        self.seen_ids = []
        self.transport = None

    def connection_made(self, transport):
        self.transport = transport

    def answer(self, query: DnsMessage) -> DnsMessage:
        q = query.questions[0]
        if not names_equal(q.qname, self.zone):
            return make_response(query, rcode=Rcode.NXDOMAIN).with_header(aa=True)
        if q.qtype == RecordType.A:
            answers = [a_record(q.qname, ip, self.config.ttl) for ip in self.config.addresses]
            return make_response(query, answers).with_header(aa=True)
        rcode = Rcode.NOERROR if self.config.nodata_for_other_types else Rcode.NXDOMAIN
        return make_response(query, rcode=rcode).with_header(aa=True)

    def datagram_received(self, data, addr):
        try:
            query = decode_message(data)
        except DnsCodecError:
            self.dropped += 1
            return
        if query.header.qr or len(query.questions) != 1:
            self.dropped += 1
            return
        self.queries += 1
        self.seen_ids.append(query.header.id)
        # the OPT record is not echoed; the stub speaks plain DNS
        reply = self.answer(query.with_sections(additionals=()))
        self.transport.sendto(encode_message(reply), addr)


async def run_stub_resolver(config: StubZoneConfig, host: str = "127.0.0.1", port: int = 0):
    """Start the stub; returns ``(transport, protocol, bound_port)``."""
    loop = asyncio.get_running_loop()
    try:
        transport, protocol = await loop.create_datagram_endpoint(
            lambda: StubResolver(config), local_addr=(host, port))
    except OSError as exc:
        raise BindFailed(f"stub resolver cannot bind {host}:{port}: {exc}") from exc
    return transport, protocol, transport.get_extra_info("sockname")[1]


# -- DoQ front end ----------------------------------------------------------

@dataclass
class ProxyServer:
    config: ServerConfig
    forwarder: UpstreamForwarder
    quic_server: object = None
    port: int = 0
    connections: list = field(default_factory=list)
    tasks: set = field(default_factory=set)

    def close(self):
        for task in self.tasks:
            task.cancel()
        if self.quic_server is not None:
            self.quic_server.close()
        self.forwarder.close()

    async def aclose(self):
        tasks = list(self.tasks)
        self.close()
        await asyncio.gather(*tasks, return_exceptions=True)


async def serve(config: ServerConfig, rng: Optional[random.Random] = None) -> ProxyServer:
    from .quic_adapter import bound_port, make_configuration, start_server

    forwarder = await UpstreamForwarder(config.upstream_host, config.upstream_port,
                                        config.upstream_timeout, config.upstream_retries, rng).start()
    proxy = ProxyServer(config, forwarder)

    def on_session(session):
        conn = DoqServerConnection(session, forwarder.forward, config.pending_query_cap,
                                   config.padding_block_response)
        proxy.connections.append(conn)
        task = asyncio.ensure_future(conn.run())
        proxy.tasks.add(task)
        task.add_done_callback(proxy.tasks.discard)

    quic_config = make_configuration(
        False,
        max_datagram_frame_size=config.max_datagram_frame_size if config.datagram_support else 0,
        idle_timeout=config.idle_timeout,
        qlog=config.qlog,
        cert_file=config.cert_file,
        key_file=config.key_file,
    )
    try:
        proxy.quic_server = await start_server(config.listen_host, config.listen_port, quic_config, on_session)
    except OSError as exc:
        forwarder.close()
        raise BindFailed(f"cannot bind {config.listen_host}:{config.listen_port}: {exc}") from exc
    proxy.port = bound_port(proxy.quic_server)
    return proxy


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="doq-proxy", description="DoQ server forwarding to a UDP resolver.")
    p.add_argument("--listen", default=f"127.0.0.1:{DEFAULT_PORT}")
    p.add_argument("--cert", help="PEM certificate; a self-signed one is generated if omitted")
    p.add_argument("--key", help="PEM private key")
    p.add_argument("--upstream", default="8.8.8.8:53", help="classic DNS resolver host:port")
    p.add_argument("--upstream-timeout", type=float, default=2.0)
    p.add_argument("--upstream-retries", type=int, default=2)
    p.add_argument("--enable-datagrams", action="store_true")
    p.add_argument("--pending-cap", type=int, default=DEFAULT_PENDING_CAP)
    p.add_argument("--padding-block", type=int, default=DEFAULT_RESPONSE_PAD_BLOCK, help="0 disables padding")
    p.add_argument("--stub-zone", help="serve name=ip1,ip2,ip3,ip4 from a local stub instead of --upstream")
    p.add_argument("--verbose", action="store_true")
    return p


async def _run(args) -> None:
    host, port = parse_host_port(args.listen)
    upstream_host, upstream_port = parse_host_port(args.upstream, 53)
    if args.stub_zone:
        _, stub, upstream_port = await run_stub_resolver(StubZoneConfig.parse(args.stub_zone))
        upstream_host = "127.0.0.1"
        log.info("stub resolver for %s on 127.0.0.1:%d", stub.config.zone, upstream_port)
    cert, key = args.cert, args.key
    if not cert:
        from .quic_adapter import write_self_signed_certificate

        cert, key = write_self_signed_certificate(tempfile.mkdtemp(prefix="doq-proxy-"))
        print(f"self-signed certificate: {cert}", file=sys.stderr)
    config = ServerConfig(
        listen_host=host, listen_port=port, cert_file=cert, key_file=key,
        upstream_host=upstream_host, upstream_port=upstream_port,
        upstream_timeout=args.upstream_timeout, upstream_retries=args.upstream_retries,
        datagram_support=args.enable_datagrams, pending_query_cap=args.pending_cap,
        padding_block_response=args.padding_block or None,
    )
    proxy = await serve(config)
    print(f"listening on {host}:{proxy.port} (datagrams {'on' if config.datagram_support else 'off'})",
          file=sys.stderr)
    try:
        await asyncio.Event().wait()
    finally:
        await proxy.aclose()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        asyncio.run(_run(args))
    except KeyboardInterrupt:
        return 0
    except (BindFailed, ValueError) as exc:
        print(f"doq-proxy: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
