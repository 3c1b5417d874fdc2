import asyncio
import socket

import pytest

from doqlab.client import run_lookup
from doqlab.dns_codec import (
    Rcode,
    RecordType,
    answer_addresses,
    decode_message,
    encode_message,
    frame_message,
    make_query,
)
from doqlab.doq import exchange_stream
from doqlab.proxy import ServerConfig, StubZoneConfig, UpstreamForwarder, run_stub_resolver
from doqlab.quic_adapter import make_configuration, open_session

from loopback import certificate, client_config, proxy_rig

STUB = ["192.0.2.1", "192.0.2.2", "192.0.2.3", "192.0.2.4"]


def udp_ask(port, wire, timeout=2.0):
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as sock:
        sock.settimeout(timeout)
        sock.sendto(wire, ("127.0.0.1", port))
        return sock.recv(65535)


async def with_stub(fn, config=None):
    transport, stub, port = await run_stub_resolver(config or StubZoneConfig())
    try:
        return await asyncio.get_running_loop().run_in_executor(None, fn, port), stub
    finally:
        transport.close()


def test_stub_answers():
    def ask(port):
        a = decode_message(udp_ask(port, encode_message(make_query("Example.org", txid=0x4242))))
        aaaa = decode_message(udp_ask(port, encode_message(make_query("example.org", RecordType.AAAA, 7))))
        other = decode_message(udp_ask(port, encode_message(make_query("example.net", txid=8))))
        return a, aaaa, other

    (a, aaaa, other), stub = asyncio.run(with_stub(ask))
    assert a.header.id == 0x4242 and answer_addresses(a) == STUB
    assert a.answers[0].name == (b"Example", b"org")
    assert aaaa.header.rcode == Rcode.NOERROR and not aaaa.answers
    assert other.header.rcode == Rcode.NXDOMAIN
    assert stub.queries == 3


def test_stub_nxdomain_for_other_types_when_configured():
    config = StubZoneConfig(nodata_for_other_types=False)

    def ask(port):
        return decode_message(udp_ask(port, encode_message(make_query("example.org", RecordType.AAAA, 1))))

    reply, _ = asyncio.run(with_stub(ask, config))
    assert reply.header.rcode == Rcode.NXDOMAIN


def test_stub_drops_garbage():
    def ask(port):
        with pytest.raises(socket.timeout):
            udp_ask(port, b"\x01\x02\x03", timeout=0.3)

    _, stub = asyncio.run(with_stub(ask))
    assert stub.dropped == 1


def test_stub_zone_parse():
    zone = StubZoneConfig.parse("example.org=192.0.2.1,192.0.2.2,192.0.2.3,192.0.2.4")
    assert zone.zone == "example.org" and list(zone.addresses) == STUB
    with pytest.raises(ValueError):
        StubZoneConfig.parse("example.org=")


def test_server_config_validation():
    with pytest.raises(ValueError):
        ServerConfig(upstream_timeout=0)


def test_forwarder_rewrites_and_restores_ids():
    async def scenario():
        transport, stub, port = await run_stub_resolver(StubZoneConfig())
        forwarder = await UpstreamForwarder("127.0.0.1", port).start()
        try:
            zero = await forwarder.forward(make_query("example.org", txid=0))
            dgram = await forwarder.forward(make_query("example.org", txid=0x7777))
            pair = await asyncio.gather(forwarder.forward(make_query("example.org", txid=5)),
                                        forwarder.forward(make_query("example.org", txid=5)))
            return zero, dgram, pair, stub.seen_ids, forwarder.pending_ids
        finally:
            forwarder.close()
            transport.close()

    zero, dgram, pair, upstream_ids, pending = asyncio.run(scenario())
    assert zero.header.id == 0 and dgram.header.id == 0x7777
    assert all(r.header.id == 5 and answer_addresses(r) == STUB for r in pair)
    assert 0 not in upstream_ids and upstream_ids[1] != 0x7777
    assert upstream_ids[2] != upstream_ids[3]
    assert pending == set()


def test_forwarder_times_out():
    async def scenario():
        silent = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        silent.bind(("127.0.0.1", 0))
        forwarder = await UpstreamForwarder("127.0.0.1", silent.getsockname()[1], timeout=0.1, retries=2).start()
        try:
            with pytest.raises(Exception) as info:
                await forwarder.forward(make_query("example.org"))
            return type(info.value).__name__, silent
        finally:
            forwarder.close()

    name, silent = asyncio.run(scenario())
    # three sends reached the silent socket
    silent.settimeout(0.1)
    got = 0
    try:
        while True:
            silent.recv(2048)
            got += 1
    except socket.timeout:
        pass
    silent.close()
    assert name == "UpstreamTimeout" and got == 3


def test_upstream_unreachable_gives_servfail():
    async def scenario():
        silent = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        silent.bind(("127.0.0.1", 0))
        async with proxy_rig(upstream_port=silent.getsockname()[1], upstream_timeout=0.1,
                             upstream_retries=1) as (proxy, _):
            run = await run_lookup(client_config(proxy, count=2))
        silent.close()
        return run

    run = asyncio.run(scenario())
    assert all(r.outcome == "responded" and r.answer_count == 0 for r in run.results)


@pytest.mark.parametrize("server_datagrams,expected", [(True, "datagram"), (False, "stream")])
def test_mode_follows_server_advertisement(server_datagrams, expected):
    async def scenario():
        async with proxy_rig(datagrams=server_datagrams) as (proxy, stub):
            return await run_lookup(client_config(proxy, count=5)), stub.seen_ids

    run, upstream_ids = asyncio.run(scenario())
    assert run.summary["mode"] == expected and run.summary["responded"] == 5
    assert all(r.answer_count == 4 and r.mode == expected for r in run.results)
    assert 0 not in upstream_ids


def test_stream_query_over_quic_keeps_zero_id():
    async def scenario():
        async with proxy_rig(datagrams=False) as (proxy, _):
            config = make_configuration(True, ca_file=certificate()[0], server_name="localhost")
            async with open_session("127.0.0.1", proxy.port, config) as session:
                return await exchange_stream(session, make_query("example.org"))

    response = asyncio.run(scenario())
    assert response.header.id == 0 and answer_addresses(response) == STUB


def test_datagram_query_over_quic_echoes_id():
    async def scenario():
        async with proxy_rig() as (proxy, stub):
            config = make_configuration(True, ca_file=certificate()[0], server_name="localhost")
            async with open_session("127.0.0.1", proxy.port, config) as session:
                session.send_datagram(frame_message(encode_message(make_query("example.org", txid=0x0A0B))))
                reply = await asyncio.wait_for(session.receive_datagram(), 5)
                return decode_message(reply[2:]), stub.seen_ids

    response, upstream_ids = asyncio.run(scenario())
    assert response.header.id == 0x0A0B and answer_addresses(response) == STUB
    assert upstream_ids[0] not in (0, 0x0A0B) or len(upstream_ids) == 1


def test_many_clients_both_modes_no_cross_talk():
    async def scenario():
        async with proxy_rig() as (proxy, stub):
            configs = [client_config(proxy, count=50, spacing=0.005, mode_preference="stream" if i % 2 else "auto",
                                     seed=i)
                       for i in range(10)]
            runs = await asyncio.gather(*(run_lookup(c) for c in configs))
            return runs, stub.queries, proxy.forwarder.forwarded, len(proxy.connections)

    runs, upstream_queries, forwarded, connections = asyncio.run(scenario())
    # retransmitted datagrams that reach the proxy are forwarded too
    retransmissions = sum(run.summary["retransmissions"] for run in runs)
    assert connections == 10 and forwarded == upstream_queries
    assert 500 <= forwarded <= 500 + retransmissions
    for i, run in enumerate(runs):
        assert run.summary["responded"] == 50
        assert run.summary["mode"] == ("stream" if i % 2 else "datagram")
        assert all(r.answer_count == 4 for r in run.results)
