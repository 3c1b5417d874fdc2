import asyncio

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from doqlab.clock import run_virtual
from doqlab.transport import (
    CLIENT_TO_SERVER,
    SERVER_TO_CLIENT,
    ConnectionClosed,
    DatagramsUnsupported,
    DatagramTooLarge,
    FakeNetwork,
    FakeNetworkConfig,
    FrameLedger,
    HighWatermark,
    PeerStreamError,
    PerRetiredStream,
    SessionCapabilities,
    StreamsExhausted,
)


def pair(config=None, seed=0, client_size=65535, server_size=65535):
    """Connect a client to a server that just collects its sessions."""
    net = FakeNetwork(config, seed)
    servers = []
    net.listen(servers.append, max_datagram_frame_size=server_size)

    async def go():
        client = await net.connect(max_datagram_frame_size=client_size)
        return client, servers[0]

    return net, go


async def echo_streams(server):
    while True:
        try:
            stream = await server.accept_bidirectional_stream()
            data = await stream.read_to_end()
            stream.write(data, end_stream=True)
        except ConnectionClosed:
            return


async def one_stream_exchange(client, payload=b"q" * 40):
    stream = client.open_bidirectional_stream()
    stream.write(payload, end_stream=True)
    return await stream.read_to_end()


def test_first_stream_and_credit_exhaustion():
    net, connect = pair(FakeNetworkConfig(initial_stream_credit=100))

    async def scenario():
        client, server = await connect()
        first = client.open_bidirectional_stream()
        assert first.stream_id == 0
        for _ in range(99):
            client.open_bidirectional_stream()
        with pytest.raises(StreamsExhausted):
            client.open_bidirectional_stream()
        client.close()
        with pytest.raises(ConnectionClosed):
            client.open_bidirectional_stream()

    run_virtual(scenario())


def test_credit_replenished_after_retirement():
    net, connect = pair(FakeNetworkConfig(initial_stream_credit=2))

    async def scenario():
        client, server = await connect()
        task = asyncio.ensure_future(echo_streams(server))
        for i in range(5):
            stream = await client.open_stream_when_possible()
            stream.write(b"x", end_stream=True)
        # the fifth open had to wait for MAX_STREAMS from the server
        assert client.stream_limit >= 5
        client.close()
        await task

    run_virtual(scenario())


def test_datagram_send_rules():
    async def scenario():
        _, connect = pair()
        client, server = await connect()
        client.send_datagram(bytes(31))
        assert await server.receive_datagram() == bytes(31)

        _, connect = pair(server_size=0)
        client, _ = await connect()
        with pytest.raises(DatagramsUnsupported):
            client.send_datagram(bytes(31))

        _, connect = pair(server_size=100)
        client, _ = await connect()
        assert client.max_datagram_payload() == 97  # 1 type octet, 2 length octets
        client.send_datagram(bytes(97))
        with pytest.raises(DatagramTooLarge):
            client.send_datagram(bytes(98))

    run_virtual(scenario())


def test_datagrams_may_reorder_but_arrive_whole():
    config = FakeNetworkConfig(one_way_delay=(0.0, 100.0))
    orders = set()
    for seed in range(10):
        _, connect = pair(config, seed)

        async def scenario():
            client, server = await connect()
            client.send_datagram(b"A" * 10)
            client.send_datagram(b"B" * 20)
            return [await server.receive_datagram(), await server.receive_datagram()]

        got = run_virtual(scenario())
        assert set(got) == {b"A" * 10, b"B" * 20}
        orders.add(tuple(got))
    assert len(orders) == 2  # both orders were seen across seeds


def test_idle_timeout_closes():
    _, connect = pair(FakeNetworkConfig(idle_timeout=30.0))

    async def scenario():
        client, server = await connect()
        loop = asyncio.get_running_loop()
        start = loop.time()
        with pytest.raises(ConnectionClosed):
            await client.receive_datagram()
        assert loop.time() - start == pytest.approx(30.0, abs=0.1)

    run_virtual(scenario())


def test_total_loss_never_yields():
    _, connect = pair(FakeNetworkConfig(datagram_loss_rate=1.0))

    async def scenario():
        client, server = await connect()
        client.send_datagram(b"lost")
        with pytest.raises(asyncio.TimeoutError):
            await asyncio.wait_for(server.receive_datagram(), 5.0)

    run_virtual(scenario())


def test_stream_exchange_ledger_has_one_max_streams():
    net, connect = pair()

    async def scenario():
        client, server = await connect()
        task = asyncio.ensure_future(echo_streams(server))
        assert await one_stream_exchange(client) == b"q" * 40
        await asyncio.sleep(1.0)
        ledger = client.frame_ledger()
        client.close()
        await task
        return ledger

    ledger = run_virtual(scenario())
    max_streams = [e for e in ledger.entries if e.frame_type == "MAX_STREAMS"]
    assert len(max_streams) == 1
    assert max_streams[0].octets == 66 and max_streams[0].direction == SERVER_TO_CLIENT
    # response ACK, then MAX_STREAMS, then its ACK
    tail = [(e.direction, e.frame_type) for e in ledger.entries if not e.one_time][-4:]
    assert tail == [(CLIENT_TO_SERVER, "ACK"), (SERVER_TO_CLIENT, "MAX_STREAMS"),
                    (CLIENT_TO_SERVER, "ACK"), (CLIENT_TO_SERVER, "CONNECTION_CLOSE")]


def test_datagram_exchange_ledger_has_no_max_streams():
    net, connect = pair()

    async def scenario():
        client, server = await connect()
        client.send_datagram(b"q" * 40)
        server.send_datagram(await server.receive_datagram())
        await client.receive_datagram()
        await asyncio.sleep(1.0)
        return client.frame_ledger()

    ledger = run_virtual(scenario())
    assert ledger.count("MAX_STREAMS") == 0
    assert ledger.count("DATAGRAM") == 2


@pytest.mark.parametrize("retired,expected", [(49, 0), (50, 1), (99, 1), (100, 2)])
def test_high_watermark(retired, expected):
    config = FakeNetworkConfig(stream_credit_policy=HighWatermark(0.5), initial_stream_credit=100)
    _, connect = pair(config)

    async def scenario():
        client, server = await connect()
        task = asyncio.ensure_future(echo_streams(server))
        for _ in range(retired):
            stream = await client.open_stream_when_possible()
            stream.write(b"x", end_stream=True)
            await stream.read_to_end()
        await asyncio.sleep(1.0)
        ledger = client.frame_ledger()
        client.close()
        await task
        return ledger

    assert run_virtual(scenario()).count("MAX_STREAMS") == expected


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 30), st.integers(0, 1000))
def test_per_retired_stream_count_matches_closed_streams(n, seed):
    config = FakeNetworkConfig(stream_credit_policy=PerRetiredStream(), one_way_delay=(1.0, 30.0))
    _, connect = pair(config, seed)

    async def scenario():
        client, server = await connect()
        task = asyncio.ensure_future(echo_streams(server))
        streams = []
        for _ in range(n):
            stream = await client.open_stream_when_possible()
            stream.write(b"abc", end_stream=True)
            streams.append(stream)
        for stream in streams:
            await stream.read_to_end()
        await asyncio.sleep(2.0)
        retired = server.retired_total
        ledger = client.frame_ledger()
        client.close()
        await task
        return ledger, retired

    ledger, retired = run_virtual(scenario())
    assert retired == n
    assert ledger.count("MAX_STREAMS") == n


def test_stream_data_ordered_despite_jitter():
    config = FakeNetworkConfig(one_way_delay=(0.0, 80.0))
    _, connect = pair(config, seed=3)

    async def scenario():
        client, server = await connect()
        stream = client.open_bidirectional_stream()
        chunks = [bytes([i]) * (i + 1) for i in range(20)]
        for chunk in chunks:
            stream.write(chunk)
        stream.finish()
        peer = await server.accept_bidirectional_stream()
        return await peer.read_to_end(), b"".join(chunks)

    got, sent = run_virtual(scenario())
    assert got == sent


def test_reset_surfaces_code():
    _, connect = pair()

    async def scenario():
        client, server = await connect()
        stream = client.open_bidirectional_stream()
        stream.write(b"query", end_stream=True)
        peer = await server.accept_bidirectional_stream()
        await peer.read_to_end()
        peer.reset(0x4)
        with pytest.raises(PeerStreamError) as info:
            await stream.read_to_end()
        return info.value.code

    assert run_virtual(scenario()) == 0x4


def run_mixed(seed, config):
    _, connect = pair(config, seed)

    async def scenario():
        client, server = await connect()
        task = asyncio.ensure_future(echo_streams(server))
        for i in range(5):
            client.send_datagram(bytes([i]) * 30)
            await one_stream_exchange(client)
        await asyncio.sleep(0.5)
        while True:
            try:
                await asyncio.wait_for(server.receive_datagram(), 0.01)
            except asyncio.TimeoutError:
                break
        client.close()
        await task
        return client.frame_ledger().to_json()

    return run_virtual(scenario())


def test_fake_is_deterministic():
    config = FakeNetworkConfig(datagram_loss_rate=0.4, one_way_delay=(1.0, 50.0))
    first = run_mixed(7, config)
    assert run_mixed(7, config) == first
    assert run_mixed(8, config) != first
    assert FrameLedger.from_json(first).to_json() == first


@given(st.sampled_from([0, 1, 1200, 65535]), st.sampled_from([0, 1, 1200, 65535]))
def test_capability_symmetry(local, peer):
    caps = SessionCapabilities(local, peer)
    assert caps.datagrams_supported == (local > 0 and peer > 0)
    assert (caps.max_datagram_payload() > 0) <= caps.datagrams_supported


def test_config_validation():
    with pytest.raises(ValueError):
        FakeNetworkConfig(datagram_loss_rate=1.5)
    with pytest.raises(ValueError):
        FakeNetworkConfig(one_way_delay=(5.0, 1.0))
    with pytest.raises(ValueError):
        HighWatermark(0.0)
