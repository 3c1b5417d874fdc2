import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from doqlab.bench.signaling import per_query_gap, round_trips, signaling_gap, simulate_signaling
from doqlab.transport import CLIENT_TO_SERVER, SERVER_TO_CLIENT, FakeNetworkConfig, FrameCostModel


def test_closed_form_gap():
    # 66 MAX_STREAMS + 60 ACK + 2 x 2 extra stream-frame header octets
    assert per_query_gap() == 130
    assert per_query_gap(FrameCostModel(max_streams_packet=70)) == 134


@pytest.mark.parametrize("n,gap", [(0, 0), (1, 130), (50, 6500), (100, 13000)])
def test_gap(n, gap):
    assert signaling_gap(n) == gap


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 30))
def test_gap_is_linear(n):
    assert signaling_gap(n) == n * signaling_gap(1)


def test_gap_tracks_cost_model():
    costs = FrameCostModel(ack_packet=40, max_streams_packet=30)
    assert signaling_gap(20, FakeNetworkConfig(frame_cost_model=costs)) == 20 * per_query_gap(costs)


def test_stream_mode_frames():
    s = simulate_signaling(50, "stream")
    assert s.frames_by_direction[SERVER_TO_CLIENT]["MAX_STREAMS"] == 50
    assert s.frames["STREAM"] == 100
    assert "DATAGRAM" not in s.frames


def test_one_time_costs_kept_apart():
    s = simulate_signaling(10, "datagram")
    d = simulate_signaling(0, "datagram")
    assert s.one_time_octets == d.one_time_octets == d.total_octets > 0
    assert s.total_octets == s.per_query_octets + s.one_time_octets
    assert sum(s.octets_by_direction.values()) == s.total_octets


def test_pmtud_is_one_time():
    with_probe = FakeNetworkConfig(frame_cost_model=FrameCostModel(include_pmtud=True))
    plain = simulate_signaling(5, "stream")
    probed = simulate_signaling(5, "stream", with_probe)
    assert probed.one_time_octets - plain.one_time_octets == 11600
    assert probed.per_query_octets == plain.per_query_octets


def test_round_trips_per_mode():
    from doqlab.bench.signaling import fake_workload
    from doqlab.client import ClientConfig
    from doqlab.clock import run_virtual

    stream = run_virtual(fake_workload(ClientConfig(count=20, spacing=0.1, mode_preference="stream"),
                                       FakeNetworkConfig()))
    datagram = run_virtual(fake_workload(ClientConfig(count=20, spacing=0.1), FakeNetworkConfig()))
    assert round_trips(stream.ledger, 20) == 2.0
    assert round_trips(datagram.ledger, 20) == 1.0
    assert stream.ledger.count("MAX_STREAMS", SERVER_TO_CLIENT) == 20
    assert datagram.ledger.count("DATAGRAM", CLIENT_TO_SERVER) == 20


def test_round_trips_with_acks():
    from doqlab.bench.signaling import fake_workload
    from doqlab.client import ClientConfig
    from doqlab.clock import run_virtual

    # spaced far apart so every ACK travels on its own: two per exchange in stream mode
    stream = run_virtual(fake_workload(ClientConfig(count=10, spacing=1.0, mode_preference="stream"),
                                       FakeNetworkConfig()))
    assert round_trips(stream.ledger, 10, include_acks=True) == 4.0
