"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The desk-run criterion drives 2 x 10 real iterations of 100 queries at
500 ms spacing, so this module takes about eight minutes.
"""

import asyncio
import math
import multiprocessing
import random
import statistics
import time
from concurrent.futures import ProcessPoolExecutor

import pytest
from doqlab.bench.experiment import Impairment, Scenario, run_experiment
from doqlab.bench.signaling import fake_workload, per_query_gap, signaling_gap
from doqlab.client import ClientConfig, run_lookup
from doqlab.clock import run_virtual
from doqlab.dns_codec import DnsCodecError, decode_message, encode_message, make_query
from doqlab.doq import (
    DatagramDispatcher,
    DeliveryMode,
    DoqClientConnection,
    ExchangeRecord,
    ModePreference,
    RetriesExhausted,
    RetryPolicy,
    exchange_datagram,
    negotiate_mode,
)
from doqlab.proxy import StubZoneConfig
from doqlab.quic_adapter import make_configuration, open_session
from doqlab.transport import (
    SERVER_TO_CLIENT,
    FakeNetworkConfig,
    HighWatermark,
    PerRetiredStream,
    SessionCapabilities,
    TappedSession,
)

from doq_helpers import Rig
from loopback import certificate, client_config, proxy_rig
from strategies import random_message


@pytest.fixture
def verdict(capsys):
    def report(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number:2d} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return report


# 1 -------------------------------------------------------------------------

def test_codec_soundness(verdict):
    rng = random.Random(1)
    start = time.monotonic()
    mismatches = untyped = 0
    for _ in range(10_000):
        msg = random_message(rng)
        wire = encode_message(msg)
        back = decode_message(wire)
        mismatches += back != msg or encode_message(back) != wire
    fuzzed = 0
    for i in range(20_000):
        # half arbitrary octets, half valid encodings with a few octets overwritten
        wire = bytearray(rng.randbytes(rng.randint(0, 600)) if i % 2 else encode_message(random_message(rng)))
        for _ in range(rng.randint(1, 4)):
            if wire:
                wire[rng.randrange(len(wire))] = rng.randrange(256)
        fuzzed += 1
        try:
            decode_message(bytes(wire))
        except DnsCodecError:
            pass
        except Exception:
            untyped += 1
    elapsed = time.monotonic() - start
    ok = mismatches == 0 and untyped == 0 and elapsed < 60
    verdict(1, ok, f"10000 round trips, {mismatches} mismatches, {fuzzed} fuzzed inputs, "
                   f"{untyped} untyped errors, {elapsed:.1f} s")


# 2 -------------------------------------------------------------------------

def test_mode_negotiation_truth_table(verdict):
    hits = 0
    for local in (0, 65535):
        for peer in (0, 65535):
            for preference in (ModePreference.AUTO, ModePreference.FORCE_STREAM):
                caps = SessionCapabilities(local, peer, 30.0)
                expected = (DeliveryMode.DATAGRAM
                            if local and peer and preference == ModePreference.AUTO else DeliveryMode.STREAM)
                hits += negotiate_mode(caps, preference) == expected
    verdict(2, hits == 8, f"{hits}/8 cases")


# 3 -------------------------------------------------------------------------

async def tapped_loopback_run(preference, count=100, spacing=0.05):
    async with proxy_rig() as (proxy, _):
        quic = make_configuration(True, ca_file=certificate()[0], server_name="localhost")
        async with open_session("127.0.0.1", proxy.port, quic) as session:
            tap = TappedSession(session)
            conn = DoqClientConnection(tap, preference, rng=random.Random(3))
            loop = asyncio.get_running_loop()
            start = loop.time()
            tasks = []
            for i in range(count):
                await asyncio.sleep(max(0.0, start + i * spacing - loop.time()))
                tasks.append(asyncio.ensure_future(conn.query("example.org")))
            records = await asyncio.gather(*tasks)
            await conn.close()
            return records, tap.records, conn.mode


def id_violations(records, wire):
    bad = 0
    for kind, data, _ in wire:
        txid = int.from_bytes(data[2:4], "big")
        bad += (txid != 0) if kind.startswith("stream") else (txid == 0)
    # two datagram exchanges sharing an id must not overlap in time
    spans = [(r.txid, r.send_timestamps[0], r.completed_at) for r in records
             if r.mode == DeliveryMode.DATAGRAM and r.send_timestamps]
    for i, (a, start_a, end_a) in enumerate(spans):
        for b, start_b, end_b in spans[i + 1:]:
            if a == b and start_b < (end_a if end_a is not None else math.inf) and start_a < (
                    end_b if end_b is not None else math.inf):
                bad += 1
    return bad


def test_transaction_id_discipline(verdict):
    details, ok = [], True
    for preference, expected in ((ModePreference.FORCE_STREAM, "stream"), (ModePreference.AUTO, "datagram")):
        records, wire, mode = asyncio.run(tapped_loopback_run(preference))
        responded = sum(r.response is not None for r in records)
        bad = id_violations(records, wire)
        messages_seen = len(wire)
        ok &= mode.value == expected and responded == 100 and bad == 0 and messages_seen >= 200
        details.append(f"{expected}: {responded}/100 responded, {messages_seen} wire messages, {bad} violations")
    verdict(3, ok, "; ".join(details))


# 4 -------------------------------------------------------------------------

def test_backoff_schedule(verdict):
    rig = Rig(FakeNetworkConfig(datagram_loss_rate=1.0, loss_direction="uplink"))

    async def scenario():
        client = await rig.connect()
        dispatcher = DatagramDispatcher(client).start()
        record = ExchangeRecord(0x1111, b"", DeliveryMode.DATAGRAM)
        try:
            await exchange_datagram(client, make_query("example.org", txid=0x1111), RetryPolicy(),
                                    dispatcher, record)
        except RetriesExhausted as exc:
            return record, exc
        return record, None

    record, error = run_virtual(scenario())
    offsets = [round((t - record.send_timestamps[0]) * 1000, 3) for t in record.send_timestamps]
    expected = [0, 200, 600, 1400, 3000, 6200]
    ok = (error is not None and len(offsets) == len(expected)
          and all(abs(a - b) <= 5 for a, b in zip(offsets, expected)))
    verdict(4, ok, f"send offsets {offsets} ms, then {type(error).__name__ if error else 'no error'}")


# 5 -------------------------------------------------------------------------

def test_loss_resilience(verdict):
    p = 0.3
    scenario = Scenario(mode="datagram", query_count=1000, spacing_ms=500, iterations=1, seed=0,
                        impairment=Impairment((10, 10), p, "uplink"))
    sample = run_experiment(scenario).samples[0]
    mean = sample.retransmissions / 1000
    expected = p / (1 - p)
    sigma = math.sqrt(p / (1 - p) ** 2 / 1000)
    ok = sample.responded == 1000 and abs(mean - expected) <= 3 * sigma
    verdict(5, ok, f"{sample.responded}/1000 responded, mean retransmissions {mean:.4f} "
                   f"vs {expected:.4f} +/- {3 * sigma:.4f}")


# 6 -------------------------------------------------------------------------

def test_signaling_reproduction(verdict):
    gap50, gap100 = signaling_gap(50), signaling_gap(100)
    ok = abs(gap50 - 6500) <= 650 and abs(gap100 - 13000) <= 1300 and gap100 == 2 * gap50
    verdict(6, ok, f"gap(50) = {gap50} B, gap(100) = {gap100} B, ratio {gap100 / gap50:g}, "
                   f"closed form {per_query_gap()} B/query")


# 7 -------------------------------------------------------------------------

def max_streams_entries(n, policy, credit=100):
    model = FakeNetworkConfig(stream_credit_policy=policy, initial_stream_credit=credit)
    client = ClientConfig(count=n, spacing=0.1, mode_preference="stream")
    ledger = run_virtual(fake_workload(client, model)).ledger
    return [e for e in ledger.entries if e.frame_type == "MAX_STREAMS"]


def test_max_streams_accounting(verdict):
    n = 100
    per = max_streams_entries(n, PerRetiredStream())
    per_ok = len(per) == n and all(e.octets == 66 and e.direction == SERVER_TO_CLIENT for e in per)
    watermark = {k: len(max_streams_entries(k, HighWatermark(0.5))) for k in (49, 50, 100)}
    ok = per_ok and watermark == {49: 0, 50: 1, 100: 2}
    verdict(7, ok, f"{len(per)} MAX_STREAMS entries for {n} queries, sizes {sorted({e.octets for e in per})}; "
                   f"watermark entries by retirements {watermark}")


# 8 -------------------------------------------------------------------------

def desk_run(mode):
    scenario = Scenario(mode=mode, query_count=100, spacing_ms=500, iterations=10, backend="real", seed=8)
    return run_experiment(scenario).to_dict()


@pytest.mark.slow
def test_end_to_end_desk_run(verdict):
    # the two modes run side by side in separate processes to halve the wall-clock cost
    with ProcessPoolExecutor(2, mp_context=multiprocessing.get_context("spawn")) as pool:
        stream, datagram = pool.map(desk_run, ["stream", "datagram"])
    ok, details = True, []
    means = {}
    for name, report in (("stream", stream), ("datagram", datagram)):
        samples = report["samples"]
        walls = [s["wall_time_s"] for s in samples]
        complete = all(s["responded"] == 100 and s["answer_counts"] == [4] * 100 for s in samples)
        in_band = all(49.5 <= w <= 60 for w in walls)
        means[name] = statistics.fmean(walls)
        ok &= complete and in_band and len(samples) == 10
        details.append(f"{name} complete={complete} wall {min(walls):.2f}-{max(walls):.2f} s")
    parity = abs(means["stream"] - means["datagram"]) / statistics.fmean(means.values())
    ok &= parity < 0.02
    verdict(8, ok, "; ".join(details) + f"; mean wall {means['stream']:.3f} vs {means['datagram']:.3f} s, "
                                        f"difference {parity * 100:.3f}%")


# 9 -------------------------------------------------------------------------

def test_impairment_behavior(verdict):
    impairment = Impairment((115, 135), 0.05)
    completed = {}
    for mode in ("stream", "datagram"):
        scenario = Scenario(mode=mode, query_count=100, spacing_ms=100, iterations=1, backend="real", seed=9,
                            impairment=impairment)
        completed[mode] = run_experiment(scenario).samples[0].responded
    sim = {}
    for mode in ("stream", "datagram"):
        scenario = Scenario(mode=mode, query_count=100, spacing_ms=100, iterations=10, seed=9,
                            impairment=impairment)
        sim[mode] = run_experiment(scenario).samples
    # datagram: one send plus its retransmissions; stream: sends, credit refills and ACK exchanges
    datagram = statistics.fmean(1 + s.retransmissions / 100 for s in sim["datagram"])
    stream = statistics.fmean(s.round_trips_with_acks for s in sim["stream"])
    stream_without_acks = statistics.fmean(s.round_trips for s in sim["stream"])
    ok = completed == {"stream": 100, "datagram": 100} and datagram < stream
    verdict(9, ok, f"responded {completed}; simulated round trips per query datagram {datagram:.3f} "
                   f"vs stream {stream:.3f} ({stream_without_acks:.3f} without ACK exchanges)")


# 10 ------------------------------------------------------------------------

def test_truncation_fallback(verdict):
    addresses = tuple(f"192.0.2.{i}" for i in range(1, 41))

    async def scenario():
        async with proxy_rig(stub_config=StubZoneConfig(addresses=addresses)) as (proxy, _):
            run = await run_lookup(client_config(proxy, count=1, max_datagram_frame_size=300))
            return run, sum(c.truncated for c in proxy.connections)

    run, truncated = asyncio.run(scenario())
    result = run.results[0]
    ok = (truncated == 1 and result.fell_back and result.mode == "stream"
          and result.answer_count == len(addresses) and result.outcome == "responded")
    verdict(10, ok, f"server truncations {truncated}, fell back {result.fell_back}, "
                    f"answers over {result.mode}: {result.answer_count}/{len(addresses)}")
