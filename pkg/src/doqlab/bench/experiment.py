"""Scripted experiments: N queries per iteration, fresh connection each time.

Two backends share one metric set.  ``fake`` runs the engines on the
simulated network and virtual time; ``real`` runs stub resolver, proxy,
optional impairment relay and client over loopback with aioquic and reads
the client's qlog trace.
"""

from __future__ import annotations

import asyncio
import csv
import dataclasses
import json
import os
import statistics
import tempfile
from dataclasses import dataclass, field
from typing import Optional

from ..client import ClientConfig, LookupRun, run_lookup
from ..clock import run_virtual
from ..doq import DeliveryMode, RetryPolicy
from ..proxy import ServerConfig, StubZoneConfig, run_stub_resolver, serve
from ..transport import CLIENT_TO_SERVER, DIRECTIONS, SERVER_TO_CLIENT, FakeNetworkConfig
from .qlog import FrameHistogram, parse_qlog_frames
from .relay import RelayConfig, start_relay
from .signaling import _preference, fake_workload, round_trips, stub_zone_resolver
from .stats import BoxStats, summarize

BACKENDS = ("fake", "real")

# metric name -> file it lands in
FIGURES = {
    "time": ("wall_time_s", "mean_latency_ms"),
    "bytes": ("total_bytes_sent", "total_bytes_received"),
    "retransmissions": ("retransmissions", "round_trips", "round_trips_with_acks", "packets_lost"),
}


class ScenarioFailed(Exception):
    def __init__(self, report: "ExperimentReport", message: str):
        super().__init__(message)
        self.report = report


class IoFailure(OSError):
    pass


@dataclass
class Impairment:
    delay_ms: tuple = (0.0, 0.0)  # uniform bounds, each direction
    loss_rate: float = 0.0
    loss_direction: str = "both"

    def __post_init__(self):
        self.delay_ms = tuple(float(v) for v in self.delay_ms)
        RelayConfig(delay_ms=self.delay_ms, loss_rate=self.loss_rate, loss_direction=self.loss_direction)


@dataclass
class Scenario:
    mode: DeliveryMode = DeliveryMode.DATAGRAM
    query_count: int = 50
    spacing_ms: float = 500.0
    iterations: int = 10
    impairment: Optional[Impairment] = None
    backend: str = "fake"
    seed: int = 0
    domain: str = "example.org"
    scenario_id: str = ""

    def __post_init__(self):
        self.mode = DeliveryMode(self.mode)
        if isinstance(self.impairment, dict):
            self.impairment = Impairment(**self.impairment)
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.query_count < 1:
            raise ValueError("query_count must be at least 1")
        if self.spacing_ms < 0:
            raise ValueError("spacing_ms must be non-negative")
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}")
        if not self.scenario_id:
            self.scenario_id = f"{self.backend}-{self.mode.value}-{self.query_count}"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mode"] = self.mode.value
        if self.impairment is not None:
            d["impairment"]["delay_ms"] = list(self.impairment.delay_ms)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        return cls(**d)

    @classmethod
    def load(cls, path: str) -> "Scenario":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def iteration_seed(self, index: int) -> str:
        return f"{self.seed}:{index}"


@dataclass
class IterationSample:
    iteration: int
    total_bytes_sent: int = 0
    total_bytes_received: int = 0
    wall_time_s: float = 0.0
    latencies_ms: list = field(default_factory=list)
    retransmissions: int = 0
    round_trips: float = 0.0
    round_trips_with_acks: float = 0.0
    packets_lost: int = 0
    responded: int = 0
    answer_counts: list = field(default_factory=list)
    frame_histogram: dict = field(default_factory=dict)
    failure: Optional[str] = None

    @property
    def mean_latency_ms(self) -> Optional[float]:
        return statistics.fmean(self.latencies_ms) if self.latencies_ms else None

    def metric(self, name: str):
        return getattr(self, name)


@dataclass
class ExperimentReport:
    scenario: Scenario
    samples: list = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return any(s.failure for s in self.samples)

    def completed(self) -> list:
        return [s for s in self.samples if not s.failure]

    def compute_stats(self) -> dict:
        done = self.completed()
        self.stats = {}
        for names in FIGURES.values():
            for name in names:
                values = [s.metric(name) for s in done if s.metric(name) is not None]
                if values:
                    self.stats[name] = summarize(values)
        latencies = [v for s in done for v in s.latencies_ms]
        if latencies:
            self.stats["latency_ms"] = summarize(latencies)
        return self.stats

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "samples": [dataclasses.asdict(s) for s in self.samples],
            "stats": {k: v.to_dict() for k, v in self.stats.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(
            scenario=Scenario.from_dict(d["scenario"]),
            samples=[IterationSample(**s) for s in d["samples"]],
            stats={k: BoxStats.from_dict(v) for k, v in d["stats"].items()},
        )


def _client_config(scenario: Scenario, index: int, **kwargs) -> ClientConfig:
    return ClientConfig(
        domain=scenario.domain,
        count=scenario.query_count,
        spacing=scenario.spacing_ms / 1000.0,
        mode_preference=_preference(scenario.mode),
        retry=RetryPolicy(),
        seed=scenario.iteration_seed(index),
        **kwargs,
    )


def _fill_from_run(sample: IterationSample, run: LookupRun):
    summary = run.summary
    sample.wall_time_s = summary["wall_time_s"]
    sample.latencies_ms = [r.latency_ms for r in run.results if r.latency_ms is not None]
    sample.retransmissions = summary["retransmissions"]
    sample.responded = summary["responded"]
    sample.answer_counts = [r.answer_count for r in run.results]


def _fake_model(scenario: Scenario) -> FakeNetworkConfig:
    imp = scenario.impairment
    if imp is None:
        return FakeNetworkConfig()
    return FakeNetworkConfig(datagram_loss_rate=imp.loss_rate, loss_direction=imp.loss_direction,
                             one_way_delay=imp.delay_ms)


def _fake_iteration(scenario: Scenario, index: int) -> IterationSample:
    sample = IterationSample(index)
    client = _client_config(scenario, index)
    result = run_virtual(fake_workload(client, _fake_model(scenario), scenario.iteration_seed(index),
                                       stub_zone_resolver(StubZoneConfig(zone=scenario.domain))))
    _fill_from_run(sample, result.run)
    ledger = result.ledger
    sample.total_bytes_sent = ledger.octets(CLIENT_TO_SERVER)
    sample.total_bytes_received = ledger.octets(SERVER_TO_CLIENT)
    sample.round_trips = round_trips(ledger, scenario.query_count)
    sample.round_trips_with_acks = round_trips(ledger, scenario.query_count, include_acks=True)
    sample.packets_lost = sum(1 for e in ledger.entries if not e.delivered)
    sample.frame_histogram = {d: ledger.histogram(d) for d in DIRECTIONS}
    return sample


def qlog_round_trips(histogram: FrameHistogram, queries: int, include_acks: bool = False) -> float:
    """Same definition as the fake-network metric, counted in packets."""
    def packets(direction, frame_type, alone=False):
        stats = histogram.frames[direction].get(frame_type)
        if stats is None:
            return 0
        return stats.alone if alone else stats.packets

    total = (packets(CLIENT_TO_SERVER, "DATAGRAM") + packets(CLIENT_TO_SERVER, "STREAM")
             + packets(SERVER_TO_CLIENT, "MAX_STREAMS"))
    if include_acks:
        total += sum(packets(d, "ACK", alone=True) for d in DIRECTIONS)
    return total / queries


class RealBackend:
    """Loopback rig: stub resolver, proxy with datagrams on, optional relay."""

    def __init__(self, scenario: Scenario, workdir: Optional[str] = None):
        from ..quic_adapter import write_self_signed_certificate

        self.scenario = scenario
        self.cert, self.key = write_self_signed_certificate(workdir or tempfile.mkdtemp(prefix="doqlab-bench-"))

    async def iteration(self, index: int) -> IterationSample:
        scenario = self.scenario
        sample = IterationSample(index)
        stub_transport, _, stub_port = await run_stub_resolver(StubZoneConfig(zone=scenario.domain))
        proxy = relay = None
        try:
            proxy = await serve(ServerConfig(listen_port=0, cert_file=self.cert, key_file=self.key,
                                             upstream_host="127.0.0.1", upstream_port=stub_port,
                                             datagram_support=True))
            port = proxy.port
            imp = scenario.impairment
            if imp is not None:
                relay = await start_relay(RelayConfig(
                    target_port=proxy.port, delay_ms=imp.delay_ms, loss_rate=imp.loss_rate,
                    loss_direction=imp.loss_direction, seed=scenario.iteration_seed(index)))
                port = relay.port
            client = _client_config(scenario, index, server_host="127.0.0.1", server_port=port,
                                    ca_file=self.cert, server_name="localhost", qlog=True)
            run = await run_lookup(client)
        finally:
            if relay is not None:
                relay.close()
            if proxy is not None:
                await proxy.aclose()
            stub_transport.close()
        _fill_from_run(sample, run)
        histogram = parse_qlog_frames(run.qlog)
        sample.total_bytes_sent = histogram.octets[CLIENT_TO_SERVER]
        sample.total_bytes_received = histogram.octets[SERVER_TO_CLIENT]
        sample.round_trips = qlog_round_trips(histogram, scenario.query_count)
        sample.round_trips_with_acks = qlog_round_trips(histogram, scenario.query_count, include_acks=True)
        if relay is not None:
            sample.packets_lost = sum(c.dropped for c in relay.counters.values())
        sample.frame_histogram = {d: histogram.counts(d) for d in DIRECTIONS}
        return sample


def run_experiment(scenario: Scenario, progress=None) -> ExperimentReport:
    """Run every iteration in turn; raises ScenarioFailed carrying the partial report."""
    report = ExperimentReport(scenario)
    backend = RealBackend(scenario) if scenario.backend == "real" else None
    for index in range(scenario.iterations):
        try:
            if backend is None:
                sample = _fake_iteration(scenario, index)
            else:
                sample = asyncio.run(backend.iteration(index))
        except Exception as exc:  # an aborted iteration is recorded, the rest still run
            sample = IterationSample(index, failure=f"{type(exc).__name__}: {exc}")
        report.samples.append(sample)
        if progress is not None:
            progress(sample)
    report.compute_stats()
    if report.failed:
        bad = [s.iteration for s in report.samples if s.failure]
        raise ScenarioFailed(report, f"{scenario.scenario_id}: iterations {bad} aborted")
    return report


def emit_report(report: ExperimentReport, directory: str, formats=("csv", "json")) -> list:
    """Write ``<id>.json`` and one ``<id>_<figure>.csv`` per figure; returns the paths."""
    sid = report.scenario.scenario_id
    paths = []
    try:
        os.makedirs(directory, exist_ok=True)
        if "json" in formats:
            path = os.path.join(directory, f"{sid}.json")
            with open(path, "w") as fh:
                json.dump(report.to_dict(), fh, indent=2)
            paths.append(path)
        if "csv" in formats:
            for figure, metrics in FIGURES.items():
                path = os.path.join(directory, f"{sid}_{figure}.csv")
                with open(path, "w", newline="") as fh:
                    writer = csv.writer(fh)
                    writer.writerow(["scenario_id", "iteration", "metric", "value"])
                    for metric in metrics:
                        for s in report.samples:
                            value = s.metric(metric)
                            writer.writerow([sid, s.iteration, metric, "" if value is None else value])
                paths.append(path)
    except OSError as exc:
        raise IoFailure(f"cannot write report to {directory}: {exc}") from exc
    return paths


def load_report(path: str) -> ExperimentReport:
    with open(path) as fh:
        return ExperimentReport.from_dict(json.load(fh))
