"""DoQ lookup tool: N queries for one name over one long-lived connection."""

from __future__ import annotations

import argparse
import asyncio
import json
import random
import statistics
import sys
from dataclasses import asdict, dataclass, field
from typing import Optional

from .dns_codec import DEFAULT_QUERY_PAD_BLOCK, RecordType
from .doq import DEFAULT_PORT, DoqClientConnection, ExchangeRecord, ModePreference, Outcome, RetryPolicy
from .transport import DEFAULT_IDLE_TIMEOUT, RECOMMENDED_MAX_DATAGRAM_FRAME_SIZE, Session


class ConnectFailed(Exception):
    pass


def parse_host_port(text: str, default_port: int = DEFAULT_PORT) -> tuple[str, int]:
    """Split ``host``, ``host:port``, ``[v6]`` or ``[v6]:port``."""
    if text.startswith("["):
        host, _, rest = text[1:].partition("]")
        return host, int(rest[1:]) if rest.startswith(":") else default_port
    if text.count(":") == 1:
        host, port = text.split(":")
        return host, int(port)
    return text, default_port


@dataclass
class ClientConfig:
    server_host: str = "127.0.0.1"
    server_port: int = DEFAULT_PORT
    domain: str = "example.org"
    record_type: int = RecordType.A
    count: int = 50
    spacing: float = 0.5
    mode_preference: ModePreference = ModePreference.AUTO
    padding_block: Optional[int] = DEFAULT_QUERY_PAD_BLOCK
    insecure_skip_verify: bool = False
    ca_file: Optional[str] = None
    server_name: Optional[str] = None
    output: str = "human"
    max_datagram_frame_size: int = RECOMMENDED_MAX_DATAGRAM_FRAME_SIZE
    idle_timeout: float = DEFAULT_IDLE_TIMEOUT
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    qlog: bool = False
    seed: Optional[int] = None
    connect_timeout: float = 10.0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be at least 1")
        if self.spacing < 0:
            raise ValueError("spacing must be non-negative")
        self.mode_preference = ModePreference(self.mode_preference)


@dataclass
class QueryResult:
    sequence: int
    txid: int
    mode: str
    latency_ms: Optional[float]
    attempts: int
    answer_count: int
    outcome: str
    fell_back: bool = False
    failure: Optional[str] = None
    bytes_sent: int = 0
    bytes_received: int = 0

    @classmethod
    def from_record(cls, sequence: int, record: ExchangeRecord) -> "QueryResult":
        latency = record.latency
        return cls(
            sequence=sequence,
            txid=record.txid,
            mode=record.mode.value,
            latency_ms=None if latency is None else latency * 1000.0,
            attempts=record.attempts,
            answer_count=len(record.response.answers) if record.response else 0,
            outcome=record.outcome.value,
            fell_back=record.fell_back,
            failure=record.failure,
            bytes_sent=record.bytes_sent,
            bytes_received=record.bytes_received,
        )


@dataclass
class LookupRun:
    results: list
    summary: dict
    qlog: Optional[dict] = None


def summarize_results(results: list, wall_time: float, mode: str) -> dict:
    latencies = [r.latency_ms for r in results if r.outcome == Outcome.RESPONDED.value]
    return {
        "mode": mode,
        "queries": len(results),
        "responded": len(latencies),
        "failed": len(results) - len(latencies),
        "wall_time_s": wall_time,
        "mean_latency_ms": statistics.fmean(latencies) if latencies else None,
        "median_latency_ms": statistics.median(latencies) if latencies else None,
        "retransmissions": sum(max(0, r.attempts - 1) for r in results if r.mode == "datagram"),
        "fallbacks": sum(r.fell_back for r in results),
        "bytes_sent": sum(r.bytes_sent for r in results),
        "bytes_received": sum(r.bytes_received for r in results),
    }


async def run_workload(session: Session, config: ClientConfig) -> LookupRun:
    """Send ``count`` queries on a fixed timer over an established session.

    Sends never wait for earlier completions; results come back in send order.
    """
    loop = asyncio.get_running_loop()
    rng = random.Random(config.seed)
    conn = DoqClientConnection(session, config.mode_preference, config.retry, config.padding_block, rng)
    start = loop.time()
    tasks = []
    for i in range(config.count):
        delay = start + i * config.spacing - loop.time()
        if delay > 0:
            await asyncio.sleep(delay)
        tasks.append(asyncio.ensure_future(conn.query(config.domain, config.record_type)))
    records = await asyncio.gather(*tasks)
    wall_time = max((r.completed_at for r in records if r.completed_at is not None), default=start) - start
    if conn.dispatcher is not None:
        await conn.dispatcher.stop()
    results = [QueryResult.from_record(i, r) for i, r in enumerate(records)]
    return LookupRun(results, summarize_results(results, wall_time, conn.mode.value))


async def run_lookup(config: ClientConfig) -> LookupRun:
    from .quic_adapter import make_configuration, open_session

    quic_config = make_configuration(
        True,
        max_datagram_frame_size=config.max_datagram_frame_size,
        idle_timeout=config.idle_timeout,
        qlog=config.qlog,
        ca_file=config.ca_file,
        insecure_skip_verify=config.insecure_skip_verify,
        server_name=config.server_name,
    )
    session_cm = open_session(config.server_host, config.server_port, quic_config)
    try:
        session = await asyncio.wait_for(session_cm.__aenter__(), config.connect_timeout)
    except (OSError, ConnectionError, asyncio.TimeoutError) as exc:
        raise ConnectFailed(f"cannot reach {config.server_host}:{config.server_port}: {exc!r}") from exc
    try:
        run = await run_workload(session, config)
        run.qlog = session.qlog_trace()
    finally:
        await session_cm.__aexit__(None, None, None)
    return run


def _print_human(run: LookupRun, out):
    for r in run.results:
        latency = f"{r.latency_ms:8.1f} ms" if r.latency_ms is not None else "       -   "
        extra = " (stream fallback)" if r.fell_back else ""
        print(f"#{r.sequence:<4} {r.mode:<8} id={r.txid:<5} {latency} attempts={r.attempts} "
              f"answers={r.answer_count} {r.outcome}{extra}", file=out)
    s = run.summary
    mean = f"{s['mean_latency_ms']:.1f} ms" if s["mean_latency_ms"] is not None else "-"
    print(f"{s['responded']}/{s['queries']} responded over {s['mode']} in {s['wall_time_s']:.2f} s, "
          f"mean latency {mean}, {s['retransmissions']} retransmissions", file=out)


def _print_jsonl(run: LookupRun, out):
    for r in run.results:
        print(json.dumps({"type": "result", **asdict(r)}), file=out)
    print(json.dumps({"type": "summary", **run.summary}), file=out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="doq-lookup", description="Repeated DNS lookups over one DoQ connection.")
    p.add_argument("--server", default=f"127.0.0.1:{DEFAULT_PORT}", help="host:port (default port 853)")
    p.add_argument("--domain", default="example.org")
    p.add_argument("--type", default="A", help="record type name or number")
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--spacing-ms", type=float, default=500.0)
    p.add_argument("--mode", choices=["auto", "stream"], default="auto")
    p.add_argument("--padding-block", type=int, default=DEFAULT_QUERY_PAD_BLOCK, help="0 disables EDNS padding")
    p.add_argument("--insecure-skip-verify", action="store_true")
    p.add_argument("--ca-file")
    p.add_argument("--server-name", help="TLS server name, defaults to the host")
    p.add_argument("--output", choices=["human", "jsonl"], default="human")
    p.add_argument("--no-datagrams", action="store_true", help="advertise max_datagram_frame_size 0")
    p.add_argument("--qlog-out", help="write the connection's qlog trace here")
    p.add_argument("--seed", type=int)
    p.add_argument("--connect-timeout", type=float, default=10.0)
    return p


def _record_type(text: str) -> int:
    return int(text) if text.isdigit() else RecordType[text.upper()]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    host, port = parse_host_port(args.server)
    try:
        config = ClientConfig(
            server_host=host,
            server_port=port,
            domain=args.domain,
            record_type=_record_type(args.type),
            count=args.count,
            spacing=args.spacing_ms / 1000.0,
            mode_preference=ModePreference(args.mode),
            padding_block=args.padding_block or None,
            insecure_skip_verify=args.insecure_skip_verify,
            ca_file=args.ca_file,
            server_name=args.server_name,
            output=args.output,
            max_datagram_frame_size=0 if args.no_datagrams else RECOMMENDED_MAX_DATAGRAM_FRAME_SIZE,
            qlog=bool(args.qlog_out),
            seed=args.seed,
            connect_timeout=args.connect_timeout,
        )
    except (ValueError, KeyError) as exc:
        print(f"doq-lookup: {exc}", file=sys.stderr)
        return 2
    try:
        run = asyncio.run(run_lookup(config))
    except ConnectFailed as exc:
        print(f"doq-lookup: {exc}", file=sys.stderr)
        return 2
    (_print_jsonl if config.output == "jsonl" else _print_human)(run, sys.stdout)
    if args.qlog_out and run.qlog is not None:
        with open(args.qlog_out, "w") as fh:
            json.dump({"qlog_version": "0.3", "traces": [run.qlog]}, fh)
    return 0 if run.summary["responded"] == run.summary["queries"] else 1


if __name__ == "__main__":
    sys.exit(main())
