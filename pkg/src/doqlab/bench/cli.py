"""``bench`` command line: run scenarios, simulate signaling, relay, parse qlog."""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys

from ..client import parse_host_port
from ..doq import DeliveryMode
from ..proxy import BindFailed
from .experiment import IoFailure, Scenario, ScenarioFailed, emit_report, run_experiment
from .qlog import MalformedTrace, load_qlog
from .relay import RelayConfig, start_relay
from .signaling import per_query_gap, simulate_signaling


def _bounds(text: str) -> tuple:
    lo, _, hi = text.partition(":")
    return float(lo), float(hi or lo)


def _print_sample(sample):
    if sample.failure:
        print(f"  iteration {sample.iteration}: FAILED {sample.failure}", file=sys.stderr)
    else:
        print(f"  iteration {sample.iteration}: {sample.responded} responded, wall {sample.wall_time_s:.2f} s, "
              f"{sample.total_bytes_sent}/{sample.total_bytes_received} B sent/received, "
              f"{sample.retransmissions} retransmissions", file=sys.stderr)


def cmd_run(args) -> int:
    scenario = Scenario.load(args.scenario)
    print(f"running {scenario.scenario_id}: {scenario.iterations} iterations", file=sys.stderr)
    code = 0
    try:
        report = run_experiment(scenario, progress=_print_sample)
    except ScenarioFailed as exc:
        print(f"bench: {exc}", file=sys.stderr)
        report, code = exc.report, 1
    try:
        paths = emit_report(report, args.out)
    except IoFailure as exc:
        print(f"bench: {exc}", file=sys.stderr)
        return 2
    for name, stats in report.stats.items():
        print(f"{name:22} median {stats.median:12.3f}  mean {stats.mean:12.3f}  "
              f"[{stats.minimum:.3f}, {stats.maximum:.3f}]  outliers {len(stats.outliers)}")
    for path in paths:
        print(f"wrote {path}", file=sys.stderr)
    return code


def cmd_sim(args) -> int:
    modes = [DeliveryMode.STREAM, DeliveryMode.DATAGRAM] if args.mode == "both" else [DeliveryMode(args.mode)]
    results = {m.value: simulate_signaling(args.queries, m, spacing=args.spacing_ms / 1000.0) for m in modes}
    out = {m: r.to_dict() for m, r in results.items()}
    if len(results) == 2:
        out["gap_octets"] = results["stream"].per_query_octets - results["datagram"].per_query_octets
        out["closed_form_gap_octets"] = args.queries * per_query_gap()
    print(json.dumps(out, indent=2))
    return 0


async def _relay(args):
    host, port = parse_host_port(args.listen, 0)
    target_host, target_port = parse_host_port(args.target)
    relay = await start_relay(RelayConfig(host, port, target_host, target_port, _bounds(args.delay_ms),
                                          args.loss, args.loss_direction, args.seed))
    print(f"relaying {host}:{relay.port} -> {target_host}:{target_port}", file=sys.stderr)
    try:
        await asyncio.Event().wait()
    finally:
        relay.close()
        print(json.dumps(relay.stats()), file=sys.stderr)


def cmd_relay(args) -> int:
    try:
        asyncio.run(_relay(args))
    except BindFailed as exc:
        print(f"bench: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        pass
    return 0


def cmd_qlog(args) -> int:
    try:
        histogram = load_qlog(args.input)
    except (OSError, MalformedTrace) as exc:
        print(f"bench: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(histogram.to_dict(), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bench", description="DoQ stream versus datagram experiments.")
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario file and write CSV/JSON")
    run.add_argument("--scenario", required=True)
    run.add_argument("--out", default="results")
    run.set_defaults(func=cmd_run)

    sim = sub.add_parser("sim", help="signaling octets on the simulated network")
    sim.add_argument("--queries", type=int, required=True)
    sim.add_argument("--mode", choices=["stream", "datagram", "both"], default="both")
    sim.add_argument("--spacing-ms", type=float, default=500.0)
    sim.set_defaults(func=cmd_sim)

    relay = sub.add_parser("relay", help="UDP relay adding delay and loss")
    relay.add_argument("--listen", required=True, help="host:port")
    relay.add_argument("--target", required=True, help="host:port")
    relay.add_argument("--delay-ms", default="0:0", help="uniform bounds min:max, each direction")
    relay.add_argument("--loss", type=float, default=0.0)
    relay.add_argument("--loss-direction", choices=["uplink", "downlink", "both"], default="both")
    relay.add_argument("--seed", type=int)
    relay.set_defaults(func=cmd_relay)

    qlog = sub.add_parser("qlog", help="frame histogram of a qlog file")
    qlog.add_argument("--in", dest="input", required=True)
    qlog.set_defaults(func=cmd_qlog)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"bench: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
