"""Loopback desk run: both modes, real QUIC stack, box statistics and CSV output."""

import argparse
import statistics

from doqlab.bench.experiment import Scenario, ScenarioFailed, emit_report, run_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--queries", type=int, default=100)
    p.add_argument("--spacing-ms", type=float, default=500.0)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--out", default="results/desk")
    args = p.parse_args()
    means = {}
    for mode in ("stream", "datagram"):
        scenario = Scenario(mode=mode, query_count=args.queries, spacing_ms=args.spacing_ms,
                            iterations=args.iterations, backend="real")
        try:
            report = run_experiment(scenario, progress=lambda s: print(f"  {mode} #{s.iteration}: "
                                                                       f"{s.wall_time_s:.2f} s"))
        except ScenarioFailed as exc:
            report = exc.report
            print(f"  {exc}")
        emit_report(report, args.out)
        wall = report.stats["wall_time_s"]
        means[mode] = wall.mean
        print(f"{mode:8} wall median {wall.median:.3f} s, mean {wall.mean:.3f} s, "
              f"bytes sent median {report.stats['total_bytes_sent'].median:.0f}")
    diff = abs(means["stream"] - means["datagram"]) / statistics.fmean(means.values())
    print(f"mean wall-time difference {diff * 100:.2f}%")


if __name__ == "__main__":
    main()
