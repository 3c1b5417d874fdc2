"""Added RTT and loss sweep: round trips and wall time per mode.

The simulated backend runs in seconds.  ``--real`` repeats the sweep over
loopback through the impairment relay and takes minutes.
"""

import argparse

from doqlab.bench.experiment import Impairment, Scenario, ScenarioFailed, run_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--rtt-ms", type=float, nargs="+", default=[100, 250, 500])
    p.add_argument("--loss", type=float, nargs="+", default=[0.0, 0.05])
    p.add_argument("--queries", type=int, default=100)
    p.add_argument("--spacing-ms", type=float, default=500.0)
    p.add_argument("--iterations", type=int, default=3)
    p.add_argument("--real", action="store_true")
    args = p.parse_args()
    backend = "real" if args.real else "fake"
    print(f"{'rtt ms':>7} {'loss':>5} {'mode':>9} {'responded':>10} {'wall s':>8} {'retx':>6} "
          f"{'rt/query':>9} {'rt+ack':>7}")
    for rtt in args.rtt_ms:
        for loss in args.loss:
            one_way = rtt / 2
            for mode in ("stream", "datagram"):
                scenario = Scenario(mode=mode, query_count=args.queries, spacing_ms=args.spacing_ms,
                                    iterations=args.iterations, backend=backend,
                                    impairment=Impairment((one_way, one_way), loss))
                try:
                    report = run_experiment(scenario)
                except ScenarioFailed as exc:
                    report = exc.report
                done = report.completed()
                if not done:
                    print(f"{rtt:7.0f} {loss:5.2f} {mode:>9} all iterations failed")
                    continue
                n = len(done)
                print(f"{rtt:7.0f} {loss:5.2f} {mode:>9} {sum(s.responded for s in done) / n:10.1f} "
                      f"{sum(s.wall_time_s for s in done) / n:8.2f} {sum(s.retransmissions for s in done) / n:6.1f} "
                      f"{sum(s.round_trips for s in done) / n:9.3f} "
                      f"{sum(s.round_trips_with_acks for s in done) / n:7.3f}")


if __name__ == "__main__":
    main()
