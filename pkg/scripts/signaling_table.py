"""Stream versus datagram octets on the simulated network for a few query counts."""

import argparse

from doqlab.bench.signaling import per_query_gap, simulate_signaling
from doqlab.transport import FakeNetworkConfig, FrameCostModel


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--queries", type=int, nargs="+", default=[1, 10, 50, 100])
    p.add_argument("--pmtud", action="store_true", help="charge the one-time PMTU probe too")
    args = p.parse_args()
    model = FakeNetworkConfig(frame_cost_model=FrameCostModel(include_pmtud=args.pmtud))
    print(f"{'queries':>8} {'stream B':>10} {'datagram B':>11} {'gap B':>8} {'closed form':>12} {'one-time B':>11}")
    for n in args.queries:
        stream = simulate_signaling(n, "stream", model)
        datagram = simulate_signaling(n, "datagram", model)
        gap = stream.per_query_octets - datagram.per_query_octets
        print(f"{n:8d} {stream.per_query_octets:10d} {datagram.per_query_octets:11d} {gap:8d} "
              f"{n * per_query_gap(model.frame_cost_model):12d} {stream.one_time_octets:11d}")


if __name__ == "__main__":
    main()
