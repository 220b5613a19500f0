"""Time aggregation of ~1M tweet rows and the MRP fit on the resulting user table.

    python scripts/bench_throughput.py [--users 250000]
"""

import argparse
import time

from trace_mrp import mrp, synth
from trace_mrp.aggregate import build_user_table


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--users", type=int, default=250_000)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    spec = synth.SynthSpec(seed=args.seed, n_trace_users=args.users, n_survey=10)
    data = synth.generate(spec)
    print(f"tweet rows: {len(data.tweets):,}")

    t0 = time.perf_counter()
    users = build_user_table(data.tweets, data.users, spec.reference_date, spec.window_months)
    t1 = time.perf_counter()
    fitted = mrp.fit(mrp.MrpSpec(), users, "dummy", spec.labels)
    t2 = time.perf_counter()
    print(f"aggregate: {t1 - t0:.2f} s for {len(users):,} users")
    print(f"mrp fit:   {t2 - t1:.2f} s (converged={fitted.converged}, sweeps={fitted.iterations})")


if __name__ == "__main__":
    main()
