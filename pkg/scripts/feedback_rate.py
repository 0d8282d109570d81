"""Emission rate of the fast-clock pipeline across seeds.

    python3 scripts/feedback_rate.py --seeds 20 --duration 60
"""

import argparse
import statistics
import time

from gazeload.estimator import Pipeline
from gazeload.simulator import ScenarioConfig, iter_scenario


def one_run(seed: int, duration: float) -> tuple[int, float, float]:
    ts = []
    p = Pipeline(on_estimate=lambda e: ts.append(e.ts))
    t0 = time.perf_counter()
    for s in iter_scenario(ScenarioConfig(seed=seed, duration=duration)):
        p.feed(s)
    p.finish()
    elapsed = time.perf_counter() - t0
    mean_ms = (ts[-1] - ts[0]) / (len(ts) - 1) / 1000
    return len(ts), mean_ms, elapsed


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--duration", type=float, default=60.0)
    args = ap.parse_args()

    rows = [one_run(seed, args.duration) for seed in range(args.seeds)]
    print("seed  estimates  mean_ms  rate_hz  wall_s")
    for seed, (n, mean_ms, wall) in enumerate(rows):
        print(f"{seed:4d}  {n:9d}  {mean_ms:7.3f}  {1000 / mean_ms:7.3f}  {wall:6.2f}")
    means = [r[1] for r in rows]
    print(f"mean interval {statistics.fmean(means):.3f} ms "
          f"(min {min(means):.3f}, max {max(means):.3f})")


if __name__ == "__main__":
    main()
