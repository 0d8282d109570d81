"""Calibration recovery rate as measurement noise grows.

For each noise level, runs the bright/dim procedure on many seeds and
reports how often the fitted profile lands within 0.1 mm of the
simulated constricted and baseline diameters.

    python3 scripts/calibration_sweep.py --seeds 100
"""

import argparse

from gazeload.calibration import CalibrationError, compute_profile, run_calibration
from gazeload.simulator import ScenarioConfig, iter_scenario

TOL = 0.1


def recovery(sigma: float, seeds: int) -> tuple[int, float, float]:
    hits, lo_err, hi_err = 0, 0.0, 0.0
    for seed in range(seeds):
        cfg = ScenarioConfig(seed=seed, duration=10.0, noise_sigma_mm=sigma,
                             light_steps=((0.0, "bright"), (5.0, "dim")))
        constricted = cfg.baseline_mm - cfg.light_amplitude_mm
        try:
            p = compute_profile(*run_calibration(iter_scenario(cfg)))
        except CalibrationError:
            continue
        lo_err = max(lo_err, abs(p.d_min - constricted))
        hi_err = max(hi_err, abs(p.d_max - cfg.baseline_mm))
        hits += abs(p.d_min - constricted) <= TOL and abs(p.d_max - cfg.baseline_mm) <= TOL
    return hits, lo_err, hi_err


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=100)
    ap.add_argument("--sigmas", type=float, nargs="+", default=[0.01, 0.05, 0.1, 0.2, 0.3])
    args = ap.parse_args()

    print("sigma_mm  recovered  worst_dmin_err  worst_dmax_err")
    for sigma in args.sigmas:
        hits, lo, hi = recovery(sigma, args.seeds)
        print(f"{sigma:8.3f}  {hits:4d}/{args.seeds:<4d}  {lo:14.3f}  {hi:14.3f}")


if __name__ == "__main__":
    main()
