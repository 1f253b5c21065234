"""Re-run the simulator calibration and rewrite the shipped defaults.

Population-shape parameters (sensitivity mixture, amount levels, recall base)
are read from the current params file and kept; only the four intensity
coefficients are searched. Usage::

    python3 scripts/calibrate.py [--users 200000] [--check-seeds 5]
"""
import argparse
import json
from pathlib import Path

import numpy as np

from uplift_lab.simulator import (
    calibrate,
    calibration_report,
    default_params,
    simulate_experiment,
)

DATA = Path(__file__).resolve().parents[1] / "src" / "uplift_lab" / "data"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--users", type=int, default=200_000)
    ap.add_argument("--check-seeds", type=int, default=5)
    ap.add_argument("--digits", type=int, default=5, help="significant digits kept in the params file")
    args = ap.parse_args()

    start = default_params()
    tuned, report = calibrate(start.replace(seed=0), n_users=args.users)
    rounded = {k: float(f"{v:.{args.digits}g}") for k, v in report["fields"].items()}
    params = start.replace(version=start.version, **rounded)

    checks = []
    for seed in range(args.check_seeds):
        _, ds = simulate_experiment(params.replace(n_users=args.users, seed=seed))
        checks.append(calibration_report(ds)["achieved"])
    report["fields"] = rounded
    report["simulated"] = {
        "seeds": list(range(args.check_seeds)),
        "per_seed": checks,
        "mean": {k: float(np.mean([c[k] for c in checks])) for k in checks[0]},
    }
    params.save(DATA / "sim_params.json")
    (DATA / "calibration_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps({"fields": rounded, "simulated_mean": report["simulated"]["mean"]}, indent=2))


if __name__ == "__main__":
    main()
