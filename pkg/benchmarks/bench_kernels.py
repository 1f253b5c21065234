"""Compiled vs pure-Python (numpy) tree kernels.

    python3 benchmarks/bench_kernels.py [--rows 50000] [--repeat 3]

Fits the same regressor with each backend, checks that the fitted models and
predictions are identical, and prints median wall times.
"""
import argparse
import statistics
import sys
import time

import numpy as np

from uplift_lab.baselearn import BACKENDS, BaseLearnerConfig, fit_regressor


def timed(fn, repeat):
    times, out = [], None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def raw_predict(model, X, kernels):
    out = np.tile(model.base_score, (X.shape[0], 1)).astype(np.float64)
    kernels.predict_forest(X, *model._flat, out)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=50_000)
    ap.add_argument("--features", type=int, default=8)
    ap.add_argument("--trees", type=int, default=50)
    ap.add_argument("--depth", type=int, default=6)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    if "compiled" not in BACKENDS:
        print("compiled extension not built (or UPLIFT_LAB_PURE set); only the python backend is available")
    rng = np.random.default_rng(0)
    X = rng.normal(size=(args.rows, args.features))
    y = X[:, 0] - 0.5 * X[:, 1] ** 2 + np.sin(X[:, 2]) + rng.normal(scale=0.5, size=args.rows)
    cfg = BaseLearnerConfig(n_estimators=args.trees, max_depth=args.depth, min_child_weight=5.0)

    results = {}
    print(f"rows={args.rows} features={args.features} trees={args.trees} depth={args.depth}")
    print(f"{'backend':<10}{'fit s':>10}{'predict s':>12}")
    for name in BACKENDS:
        fit_s, model = timed(lambda: fit_regressor(X, y, cfg, seed=0, backend=name), args.repeat)
        pred_s, pred = timed(lambda: raw_predict(model, X, BACKENDS[name]), args.repeat)
        results[name] = (fit_s, pred_s, model, pred)
        print(f"{name:<10}{fit_s:>10.3f}{pred_s:>12.3f}")

    if len(results) == 2:
        (cf, cp, cm, cpred), (pf, pp, pm, ppred) = results["compiled"], results["python"]
        same = cm.to_dict() == pm.to_dict() and np.array_equal(cpred, ppred)
        print(f"speedup: fit {pf / cf:.1f}x, predict {pp / cp:.1f}x; identical models: {same}")
        return 0 if same else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
