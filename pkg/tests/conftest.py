import numpy as np
import pytest

from uplift_lab.core import BASE_SCHEMA, ExperimentDataset
from uplift_lab.simulator import default_params, simulate_experiment


def make_dataset(n=100, seed=0, arms=None, y=None, schema=BASE_SCHEMA):
    """Small valid dataset with random features; ``y`` in major units."""
    rng = np.random.default_rng(seed)
    X = np.column_stack([
        rng.integers(1, 1000, n), rng.integers(1, 50, n), rng.integers(10, 500, n),
        rng.random(n), rng.integers(0, 2, n),
    ]).astype(float)
    if len(schema) > X.shape[1]:
        X = np.column_stack([X, rng.normal(size=(n, len(schema) - X.shape[1]))])
    t = np.arange(n) % 5 if arms is None else np.asarray(arms)
    if y is None:
        y = np.where(rng.random(n) < 0.6, rng.integers(1, 300, n), 0).astype(float)
    minor = np.round(np.asarray(y, dtype=float) * 100).astype(np.int64)
    conv = minor > 0
    return ExperimentDataset(
        user_ids=np.array([f"u{i:05d}" for i in range(n)]), X=X, schema=schema, treatment=t,
        y_deposit=minor, converted=conv, recalled=conv & (rng.random(n) < 0.5),
        n_txns=np.where(conv, 1 + rng.poisson(1.0, n), 0),
    )


@pytest.fixture(scope="session")
def sim_small():
    """Calibrated simulator, 10k users, grid experiment."""
    params = default_params(n_users=10_000, seed=5)
    pop, ds = simulate_experiment(params)
    return params, pop, ds


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
