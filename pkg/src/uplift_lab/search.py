"""Random search over base-learner hyperparameters and meta-learner kind,
scored by test-set AUUC per treated arm."""
from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .baselearn import BaseLearnerConfig
from .core import ExperimentDataset
from .errors import EmptySpace, ValidationError
from .eval import auuc_by_treatment
from .uplift import LEARNERS, TG_NAMES, fit_meta, predict_cate

MODES = ("global", "local")


@dataclass(frozen=True)
class SearchSpace:
    """Closed ranges per hyperparameter; a single-point range pins the value."""

    gamma: tuple[float, float] = (0.0, 10.0)
    n_estimators: tuple[int, int] = (20, 250)
    colsample_bytree: tuple[float, float] = (0.5, 1.0)
    max_depth: tuple[int, int] = (3, 15)
    min_child_weight: tuple[float, float] = (1.0, 10.0)
    reg_lambda: tuple[float, float] = (0.1, 1.0)
    reg_alpha: tuple[float, float] = (10.0, 200.0)
    learners: tuple[str, ...] = LEARNERS
    learning_rate: float = 0.1

    RANGES = ("gamma", "n_estimators", "colsample_bytree", "max_depth", "min_child_weight", "reg_lambda", "reg_alpha")
    LOG_SCALE = ("n_estimators", "reg_alpha")
    INTEGER = ("n_estimators", "max_depth")

    def __post_init__(self):
        for name in self.RANGES:
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise EmptySpace(f"{name}: empty range [{lo}, {hi}]")
            if name in self.INTEGER and math.floor(hi) < math.ceil(lo):
                raise EmptySpace(f"{name}: no integer in [{lo}, {hi}]")
            object.__setattr__(self, name, (lo, hi))
        learners = tuple(str(k).upper() for k in self.learners)
        if not learners:
            raise EmptySpace("no meta-learner kinds to choose from")
        bad = [k for k in learners if k not in LEARNERS]
        if bad:
            raise ValidationError(f"unknown learner kinds {bad}")
        object.__setattr__(self, "learners", learners)

    def contains(self, cfg: BaseLearnerConfig) -> bool:
        return all(lo <= getattr(cfg, name) <= hi for name in self.RANGES for lo, hi in [getattr(self, name)])

    def to_dict(self) -> dict:
        d = {name: list(getattr(self, name)) for name in self.RANGES}
        d["learners"] = list(self.learners)
        d["learning_rate"] = self.learning_rate
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SearchSpace:
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


def _draw(rng, lo, hi, log, integer):
    if lo == hi:
        return lo
    if integer:
        lo_i, hi_i = math.ceil(lo), math.floor(hi)
        if log and lo_i >= 1:
            v = int(math.floor(math.exp(rng.uniform(math.log(lo_i), math.log(hi_i + 1)))))
            return min(max(v, lo_i), hi_i)
        return int(rng.integers(lo_i, hi_i + 1))
    if log and lo > 0:
        return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
    return float(rng.uniform(lo, hi))


def sample_config(space: SearchSpace, seed: int) -> tuple[BaseLearnerConfig, str]:
    """One configuration drawn uniformly over the space (log-uniform for
    n_estimators and reg_alpha)."""
    rng = np.random.default_rng(int(seed))
    kw = {}
    for name in space.RANGES:
        lo, hi = getattr(space, name)
        kw[name] = _draw(rng, lo, hi, name in space.LOG_SCALE, name in space.INTEGER)
    kind = space.learners[int(rng.integers(len(space.learners)))]
    return BaseLearnerConfig(learning_rate=space.learning_rate, **kw), kind


def trial_seed(seed: int, trial: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(trial)]).generate_state(1)[0])


@dataclass(frozen=True)
class TrialRecord:
    trial: int
    seed: int
    learner: str
    config: dict
    train_auuc: dict[str, float] | None
    test_auuc: dict[str, float] | None
    mean_test_auuc: float | None
    wall_time: float
    status: str = "ok"
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> TrialRecord:
        return cls(**json.loads(line))


def run_trial(train: ExperimentDataset, test: ExperimentDataset, space: SearchSpace, seed: int,
              trial: int) -> TrialRecord:
    """Fit and score one sampled configuration; any error becomes a failed record."""
    s = trial_seed(seed, trial)
    t0 = time.perf_counter()
    cfg, kind = sample_config(space, s)
    try:
        model = fit_meta(kind, train, cfg, seed=s)
        tr = auuc_by_treatment(train, model.train_cate)
        te = auuc_by_treatment(test, predict_cate(model, test.X))
        if not all(math.isfinite(v) for v in (*tr.values(), *te.values())):
            raise ValidationError("non-finite AUUC")
    except Exception as exc:  # isolated: a failing trial never aborts the search
        return TrialRecord(trial, s, kind, cfg.to_dict(), None, None, None, time.perf_counter() - t0,
                           "failed", f"{type(exc).__name__}: {exc}")
    mean = float(np.mean([te[tg] for tg in TG_NAMES]))
    return TrialRecord(trial, s, kind, cfg.to_dict(), tr, te, mean, time.perf_counter() - t0)


@dataclass(frozen=True)
class Winner:
    trial: int
    learner: str
    config: dict
    score: float

    def base_config(self) -> BaseLearnerConfig:
        return BaseLearnerConfig.from_dict(self.config)


@dataclass(frozen=True, eq=False)
class SearchResult:
    trials: list[TrialRecord]
    global_winner: Winner | None
    local_winners: dict[str, Winner] = field(default_factory=dict)

    def winners(self, mode: str):
        if mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}")
        return self.global_winner if mode == "global" else self.local_winners

    def to_dict(self, mode: str | None = None) -> dict:
        d = {"n_trials": len(self.trials), "n_failed": sum(not t.ok for t in self.trials)}
        if mode in (None, "global"):
            d["global"] = None if self.global_winner is None else asdict(self.global_winner)
        if mode in (None, "local"):
            d["local"] = {tg: asdict(w) for tg, w in self.local_winners.items()}
        return d


def select_winners(trials) -> SearchResult:
    """Best mean test AUUC (global) and best per-TG test AUUC (local); ties go
    to the earlier trial, failed trials are ignored."""
    ok = [t for t in trials if t.ok]
    glob = None
    for t in ok:
        if glob is None or t.mean_test_auuc > glob.score:
            glob = Winner(t.trial, t.learner, t.config, t.mean_test_auuc)
    local = {}
    for tg in TG_NAMES:
        for t in ok:
            if tg not in local or t.test_auuc[tg] > local[tg].score:
                local[tg] = Winner(t.trial, t.learner, t.config, t.test_auuc[tg])
    return SearchResult(list(trials), glob, local)


def _run_one(args):
    return run_trial(*args)


def run_search(train: ExperimentDataset, test: ExperimentDataset, space: SearchSpace = SearchSpace(),
               n_trials: int = 100, seed: int = 0, jobs: int = 1, log_path=None) -> SearchResult:
    """Run ``n_trials`` independent trials and pick global and local winners.

    Trial ``i`` is seeded from ``(seed, i)`` only, so ``jobs`` never changes
    the outcome. With ``log_path`` each record is appended as one JSON line in
    trial order.
    """
    if n_trials < 1:
        raise ValidationError("n_trials must be >= 1")
    if jobs < 1:
        raise ValidationError("jobs must be >= 1")
    tasks = [(train, test, space, seed, i) for i in range(n_trials)]
    fh = Path(log_path).open("w") if log_path is not None else None
    try:
        if jobs == 1:
            results = []
            for task in tasks:
                rec = _run_one(task)
                results.append(rec)
                if fh:
                    fh.write(rec.to_json() + "\n")
                    fh.flush()
        else:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_run_one, tasks))
            if fh:
                for rec in results:
                    fh.write(rec.to_json() + "\n")
    finally:
        if fh:
            fh.close()
    return select_winners(results)


def load_trials(path) -> list[TrialRecord]:
    return [TrialRecord.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]


def save_winners(result: SearchResult, path, mode: str | None = None) -> None:
    Path(path).write_text(json.dumps(result.to_dict(mode), indent=2, sort_keys=True) + "\n")


def load_winners(path) -> tuple[dict[str, str], dict[str, BaseLearnerConfig]] | tuple[str, BaseLearnerConfig]:
    """Read a winners file back as learner kind(s) and config(s).

    Local winners come back as per-TG mappings, a global winner as a single
    (kind, config) pair.
    """
    d = json.loads(Path(path).read_text())
    if d.get("local"):
        kinds = {tg: w["learner"] for tg, w in d["local"].items()}
        cfgs = {tg: BaseLearnerConfig.from_dict(w["config"]) for tg, w in d["local"].items()}
        return kinds, cfgs
    if d.get("global"):
        return d["global"]["learner"], BaseLearnerConfig.from_dict(d["global"]["config"])
    raise ValidationError(f"{path}: no winners recorded")
