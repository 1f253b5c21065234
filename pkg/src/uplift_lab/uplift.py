"""S/T/X/R meta-learners fitted one-vs-control per treated arm, and the
argmax-with-threshold policy rule.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .baselearn import BaseLearnerConfig, TreeEnsembleModel, fit_regressor, predict
from .core import ALL_ARMS, TREATED_ARMS, Arm, ExperimentDataset
from .errors import EmptyPolicy, InsufficientArmSize, MissingArm, SchemaMismatch, ValidationError

LEARNERS = ("S", "T", "X", "R")
MIN_ARM_SIZE = 50
TG_NAMES = tuple(a.name for a in TREATED_ARMS)
DEFAULT_CONFIG = BaseLearnerConfig(n_estimators=100, max_depth=4, min_child_weight=20.0)


def _seed(seed: int, *parts: int) -> int:
    return int(np.random.SeedSequence([int(seed), *parts]).generate_state(1)[0])


@dataclass(frozen=True, eq=False)
class CateModel:
    """Per-TG fitted components; ``components[tg]`` maps a role name to a model."""

    kinds: dict[str, str]
    configs: dict[str, BaseLearnerConfig]
    components: dict[str, dict[str, TreeEnsembleModel]]
    propensity: float
    schema: tuple[str, ...]
    train_cate: np.ndarray | None = field(default=None, repr=False)

    @property
    def learner_kind(self) -> str:
        kinds = set(self.kinds.values())
        return kinds.pop() if len(kinds) == 1 else "mixed"


@dataclass(frozen=True, eq=False)
class PolicyAssignment:
    arms: np.ndarray
    provenance: str  # grid | cate | oracle
    user_ids: np.ndarray | None = None

    def __post_init__(self):
        arms = np.asarray(self.arms, dtype=np.int8)
        if arms.size and ((arms < 0) | (arms > 4)).any():
            raise ValidationError("policy arms must be in 0..4")
        object.__setattr__(self, "arms", arms)
        if self.provenance not in ("grid", "cate", "oracle"):
            raise ValidationError(f"unknown provenance {self.provenance!r}")

    def __len__(self) -> int:
        return len(self.arms)


def _per_tg(value, name):
    if isinstance(value, Mapping):
        missing = [tg for tg in TG_NAMES if tg not in value]
        if missing:
            raise ValidationError(f"{name} missing entries for {missing}")
        return {tg: value[tg] for tg in TG_NAMES}
    return {tg: value for tg in TG_NAMES}


def _check_arms(train: ExperimentDataset):
    counts = np.bincount(train.treatment, minlength=5)
    for arm in ALL_ARMS:
        if counts[arm] == 0:
            raise MissingArm(f"training data has no {arm.name} records")
        if counts[arm] < MIN_ARM_SIZE:
            raise InsufficientArmSize(f"arm {arm.name} has {counts[arm]} records (< {MIN_ARM_SIZE})")


def _fit_pair(kind, X, y, w, cfg, propensity, seed, schema, cache):
    """Fit one treated-vs-control learner on the pair subset; w is 0/1."""
    treated, control = w == 1, w == 0

    def control_model():
        # shared by every arm fitted with the same config
        key = ("mu_control", cfg)
        if key not in cache:
            cache[key] = fit_regressor(X[control], y[control], cfg, _seed(seed, 0), schema=schema)
        return cache[key]

    if kind == "S":
        Xs = np.column_stack([X, w])
        return {"mu": fit_regressor(Xs, y, cfg, _seed(seed, 1), schema=schema + ("__treated__",))}
    if kind == "T":
        return {"mu_control": control_model(), "mu_treated": fit_regressor(
            X[treated], y[treated], cfg, _seed(seed, 2), schema=schema)}
    if kind == "X":
        mu_c = control_model()
        mu_t = fit_regressor(X[treated], y[treated], cfg, _seed(seed, 2), schema=schema)
        d1 = y[treated] - predict(mu_c, X[treated])
        d0 = predict(mu_t, X[control]) - y[control]
        return {
            "mu_control": mu_c,
            "mu_treated": mu_t,
            "tau_treated": fit_regressor(X[treated], d1, cfg, _seed(seed, 3), schema=schema),
            "tau_control": fit_regressor(X[control], d0, cfg, _seed(seed, 4), schema=schema),
        }
    if kind == "R":
        # 2-fold cross-fitted outcome nuisance; propensity is the fixed constant
        rng = np.random.default_rng(_seed(seed, 5))
        fold = rng.permutation(len(y)) % 2
        m_hat = np.empty(len(y))
        for f in (0, 1):
            mf = fit_regressor(X[fold != f], y[fold != f], cfg, _seed(seed, 6, f), schema=schema)
            m_hat[fold == f] = predict(mf, X[fold == f])
        resid_t = w - propensity
        pseudo = (y - m_hat) / resid_t
        tau = fit_regressor(X, pseudo, cfg, _seed(seed, 7), schema=schema, sample_weight=resid_t ** 2)
        return {"tau": tau}
    raise ValidationError(f"unknown learner kind {kind!r}; expected one of {LEARNERS}")


def _pair_cate(kind, comps, X, propensity):
    if kind == "S":
        n = X.shape[0]
        mu = comps["mu"]
        return predict(mu, np.column_stack([X, np.ones(n)])) - predict(mu, np.column_stack([X, np.zeros(n)]))
    if kind == "T":
        return predict(comps["mu_treated"], X) - predict(comps["mu_control"], X)
    if kind == "X":
        g = propensity
        return g * predict(comps["tau_control"], X) + (1 - g) * predict(comps["tau_treated"], X)
    return predict(comps["tau"], X)


def fit_meta(kind, train: ExperimentDataset, cfgs, propensity: float = 0.5, seed: int = 0) -> CateModel:
    """Fit a meta-learner per treated arm on {CG, TG_t}.

    ``kind`` and ``cfgs`` are either a single value shared by all four arms
    (global configuration) or a mapping keyed by ``"TG1".."TG4"`` (local).
    """
    if not 0.0 < propensity < 1.0:
        raise ValidationError("propensity must lie in (0, 1)")
    kinds = {tg: str(k).upper() for tg, k in _per_tg(kind, "kind").items()}
    for k in kinds.values():
        if k not in LEARNERS:
            raise ValidationError(f"unknown learner kind {k!r}; expected one of {LEARNERS}")
    configs = _per_tg(cfgs, "cfgs")
    _check_arms(train)
    y = train.y
    components, cache = {}, {}
    for j, arm in enumerate(TREATED_ARMS):
        tg = arm.name
        mask = (train.treatment == Arm.CG) | (train.treatment == arm)
        w = (train.treatment[mask] == arm).astype(np.float64)
        components[tg] = _fit_pair(kinds[tg], train.X[mask], y[mask], w, configs[tg], propensity,
                                   _seed(seed, j + 1), train.schema, cache)
    model = CateModel(kinds, configs, components, propensity, train.schema)
    object.__setattr__(model, "train_cate", predict_cate(model, train.X))
    return model


def predict_cate(model: CateModel, X) -> np.ndarray:
    """n x 4 matrix of estimated uplift vs control, columns TG1..TG4."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1 and X.size == 0:
        X = X.reshape(0, len(model.schema))
    if X.ndim != 2 or X.shape[1] != len(model.schema):
        raise SchemaMismatch(f"expected {len(model.schema)} feature columns, got shape {X.shape}")
    if X.shape[0] == 0:
        return np.zeros((0, 4))
    cols = [_pair_cate(model.kinds[tg], model.components[tg], X, model.propensity) for tg in TG_NAMES]
    return np.column_stack(cols)


def cross_fit_cate(kind, train: ExperimentDataset, cfgs, folds: int = 5, propensity: float = 0.5,
                   seed: int = 0) -> np.ndarray:
    """Out-of-fold CATE for the training users.

    Each user's row comes from a model that never saw that user, so policies
    built from it can be scored on the training split without the in-sample
    optimism of matching a user's arm choice against their own outcome.
    Folds are stratified by arm.
    """
    if folds < 2:
        raise ValidationError("folds must be >= 2")
    fold = _arm_folds(train, folds, np.random.default_rng(_seed(seed, 99)))
    out = np.empty((len(train), 4))
    for f in range(folds):
        held = fold == f
        model = fit_meta(kind, train.subset(np.flatnonzero(~held)), cfgs, propensity, _seed(seed, 100 + f))
        out[held] = predict_cate(model, train.X[held])
    return out


def _arm_folds(train: ExperimentDataset, folds: int, rng) -> np.ndarray:
    fold = np.empty(len(train), dtype=np.int64)
    for arm in ALL_ARMS:
        idx = np.flatnonzero(train.treatment == arm)
        fold[idx] = rng.permutation(idx.size) % folds
    return fold


def noise_margin(kind, train: ExperimentDataset, cfgs, z: float = 3.0, propensity: float = 0.5,
                 seed: int = 0) -> float:
    """Data-driven policy margin: ``z`` times the per-user CATE noise.

    The learner is fitted on two arm-stratified halves; with effects cancelling
    in the difference, sd(half_1 - half_2) / 2 estimates the noise sd of a
    full-sample estimate. The largest TG value is used.
    """
    if z < 0:
        raise ValidationError("z must be >= 0")
    fold = _arm_folds(train, 2, np.random.default_rng(_seed(seed, 98)))
    c = [predict_cate(fit_meta(kind, train.subset(np.flatnonzero(fold == h)), cfgs, propensity,
                               _seed(seed, 200 + h)), train.X) for h in (0, 1)]
    return float(z * ((c[0] - c[1]).std(axis=0) / 2.0).max())


def assign_policy(cate, margin: float = 0.0, user_ids=None, provenance: str = "cate") -> PolicyAssignment:
    """Best treated arm when its uplift exceeds ``margin``, else control.

    Ties between arms resolve to the lower intensity (argmax returns the
    first maximum).
    """
    cate = np.asarray(cate, dtype=np.float64)
    if cate.ndim != 2 or cate.shape[1] != 4:
        raise SchemaMismatch("CATE matrix must have four columns (TG1..TG4)")
    if not np.isfinite(cate).all():
        raise ValidationError("CATE matrix contains non-finite values")
    if margin < 0:
        raise ValidationError("margin must be >= 0")
    best = np.argmax(cate, axis=1) if cate.shape[0] else np.zeros(0, dtype=int)
    best_val = cate[np.arange(cate.shape[0]), best]
    arms = np.where(best_val > margin, best + 1, int(Arm.CG)).astype(np.int8)
    return PolicyAssignment(arms, provenance, None if user_ids is None else np.asarray(user_ids, dtype=str))


def percent_treated(policy) -> dict[str, float]:
    arms = policy.arms if isinstance(policy, PolicyAssignment) else np.asarray(policy)
    if len(arms) == 0:
        raise EmptyPolicy("policy assigns no users")
    counts = np.bincount(np.asarray(arms, dtype=np.int64), minlength=5)
    return {a.name: float(100.0 * counts[a] / counts.sum()) for a in ALL_ARMS}


def grid_policy(ds: ExperimentDataset) -> PolicyAssignment:
    """The experiment's own randomized assignment, viewed as a policy."""
    return PolicyAssignment(ds.treatment.copy(), "grid", ds.user_ids)


# -- CSV / JSON interchange ------------------------------------------------


def save_cate(user_ids, cate, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "cate_tg1", "cate_tg2", "cate_tg3", "cate_tg4"])
        for uid, row in zip(user_ids, np.asarray(cate)):
            w.writerow([uid, *(repr(float(v)) for v in row)])


def load_cate(path) -> tuple[np.ndarray, np.ndarray]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    ids = np.array([r["user_id"] for r in rows], dtype=str)
    cate = np.array([[float(r[f"cate_tg{j}"]) for j in range(1, 5)] for r in rows], dtype=np.float64).reshape(-1, 4)
    return ids, cate


def save_policy(policy: PolicyAssignment, path) -> None:
    if policy.user_ids is None:
        raise ValidationError("policy export needs user ids")
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "arm", "provenance"])
        for uid, arm in zip(policy.user_ids, policy.arms):
            w.writerow([uid, Arm(int(arm)).name, policy.provenance])


def load_policy(path) -> PolicyAssignment:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise EmptyPolicy(f"{path}: no policy rows")
    from .core import parse_arm

    provs = {r["provenance"] for r in rows}
    if len(provs) != 1:
        raise ValidationError("policy file mixes provenances")
    return PolicyAssignment(
        np.array([int(parse_arm(r["arm"])) for r in rows], dtype=np.int8),
        provs.pop(),
        np.array([r["user_id"] for r in rows], dtype=str),
    )


def save_configs(kinds: dict, configs: dict, path) -> None:
    doc = {tg: {"learner": kinds[tg], "config": configs[tg].to_dict()} for tg in TG_NAMES}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
