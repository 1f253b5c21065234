from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..errors import (
    ConfigBoundViolation,
    EmptyData,
    MissingClass,
    SchemaMismatch,
    SingleClassData,
)
from . import _backend
from .losses import HESS_FLOOR, focal_grad, softmax, softmax_ce_grad, squared_error_grad

MODEL_FORMAT_VERSION = 1
LOSSES = ("squared_error", "softmax_ce", "focal")


@dataclass(frozen=True)
class BaseLearnerConfig:
    """Boosting hyperparameters; field names follow the usual XGBoost ones."""

    gamma: float = 0.0
    n_estimators: int = 100
    colsample_bytree: float = 1.0
    max_depth: int = 6
    min_child_weight: float = 1.0
    reg_lambda: float = 1.0
    reg_alpha: float = 0.0
    learning_rate: float = 0.1
    loss: str = "squared_error"
    focal_gamma: float = 2.0

    def __post_init__(self):
        checks = [
            (self.gamma >= 0, "gamma must be >= 0"),
            (int(self.n_estimators) == self.n_estimators and self.n_estimators >= 1, "n_estimators must be a positive integer"),
            (0.0 < self.colsample_bytree <= 1.0, "colsample_bytree must be in (0, 1]"),
            (int(self.max_depth) == self.max_depth and self.max_depth >= 1, "max_depth must be a positive integer"),
            (self.min_child_weight >= 0, "min_child_weight must be >= 0"),
            (self.reg_lambda >= 0, "reg_lambda must be >= 0"),
            (self.reg_alpha >= 0, "reg_alpha must be >= 0"),
            (0.0 < self.learning_rate <= 1.0, "learning_rate must be in (0, 1]"),
            (self.loss in LOSSES, f"loss must be one of {LOSSES}"),
            (self.focal_gamma >= 0, "focal_gamma must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigBoundViolation(msg)
        object.__setattr__(self, "n_estimators", int(self.n_estimators))
        object.__setattr__(self, "max_depth", int(self.max_depth))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> BaseLearnerConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigBoundViolation(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def with_(self, **kw) -> BaseLearnerConfig:
        return replace(self, **kw)


@dataclass(frozen=True)
class Tree:
    feature: np.ndarray  # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # learning rate already applied

    @property
    def leaf_values(self) -> np.ndarray:
        return self.value[self.feature < 0]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": [None if np.isnan(v) else float(v) for v in self.threshold],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Tree:
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int32),
            threshold=np.array([np.nan if v is None else v for v in d["threshold"]], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int32),
            right=np.asarray(d["right"], dtype=np.int32),
            value=np.asarray(d["value"], dtype=np.float64),
        )


@dataclass(frozen=True, eq=False)
class TreeEnsembleModel:
    """Fitted boosted ensemble.

    ``trees[i]`` holds one tree per output column (one for regression, K for
    classification), so ``len(trees) == config.n_estimators``.
    """

    trees: tuple[tuple[Tree, ...], ...]
    base_score: np.ndarray
    schema: tuple[str, ...]
    task: str  # "regression" | "classification"
    n_classes: int
    config: BaseLearnerConfig
    train_loss: tuple[float, ...] = field(default=())
    _flat: tuple = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_flat", _flatten(self.trees))

    @property
    def n_outputs(self) -> int:
        return 1 if self.task == "regression" else self.n_classes

    def raw_predict(self, X) -> np.ndarray:
        X = _as_matrix(X, self.schema)
        out = np.tile(self.base_score, (X.shape[0], 1)).astype(np.float64)
        if X.shape[0]:
            k = _backend.get_kernels()
            k.predict_forest(X, *self._flat, out)
        return out

    def to_dict(self) -> dict:
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "task": self.task,
            "n_classes": self.n_classes,
            "schema": list(self.schema),
            "config": self.config.to_dict(),
            "base_score": self.base_score.tolist(),
            "train_loss": list(self.train_loss),
            "trees": [[t.to_dict() for t in group] for group in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> TreeEnsembleModel:
        if d.get("format_version") != MODEL_FORMAT_VERSION:
            raise SchemaMismatch(f"unsupported model format version {d.get('format_version')!r}")
        return cls(
            trees=tuple(tuple(Tree.from_dict(t) for t in group) for group in d["trees"]),
            base_score=np.asarray(d["base_score"], dtype=np.float64),
            schema=tuple(d["schema"]),
            task=d["task"],
            n_classes=int(d["n_classes"]),
            config=BaseLearnerConfig.from_dict(d["config"]),
            train_loss=tuple(d.get("train_loss", ())),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> TreeEnsembleModel:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _flatten(trees):
    feats, thrs, lefts, rights, vals, roots, cols = [], [], [], [], [], [], []
    offset = 0
    for group in trees:
        for col, t in enumerate(group):
            feats.append(t.feature)
            thrs.append(t.threshold)
            shift = np.where(t.left >= 0, t.left + offset, -1)
            lefts.append(shift)
            rights.append(np.where(t.right >= 0, t.right + offset, -1))
            vals.append(t.value)
            roots.append(offset)
            cols.append(col)
            offset += len(t.feature)
    if not feats:
        empty_i = np.zeros(0, dtype=np.int32)
        return empty_i, np.zeros(0), empty_i, empty_i, np.zeros(0), empty_i, empty_i
    return (
        np.ascontiguousarray(np.concatenate(feats), dtype=np.int32),
        np.ascontiguousarray(np.concatenate(thrs), dtype=np.float64),
        np.ascontiguousarray(np.concatenate(lefts), dtype=np.int32),
        np.ascontiguousarray(np.concatenate(rights), dtype=np.int32),
        np.ascontiguousarray(np.concatenate(vals), dtype=np.float64),
        np.asarray(roots, dtype=np.int32),
        np.asarray(cols, dtype=np.int32),
    )


def _as_matrix(X, schema) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim == 1 and X.size == 0:
        X = X.reshape(0, len(schema))
    if X.ndim != 2 or X.shape[1] != len(schema):
        raise SchemaMismatch(f"expected {len(schema)} feature columns, got shape {X.shape}")
    return X


class _Presorted:
    """Per-feature sort order, computed once per fit."""

    def __init__(self, X: np.ndarray):
        self.X = X
        order = np.argsort(X, axis=0, kind="stable").T
        self.order = np.ascontiguousarray(order, dtype=np.int32)
        self.sorted_x = np.ascontiguousarray(np.take_along_axis(X, order.T, axis=0).T)


def _soft(g, alpha):
    return np.sign(g) * np.maximum(np.abs(g) - alpha, 0.0)


def grow_tree(data: _Presorted, g, h, cfg: BaseLearnerConfig, features, kernels) -> Tree:
    """Depth-wise exact greedy growth of one Newton tree."""
    X = data.X
    n = X.shape[0]
    node_of_row = np.zeros(n, dtype=np.int32)
    feature, threshold, left, right, value = [-1], [np.nan], [-1], [-1], [0.0]
    active = [0]  # tree node ids of the current level, indexed by local id

    def leaf(tree_id, G, H):
        value[tree_id] = float(-_soft(G, cfg.reg_alpha) / (H + cfg.reg_lambda) * cfg.learning_rate)

    for depth in range(cfg.max_depth + 1):
        m = len(active)
        live = node_of_row >= 0
        G = np.bincount(node_of_row[live], weights=g[live], minlength=m)
        H = np.bincount(node_of_row[live], weights=h[live], minlength=m)
        if depth == cfg.max_depth:
            for k, tid in enumerate(active):
                leaf(tid, G[k], H[k])
            break
        gain, bfeat, bthr = kernels.best_splits(
            data.sorted_x, data.order, features, node_of_row, g, h, G, H,
            cfg.reg_lambda, cfg.reg_alpha, cfg.min_child_weight,
        )
        do_split = (bfeat >= 0) & (gain - cfg.gamma > 0.0)
        new_local = np.full(m, -1, dtype=np.int32)
        next_active = []
        for k, tid in enumerate(active):
            if not do_split[k]:
                leaf(tid, G[k], H[k])
                continue
            lid, rid = len(feature), len(feature) + 1
            feature[tid] = int(bfeat[k])
            threshold[tid] = float(bthr[k])
            left[tid], right[tid] = lid, rid
            for _ in range(2):
                feature.append(-1)
                threshold.append(np.nan)
                left.append(-1)
                right.append(-1)
                value.append(0.0)
            new_local[k] = len(next_active)
            next_active += [lid, rid]
        if not next_active:
            break
        rows = np.flatnonzero(live)
        k_rows = node_of_row[rows]
        base = new_local[k_rows]
        moving = base >= 0
        rows_m, k_m = rows[moving], k_rows[moving]
        go_right = X[rows_m, bfeat[k_m]] > bthr[k_m]
        node_of_row[rows[~moving]] = -1
        node_of_row[rows_m] = base[moving] + go_right.astype(np.int32)
        active = next_active

    return Tree(
        feature=np.asarray(feature, dtype=np.int32),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        value=np.asarray(value, dtype=np.float64),
    )


def _column_sampler(cfg: BaseLearnerConfig, d: int, seed: int):
    n_cols = max(1, int(round(cfg.colsample_bytree * d)))
    if n_cols >= d:
        all_cols = np.arange(d, dtype=np.int64)
        return lambda: all_cols
    rng = np.random.default_rng(seed)
    return lambda: np.sort(rng.choice(d, size=n_cols, replace=False)).astype(np.int64)


def _prepare(X, n_rows, schema):
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyData("feature matrix must be 2-D and non-empty")
    if X.shape[0] != n_rows:
        raise EmptyData(f"X has {X.shape[0]} rows but targets have {n_rows}")
    if not np.isfinite(X).all():
        raise EmptyData("feature matrix contains non-finite values")
    if schema is None:
        schema = tuple(f"f{i}" for i in range(X.shape[1]))
    if len(schema) != X.shape[1]:
        raise SchemaMismatch("schema length does not match feature columns")
    return X, tuple(schema)


def fit_regressor(X, y, cfg: BaseLearnerConfig, seed: int = 0, *, schema=None, sample_weight=None,
                  backend: str | None = None) -> TreeEnsembleModel:
    """Squared-error Newton boosting."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1 or y.size < 2:
        raise EmptyData("need at least two targets")
    if cfg.loss != "squared_error":
        raise ConfigBoundViolation("fit_regressor requires loss='squared_error'")
    if not np.isfinite(y).all():
        raise EmptyData("targets contain non-finite values")
    X, schema = _prepare(X, y.size, schema)
    w = None
    if sample_weight is not None:
        w = np.asarray(sample_weight, dtype=np.float64)
        if w.shape != y.shape or (w < 0).any():
            raise EmptyData("sample_weight must be non-negative and match y")
    kernels = _backend.get_kernels(backend)
    data = _Presorted(X)
    base = float(np.average(y, weights=w)) if w is not None else float(y.mean())
    pred = np.full(y.size, base)
    cols = _column_sampler(cfg, X.shape[1], seed)
    trees, losses = [], []
    for _ in range(cfg.n_estimators):
        g, h = squared_error_grad(y, pred, w)
        tree = grow_tree(data, g, h, cfg, cols(), kernels)
        out = np.zeros((y.size, 1))
        _flat = _flatten(((tree,),))
        kernels.predict_forest(X, *_flat, out)
        pred = pred + out[:, 0]
        trees.append((tree,))
        losses.append(float(np.mean((y - pred) ** 2)))
    return TreeEnsembleModel(
        trees=tuple(trees), base_score=np.array([base]), schema=schema,
        task="regression", n_classes=0, config=cfg, train_loss=tuple(losses),
    )


def fit_classifier(X, labels, cfg: BaseLearnerConfig, seed: int = 0, *, n_classes: int | None = None,
                   schema=None, backend: str | None = None) -> TreeEnsembleModel:
    """Multi-class boosting with softmax cross-entropy or focal loss."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise EmptyData("labels must be a non-empty vector")
    if cfg.loss == "squared_error":
        raise ConfigBoundViolation("fit_classifier requires loss='softmax_ce' or 'focal'")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.mod(labels, 1) == 0):
            raise EmptyData("labels must be integer class ids")
        labels = labels.astype(np.int64)
    K = int(n_classes) if n_classes is not None else int(labels.max()) + 1
    if K < 2:
        raise SingleClassData("need at least two classes")
    if labels.min() < 0 or labels.max() >= K:
        raise EmptyData("labels must lie in 0..K-1")
    counts = np.bincount(labels, minlength=K)
    if (counts == 0).any():
        raise MissingClass(f"classes absent from training data: {np.flatnonzero(counts == 0).tolist()}")
    X, schema = _prepare(X, labels.size, schema)
    kernels = _backend.get_kernels(backend)
    data = _Presorted(X)
    prior = np.log(counts / counts.sum())
    base = prior - prior.mean()
    raw = np.tile(base, (labels.size, 1))
    cols = _column_sampler(cfg, X.shape[1], seed)
    trees, losses = [], []
    for _ in range(cfg.n_estimators):
        if cfg.loss == "focal":
            g, h = focal_grad(labels, raw, cfg.focal_gamma)
        else:
            g, h = softmax_ce_grad(labels, raw)
        h = np.maximum(h, HESS_FLOOR)
        feats = cols()
        group = tuple(
            grow_tree(data, np.ascontiguousarray(g[:, k]), np.ascontiguousarray(h[:, k]), cfg, feats, kernels)
            for k in range(K)
        )
        kernels.predict_forest(X, *_flatten((group,)), raw)
        trees.append(group)
        p = np.clip(softmax(raw)[np.arange(labels.size), labels], 1e-12, 1.0)
        losses.append(float(-np.mean(np.log(p))))
    return TreeEnsembleModel(
        trees=tuple(trees), base_score=base, schema=schema,
        task="classification", n_classes=K, config=cfg, train_loss=tuple(losses),
    )


def predict(model: TreeEnsembleModel, X) -> np.ndarray:
    """Regression output, or the most probable class id for classifiers."""
    raw = model.raw_predict(X)
    if model.task == "regression":
        return raw[:, 0]
    return np.argmax(raw, axis=1)


def predict_proba(model: TreeEnsembleModel, X) -> np.ndarray:
    if model.task != "classification":
        raise SchemaMismatch("predict_proba requires a classification model")
    return softmax(model.raw_predict(X))
