"""Deposit-amount class prediction, the rolling-median heuristic, and the
intensity-scaled three-value recommendation.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .baselearn import BaseLearnerConfig, TreeEnsembleModel, fit_classifier, fit_regressor, predict, predict_proba
from .core import format_float, validate_features
from .errors import (
    AmountAboveMaximum,
    EmptyHistory,
    InsufficientData,
    LadderExhausted,
    LengthMismatch,
    MissingColumn,
    SchemaMismatch,
    ValidationError,
)

DEFAULT_EDGES = (0, 20, 40, 60, 80, 100, 150, 200, 300, 500, 1000, 25000)
DEFAULT_LADDER = (10, 20, 25, 50, 100, 200, 250, 400, 500, 1000, 2000, 2500, 5000, 10000, 20000, 25000)
PLATFORM_MAX = 25000
ALLOWED_INTENSITIES = (1.0, 1.25, 1.5, 2.0)
OPTION_MULTIPLIERS = (4, 10)
HEURISTIC_WINDOW = 10
MIN_CLASS_COUNT = 10
# classifier settings used by the CLI and the acceptance suite
DEFAULT_CLASSIFIER_CONFIG = BaseLearnerConfig(n_estimators=60, max_depth=4, learning_rate=0.2,
                                              min_child_weight=5.0, loss="softmax_ce")


@dataclass(frozen=True)
class AmountBinning:
    edges: tuple[float, ...] = DEFAULT_EDGES

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.float64)
        if e.size < 3 or e[0] != 0 or not np.all(np.diff(e) > 0):
            raise ValidationError("binning edges must start at 0, be strictly increasing and define >= 2 classes")
        object.__setattr__(self, "edges", tuple(float(v) for v in e))

    @property
    def n_classes(self) -> int:
        return len(self.edges) - 1

    @property
    def maximum(self) -> float:
        return self.edges[-1]

    @property
    def labels(self) -> list[str]:
        return [f"{format_float(a)}-{format_float(b)}" for a, b in zip(self.edges[:-1], self.edges[1:])]

    @property
    def representatives(self) -> np.ndarray:
        """Amount standing in for each class: geometric mean of the bin edges.

        The first bin (lower edge 0) uses its midpoint and the open-ended last
        bin uses 1.5x its lower edge.
        """
        e = np.asarray(self.edges)
        rep = np.sqrt(e[:-1] * e[1:])
        rep[0] = 0.5 * (e[0] + e[1])
        rep[-1] = 1.5 * e[-2]
        return rep

    def to_dict(self) -> dict:
        return {"edges": list(self.edges), "labels": self.labels}

    @classmethod
    def from_dict(cls, d: dict) -> AmountBinning:
        return cls(edges=tuple(d["edges"]))

    @classmethod
    def load(cls, path) -> AmountBinning:
        return cls.from_dict(json.loads(Path(path).read_text()))


def bin_amounts(amounts, binning: AmountBinning = AmountBinning()) -> np.ndarray:
    """Class id per amount: ``edges[i] <= a < edges[i+1]``, last edge inclusive."""
    a = np.asarray(amounts, dtype=np.float64)
    if (a < 0).any() or not np.isfinite(a).all():
        raise ValidationError("amounts must be finite and non-negative")
    if (a > binning.maximum).any():
        raise AmountAboveMaximum(f"amount above platform maximum {binning.maximum}")
    cls = np.searchsorted(np.asarray(binning.edges), a, side="right") - 1
    return np.minimum(cls, binning.n_classes - 1)


def lower_median(values) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    return float(v[(v.size - 1) // 2])


def heuristic_predict(history, binning: AmountBinning = AmountBinning()) -> int:
    """Bin of the lower median of the most recent ten transactions."""
    h = np.asarray(history, dtype=np.float64)
    if h.size == 0:
        raise EmptyHistory("history must contain at least one transaction")
    return int(bin_amounts([lower_median(h[-HEURISTIC_WINDOW:])], binning)[0])


# -- recommendations -------------------------------------------------------


def ladder_round(values, ladder: Sequence[float] = DEFAULT_LADDER) -> np.ndarray:
    """Nearest ladder value; ties go to the lower denomination."""
    lad = np.asarray(ladder, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    hi = np.clip(np.searchsorted(lad, v, side="left"), 0, lad.size - 1)
    lo = np.clip(hi - 1, 0, lad.size - 1)
    take_hi = (lad[hi] - v) < (v - lad[lo])
    return np.where(take_hi, lad[hi], lad[lo])


@dataclass(frozen=True)
class Recommendation:
    prefill: float
    option1: float
    option2: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.prefill, self.option1, self.option2)


@dataclass(frozen=True)
class DepositPrediction:
    class_probs: np.ndarray
    expected_amount: float


def recommend(pred, intensity: float, ladder: Sequence[float] = DEFAULT_LADDER,
              max_amount: float = PLATFORM_MAX) -> Recommendation:
    """Three ladder-valued suggestions scaled by the upsell intensity.

    ``pred`` is a :class:`DepositPrediction` or a bare expected amount.
    """
    expected = pred.expected_amount if isinstance(pred, DepositPrediction) else float(pred)
    if intensity not in ALLOWED_INTENSITIES:
        raise ValidationError(f"intensity must be one of {ALLOWED_INTENSITIES}")
    lad = np.asarray(ladder, dtype=np.float64)
    if lad.size < 3 or not np.all(np.diff(lad) > 0):
        raise ValidationError("ladder must be strictly increasing with at least three values")
    allowed = lad[lad <= max_amount]
    if allowed.size < 3:
        raise LadderExhausted("fewer than three ladder values under the cap")

    prefill = float(ladder_round(expected * intensity, lad))
    triple = [prefill] + [float(ladder_round(m * prefill, lad)) for m in OPTION_MULTIPLIERS]
    cap = allowed[-1]
    triple = [min(v, cap) for v in triple]
    # restore strict ordering from the top by stepping down the ladder
    for i in (1, 0):
        if triple[i] >= triple[i + 1]:
            below = allowed[allowed < triple[i + 1]]
            if below.size == 0:
                raise LadderExhausted("cannot keep suggestions strictly increasing under the cap")
            triple[i] = float(below[-1])
    return Recommendation(*triple)


# -- metrics ---------------------------------------------------------------


def confusion_matrix(pred, truth, K: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    return np.bincount(truth * K + pred, minlength=K * K).reshape(K, K)


def per_class_f1(pred, truth, K: int) -> tuple[np.ndarray, np.ndarray]:
    cm = confusion_matrix(pred, truth, K).astype(np.float64)
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    denom = support + predicted  # = 2tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros(K), where=denom > 0)
    return f1, support


def weighted_f1(pred, truth, K: int) -> float:
    """Support-weighted mean of per-class F1 (F1 is 0 when undefined)."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise LengthMismatch("pred and truth must have equal length")
    if pred.size == 0:
        raise LengthMismatch("need at least one prediction")
    f1, support = per_class_f1(pred, truth, K)
    return float(np.sum(support / support.sum() * f1))


# -- histories and training ------------------------------------------------


HISTORY_FEATURES = (
    "h_last",
    "h_median10",
    "h_mean10",
    "h_std10",
    "h_min10",
    "h_max10",
    "h_grad_mean",
    "h_grad_last",
    "h_len",
)


@dataclass(frozen=True, eq=False)
class HistoryTable:
    """Per-user past deposit amounts (oldest first, NaN padded on the left)
    plus the next observed deposit, which is the training label.
    """

    user_ids: np.ndarray
    X: np.ndarray
    schema: tuple[str, ...]
    histories: np.ndarray
    next_amount: np.ndarray

    def __post_init__(self):
        validate_features(np.asarray(self.X, dtype=np.float64), self.schema)
        n = len(self.user_ids)
        if not (len(self.X) == len(self.histories) == len(self.next_amount) == n):
            raise LengthMismatch("history table columns differ in length")

    def __len__(self) -> int:
        return len(self.user_ids)

    def history(self, i: int) -> np.ndarray:
        h = self.histories[i]
        return h[~np.isnan(h)]

    def subset(self, idx) -> HistoryTable:
        return HistoryTable(self.user_ids[idx], self.X[idx], self.schema, self.histories[idx], self.next_amount[idx])


def history_features(histories: np.ndarray) -> np.ndarray:
    """Summary and first-difference ("gradient") features over the last ten amounts."""
    H = np.asarray(histories, dtype=np.float64)
    w = H[:, -HEURISTIC_WINDOW:]
    valid = ~np.isnan(w)
    count = valid.sum(axis=1)
    if (count == 0).any():
        raise EmptyHistory("every user needs at least one past transaction")
    sorted_w = np.sort(np.where(valid, w, np.inf), axis=1)
    med = sorted_w[np.arange(len(w)), (count - 1) // 2]
    logw = np.log1p(w)
    diffs = np.diff(logw, axis=1)
    dvalid = ~np.isnan(diffs)
    dcount = dvalid.sum(axis=1)
    grad_mean = np.where(dcount > 0, np.nansum(diffs, axis=1) / np.maximum(dcount, 1), 0.0)
    last = w[:, -1]
    grad_last = np.nan_to_num(diffs[:, -1], nan=0.0)
    return np.column_stack(
        [
            last,
            med,
            np.nanmean(w, axis=1),
            np.nan_to_num(np.nanstd(w, axis=1)),
            np.nanmin(w, axis=1),
            np.nanmax(w, axis=1),
            grad_mean,
            grad_last,
            count.astype(np.float64),
        ]
    )


def design_matrix(table: HistoryTable) -> tuple[np.ndarray, tuple[str, ...]]:
    X = np.column_stack([table.X, history_features(table.histories)])
    return X, table.schema + HISTORY_FEATURES


def heuristic_classes(table: HistoryTable, binning: AmountBinning) -> np.ndarray:
    return bin_amounts(history_features(table.histories)[:, 1], binning)


@dataclass(frozen=True, eq=False)
class DepositModel:
    model: TreeEnsembleModel
    binning: AmountBinning

    def predict_deposit(self, table: HistoryTable) -> list[DepositPrediction]:
        X, _ = design_matrix(table)
        probs = predict_proba(self.model, X)
        expected = probs @ self.binning.representatives
        return [DepositPrediction(p, float(e)) for p, e in zip(probs, expected)]

    def predict_classes(self, table: HistoryTable) -> np.ndarray:
        X, _ = design_matrix(table)
        return predict(self.model, X)

    def to_dict(self) -> dict:
        return {"binning": self.binning.to_dict(), "model": self.model.to_dict()}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path) -> DepositModel:
        d = json.loads(Path(path).read_text())
        return cls(TreeEnsembleModel.from_dict(d["model"]), AmountBinning.from_dict(d["binning"]))


def _report_row(name, pred, truth, K):
    f1, support = per_class_f1(pred, truth, K)
    return {
        "model": name,
        "weighted_f1": weighted_f1(pred, truth, K),
        "per_class_f1": f1.tolist(),
        "support": support.astype(int).tolist(),
        "confusion_matrix": confusion_matrix(pred, truth, K).tolist(),
    }


def train_deposit_model(table: HistoryTable, cfg: BaseLearnerConfig, binning: AmountBinning = AmountBinning(),
                        seed: int = 0, validation_fraction: float = 0.2,
                        baselines: Sequence[str] = ("heuristic",),
                        regressor_cfg: BaseLearnerConfig | None = None) -> tuple[DepositModel, dict]:
    """Fit the class model on a training fold and score it on a held-out fold.

    The report carries one row per model (trained classifier first, then
    each requested baseline), all scored on the same validation users.
    """
    labels = bin_amounts(table.next_amount, binning)
    K = binning.n_classes
    counts = np.bincount(labels, minlength=K)
    if (counts < MIN_CLASS_COUNT).any():
        raise InsufficientData(
            f"every class needs >= {MIN_CLASS_COUNT} examples; counts per class: {counts.tolist()}"
        )
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(table))
    n_val = int(round(validation_fraction * len(table)))
    val, tr = np.sort(perm[:n_val]), np.sort(perm[n_val:])

    X, schema = design_matrix(table)
    model = fit_classifier(X[tr], labels[tr], cfg, seed, n_classes=K, schema=schema)
    rows = [_report_row(cfg.loss, predict(model, X[val]), labels[val], K)]
    for name in baselines:
        if name == "heuristic":
            pred = heuristic_classes(table.subset(val), binning)
        elif name == "regressor":
            rcfg = regressor_cfg or cfg.with_(loss="squared_error")
            reg = fit_regressor(X[tr], np.log1p(table.next_amount[tr]), rcfg, seed, schema=schema)
            amounts = np.clip(np.expm1(predict(reg, X[val])), 0.0, binning.maximum)
            pred = bin_amounts(amounts, binning)
        else:
            raise ValidationError(f"unknown baseline {name!r}")
        rows.append(_report_row(name, pred, labels[val], K))
    report = {
        "binning": binning.to_dict(),
        "config": cfg.to_dict(),
        "seed": seed,
        "n_train": int(tr.size),
        "n_validation": int(val.size),
        "rows": rows,
    }
    return DepositModel(model, binning), report


# -- history CSV -----------------------------------------------------------


def save_histories(table: HistoryTable, path) -> None:
    L = table.histories.shape[1]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", *table.schema, *(f"amt_{j + 1:02d}" for j in range(L)), "next_amount"])
        for i in range(len(table)):
            hist = ["" if np.isnan(v) else format_float(v) for v in table.histories[i]]
            w.writerow([table.user_ids[i], *(format_float(v) for v in table.X[i]), *hist,
                        format_float(table.next_amount[i])])


def load_histories(path) -> HistoryTable:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingColumn("empty history file") from None
        if "user_id" not in header or "next_amount" not in header:
            raise MissingColumn("history file needs user_id and next_amount columns")
        amt_cols = [i for i, c in enumerate(header) if c.startswith("amt_")]
        if not amt_cols:
            raise MissingColumn("history file has no amt_ columns")
        feat_cols = [i for i, c in enumerate(header) if c not in ("user_id", "next_amount") and not c.startswith("amt_")]
        schema = tuple(header[i] for i in feat_cols)
        uid_i, next_i = header.index("user_id"), header.index("next_amount")
        uids, X, H, nxt = [], [], [], []
        for row in reader:
            uids.append(row[uid_i])
            X.append([float(row[i]) for i in feat_cols])
            H.append([float(row[i]) if row[i] != "" else np.nan for i in amt_cols])
            nxt.append(float(row[next_i]))
    if uids and len(set(uids)) != len(uids):
        raise SchemaMismatch("duplicate user ids in history file")
    return HistoryTable(
        np.array(uids, dtype=str),
        np.array(X, dtype=np.float64).reshape(len(uids), len(schema)),
        schema,
        np.array(H, dtype=np.float64).reshape(len(uids), len(amt_cols)),
        np.array(nxt, dtype=np.float64),
    )
