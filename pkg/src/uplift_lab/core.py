"""Domain types, dataset container, stratified splitting and CSV interchange."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import (
    DegenerateSplit,
    InvariantViolation,
    LengthMismatch,
    MissingColumn,
    NonFiniteValue,
    SchemaMismatch,
    UnknownTreatmentLabel,
)


class Arm(IntEnum):
    """Experiment arm. Ordered by id; CG is the default-recommendation control."""

    CG = 0
    TG1 = 1
    TG2 = 2
    TG3 = 3
    TG4 = 4

    @property
    def intensity(self) -> float:
        return INTENSITY[self]

    @property
    def is_default(self) -> bool:
        return self is Arm.CG


INTENSITY = {Arm.CG: 1.0, Arm.TG1: 1.0, Arm.TG2: 1.25, Arm.TG3: 1.5, Arm.TG4: 2.0}
TREATED_ARMS = (Arm.TG1, Arm.TG2, Arm.TG3, Arm.TG4)
ALL_ARMS = tuple(Arm)
INTENSITY_BY_ID = np.array([INTENSITY[a] for a in ALL_ARMS])

BASE_SCHEMA = (
    "tenure_days",
    "n_past_txns",
    "median_past_amount",
    "engagement_score",
    "is_new_user",
)
RESERVED_COLUMNS = ("user_id", "treatment", "y_deposit", "converted", "recalled", "n_txns")

MINOR_PER_MAJOR = 100  # paise per rupee


def parse_arm(label: str) -> Arm:
    try:
        return Arm[label.strip()]
    except KeyError:
        raise UnknownTreatmentLabel(f"unknown treatment label {label!r}") from None


def validate_features(X: np.ndarray, schema: Sequence[str]) -> None:
    if X.ndim != 2 or X.shape[1] != len(schema):
        raise SchemaMismatch(f"feature matrix has shape {X.shape}, schema has {len(schema)} columns")
    bad = ~np.isfinite(X)
    if bad.any():
        row = int(np.flatnonzero(bad.any(axis=1))[0])
        raise NonFiniteValue(f"non-finite feature value in row {row}", row=row)
    if "is_new_user" in schema:
        col = X[:, list(schema).index("is_new_user")]
        if not np.isin(col, (0.0, 1.0)).all():
            raise InvariantViolation("is_new_user must be 0 or 1")


@dataclass(frozen=True)
class ExperimentRecord:
    user_id: str
    x: np.ndarray
    t: Arm
    y_deposit: int
    converted: bool
    recalled: bool
    n_txns: int


@dataclass(frozen=True, eq=False)
class ExperimentDataset:
    """Column-oriented (X, T, Y) experiment table.

    Arrays are made read-only at construction, so instances can be shared
    between workers. ``y_deposit`` is held in integer minor units.
    """

    user_ids: np.ndarray
    X: np.ndarray
    schema: tuple[str, ...]
    treatment: np.ndarray
    y_deposit: np.ndarray
    converted: np.ndarray
    recalled: np.ndarray
    n_txns: np.ndarray

    def __post_init__(self):
        n = len(self.user_ids)
        fields = {
            "user_ids": np.asarray(self.user_ids, dtype=str),
            "X": np.asarray(self.X, dtype=np.float64).reshape(n, len(self.schema)),
            "treatment": np.asarray(self.treatment, dtype=np.int8),
            "y_deposit": np.asarray(self.y_deposit, dtype=np.int64),
            "converted": np.asarray(self.converted, dtype=bool),
            "recalled": np.asarray(self.recalled, dtype=bool),
            "n_txns": np.asarray(self.n_txns, dtype=np.int64),
        }
        for name, arr in fields.items():
            if len(arr) != n:
                raise LengthMismatch(f"column {name} has {len(arr)} rows, expected {n}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "schema", tuple(self.schema))
        self._validate()

    def _validate(self) -> None:
        validate_features(self.X, self.schema)
        if len(np.unique(self.user_ids)) != len(self.user_ids):
            raise InvariantViolation("user_ids must be unique")
        if ((self.treatment < 0) | (self.treatment > 4)).any():
            raise UnknownTreatmentLabel("treatment ids must be in 0..4")
        if (self.y_deposit < 0).any() or (self.n_txns < 0).any():
            raise InvariantViolation("deposits and transaction counts must be non-negative")
        lost = ~self.converted
        if (self.y_deposit[lost] != 0).any() or (self.n_txns[lost] != 0).any():
            raise InvariantViolation("unconverted users must have zero deposit and zero transactions")
        if (self.recalled & lost).any():
            raise InvariantViolation("recalled users must have converted")

    def __len__(self) -> int:
        return len(self.user_ids)

    @property
    def y(self) -> np.ndarray:
        """Deposit in major currency units, as float."""
        return self.y_deposit / MINOR_PER_MAJOR

    def feature(self, name: str) -> np.ndarray:
        return self.X[:, self.schema.index(name)]

    def subset(self, idx) -> ExperimentDataset:
        idx = np.asarray(idx)
        return ExperimentDataset(
            user_ids=self.user_ids[idx],
            X=self.X[idx],
            schema=self.schema,
            treatment=self.treatment[idx],
            y_deposit=self.y_deposit[idx],
            converted=self.converted[idx],
            recalled=self.recalled[idx],
            n_txns=self.n_txns[idx],
        )

    def arms(self, *arms: Arm) -> ExperimentDataset:
        return self.subset(np.flatnonzero(np.isin(self.treatment, [int(a) for a in arms])))

    def records(self) -> Iterator[ExperimentRecord]:
        for i in range(len(self)):
            yield ExperimentRecord(
                user_id=str(self.user_ids[i]),
                x=self.X[i],
                t=Arm(int(self.treatment[i])),
                y_deposit=int(self.y_deposit[i]),
                converted=bool(self.converted[i]),
                recalled=bool(self.recalled[i]),
                n_txns=int(self.n_txns[i]),
            )

    @classmethod
    def from_records(cls, records: Sequence[ExperimentRecord], schema: Sequence[str]) -> ExperimentDataset:
        d = len(schema)
        return cls(
            user_ids=[r.user_id for r in records],
            X=np.array([r.x for r in records], dtype=np.float64).reshape(len(records), d),
            schema=tuple(schema),
            treatment=[int(r.t) for r in records],
            y_deposit=[r.y_deposit for r in records],
            converted=[r.converted for r in records],
            recalled=[r.recalled for r in records],
            n_txns=[r.n_txns for r in records],
        )

    def equals(self, other: ExperimentDataset) -> bool:
        return (
            self.schema == other.schema
            and np.array_equal(self.user_ids, other.user_ids)
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.treatment, other.treatment)
            and np.array_equal(self.y_deposit, other.y_deposit)
            and np.array_equal(self.converted, other.converted)
            and np.array_equal(self.recalled, other.recalled)
            and np.array_equal(self.n_txns, other.n_txns)
        )


def format_float(v: float) -> str:
    """Shortest round-trip decimal form, locale independent."""
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def save_dataset(ds: ExperimentDataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", *ds.schema, "treatment", "y_deposit", "converted", "recalled", "n_txns"])
        for i in range(len(ds)):
            w.writerow(
                [
                    ds.user_ids[i],
                    *(format_float(v) for v in ds.X[i]),
                    Arm(int(ds.treatment[i])).name,
                    int(ds.y_deposit[i]),
                    int(ds.converted[i]),
                    int(ds.recalled[i]),
                    int(ds.n_txns[i]),
                ]
            )


def _parse_bool(s: str, row: int, col: str) -> bool:
    if s == "1":
        return True
    if s == "0":
        return False
    raise InvariantViolation(f"row {row}: column {col} must be 0 or 1, got {s!r}")


def load_dataset(path, schema: Sequence[str] | None = None) -> ExperimentDataset:
    """Read a dataset written by :func:`save_dataset`.

    When ``schema`` is None the feature columns are inferred from the header
    (every column between ``user_id`` and ``treatment``).
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingColumn(f"{path}: empty file, no header") from None
        missing = [c for c in RESERVED_COLUMNS if c not in header]
        if missing:
            raise MissingColumn(f"missing columns: {', '.join(missing)}")
        if schema is None:
            schema = tuple(header[header.index("user_id") + 1 : header.index("treatment")])
        missing = [c for c in schema if c not in header]
        if missing:
            raise MissingColumn(f"missing feature columns: {', '.join(missing)}")
        pos = {c: header.index(c) for c in (*RESERVED_COLUMNS, *schema)}
        feat_pos = [pos[c] for c in schema]

        uids, X, t, y, conv, rec, nt = [], [], [], [], [], [], []
        for i, row in enumerate(reader):
            try:
                x = [float(row[p]) for p in feat_pos]
            except ValueError as exc:
                raise NonFiniteValue(f"row {i}: unparsable feature value ({exc})", row=i) from None
            if not all(math.isfinite(v) for v in x):
                raise NonFiniteValue(f"row {i}: non-finite feature value", row=i)
            uids.append(row[pos["user_id"]])
            X.append(x)
            t.append(int(parse_arm(row[pos["treatment"]])))
            y.append(int(row[pos["y_deposit"]]))
            conv.append(_parse_bool(row[pos["converted"]], i, "converted"))
            rec.append(_parse_bool(row[pos["recalled"]], i, "recalled"))
            nt.append(int(row[pos["n_txns"]]))
    return ExperimentDataset(
        user_ids=np.array(uids, dtype=str),
        X=np.array(X, dtype=np.float64).reshape(len(uids), len(schema)),
        schema=tuple(schema),
        treatment=t,
        y_deposit=y,
        converted=conv,
        recalled=rec,
        n_txns=nt,
    )


def split(ds: ExperimentDataset, test_fraction: float, seed: int) -> tuple[ExperimentDataset, ExperimentDataset]:
    """Stratified-by-arm train/test partition, deterministic in ``seed``."""
    if not 0.0 < test_fraction < 1.0:
        raise DegenerateSplit("test_fraction must lie in (0, 1)")
    if len(ds) == 0:
        raise DegenerateSplit("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    test_idx = []
    for arm in ALL_ARMS:
        idx = np.flatnonzero(ds.treatment == arm)
        if idx.size == 0:
            continue
        if idx.size < 2:
            raise DegenerateSplit(f"arm {arm.name} has fewer than 2 records")
        n_test = int(np.floor(test_fraction * idx.size + 0.5))
        n_test = min(max(n_test, 1), idx.size - 1)
        test_idx.append(rng.permutation(idx)[:n_test])
    test_mask = np.zeros(len(ds), dtype=bool)
    test_mask[np.concatenate(test_idx)] = True
    return ds.subset(np.flatnonzero(~test_mask)), ds.subset(np.flatnonzero(test_mask))
