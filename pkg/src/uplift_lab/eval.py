"""Off-policy value (ERUPT), uplift curves / AUUC and per-arm guardrails."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ALL_ARMS, TREATED_ARMS, Arm, ExperimentDataset
from .errors import (
    DegenerateCurve,
    EmptyArm,
    MissingArm,
    LengthMismatch,
    UncoveredUser,
    ValidationError,
    ZeroPropensity,
)
from .uplift import PolicyAssignment, percent_treated

UNIFORM = (0.2, 0.2, 0.2, 0.2, 0.2)
CURVE_POINTS = 100
DEFAULT_RESAMPLES = 5000
ERUPT_FORMS = ("matched", "ipw")


def _policy_arms(ds: ExperimentDataset, policy) -> np.ndarray:
    if isinstance(policy, PolicyAssignment):
        arms = policy.arms
        if policy.user_ids is not None:
            if len(policy.user_ids) != len(ds) or not np.array_equal(policy.user_ids, ds.user_ids):
                missing = np.setdiff1d(ds.user_ids, policy.user_ids)
                which = missing[0] if missing.size else "(order differs)"
                raise UncoveredUser(f"policy does not cover dataset users; first uncovered: {which}")
    else:
        arms = np.asarray(policy)
    if len(arms) != len(ds):
        raise UncoveredUser(f"policy has {len(arms)} assignments for {len(ds)} users")
    return np.asarray(arms, dtype=np.int64)


def align_policy(policy: PolicyAssignment, ds: ExperimentDataset) -> PolicyAssignment:
    """Reorder a keyed policy to the dataset's user order. Extra policy rows
    are dropped; a dataset user without a row raises UncoveredUser."""
    if policy.user_ids is None:
        return policy
    pos = {u: i for i, u in enumerate(policy.user_ids)}
    if len(pos) != len(policy.user_ids):
        raise ValidationError("policy lists a user more than once")
    idx = np.empty(len(ds), dtype=np.int64)
    for i, u in enumerate(ds.user_ids):
        j = pos.get(u)
        if j is None:
            raise UncoveredUser(f"policy has no assignment for user {u}")
        idx[i] = j
    return PolicyAssignment(policy.arms[idx], policy.provenance, ds.user_ids)


def _check_propensities(propensities) -> np.ndarray:
    p = np.asarray(propensities, dtype=np.float64)
    if p.shape != (5,):
        raise ValidationError("need one propensity per arm (five values)")
    if (p <= 0).any():
        raise ZeroPropensity(f"propensities must be positive, got {p.tolist()}")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValidationError("propensities must sum to 1")
    return p


def _erupt_terms(ds, policy, propensities):
    arms = _policy_arms(ds, policy)
    p = _check_propensities(propensities)
    t = ds.treatment.astype(np.int64)
    w = (arms == t) / p[t]
    return ds.y, w


def _combine(yw_sum, w_sum, n, form):
    if form == "ipw":
        return yw_sum / n
    if w_sum == 0:
        raise ValidationError("no user's observed arm matches the policy; matched ERUPT undefined")
    return yw_sum / w_sum


def erupt(ds: ExperimentDataset, policy, propensities=UNIFORM, form: str = "matched") -> float:
    """Expected response under the proposed arms, estimated from randomized data.

    ``form="ipw"`` is the plain inverse-propensity sum ``mean(y * 1[match] / p(t))``;
    ``form="matched"`` divides by the summed weights instead of ``n``
    (the matched-mean estimator), which is exact for a policy equal to the
    observed assignment.
    """
    if form not in ERUPT_FORMS:
        raise ValidationError(f"form must be one of {ERUPT_FORMS}")
    if len(ds) == 0:
        raise ValidationError("empty dataset")
    y, w = _erupt_terms(ds, policy, propensities)
    return float(_combine(float(np.dot(y, w)), float(w.sum()), len(y), form))


@dataclass(frozen=True)
class BootstrapResult:
    point: float
    samples: np.ndarray = field(repr=False)
    ci_low: float
    ci_high: float
    level: float
    form: str

    @property
    def se(self) -> float:
        return float(self.samples.std(ddof=1))

    def to_dict(self, include_samples: bool = False) -> dict:
        d = {"point": self.point, "ci_low": self.ci_low, "ci_high": self.ci_high, "level": self.level,
             "se": self.se, "n_resamples": int(self.samples.size), "form": self.form}
        if include_samples:
            d["samples"] = self.samples.tolist()
        return d


def bootstrap_erupt(ds: ExperimentDataset, policy, propensities=UNIFORM, n_resamples: int = DEFAULT_RESAMPLES,
                    seed: int = 0, level: float = 0.95, sample_size: int | None = None,
                    form: str = "matched") -> BootstrapResult:
    """Percentile bootstrap of :func:`erupt` over users resampled with replacement.

    Each resample draws from its own stream spawned from ``seed``, so the
    sample does not depend on evaluation order.
    """
    if n_resamples < 100:
        raise ValidationError("n_resamples must be >= 100")
    if not 0 < level < 1:
        raise ValidationError("level must lie in (0, 1)")
    point = erupt(ds, policy, propensities, form)
    y, w = _erupt_terms(ds, policy, propensities)
    yw = y * w
    n = len(y)
    m = n if sample_size is None else int(sample_size)
    if m < 1:
        raise ValidationError("sample_size must be >= 1")
    streams = np.random.SeedSequence(int(seed)).spawn(n_resamples)
    out = np.empty(n_resamples)
    for b, ss in enumerate(streams):
        idx = np.random.default_rng(ss).integers(0, n, m)
        ws = w[idx].sum()
        if form == "ipw":
            out[b] = yw[idx].sum() / m
        else:
            out[b] = yw[idx].sum() / ws if ws > 0 else np.nan
    good = out[np.isfinite(out)]
    if good.size == 0:
        raise ValidationError("no bootstrap resample contained a matched user")
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(good, [alpha, 1.0 - alpha])
    return BootstrapResult(point, out, float(lo), float(hi), level, form)


# -- uplift curves -----------------------------------------------------------


@dataclass(frozen=True)
class UpliftCurve:
    """Cumulative incremental gain against the targeted population fraction."""

    treatment: str
    k: np.ndarray
    gain: np.ndarray
    total_gain: float
    n: int

    def __post_init__(self):
        if self.k.size < 2 or not np.all(np.diff(self.k) > 0) or self.k[0] != 0.0:
            raise DegenerateCurve("curve needs >= 2 points with k strictly increasing from 0")

    @property
    def baseline(self) -> np.ndarray:
        return self.k * self.total_gain


def _gain_path(y, treated, order):
    """Gain after each prefix of ``order`` (index m -> first m users)."""
    yt = np.concatenate([[0.0], np.cumsum(np.where(treated, y, 0.0)[order])])
    yc = np.concatenate([[0.0], np.cumsum(np.where(treated, 0.0, y)[order])])
    nt = np.concatenate([[0], np.cumsum(treated[order])])
    nc = np.arange(len(y) + 1) - nt
    m = np.arange(len(y) + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = (yt / nt - yc / nc) * m
    return np.where((nt > 0) & (nc > 0), g, 0.0)


def uplift_curve(ds: ExperimentDataset, scores, treatment, n_points: int = CURVE_POINTS) -> UpliftCurve:
    """Uplift curve of ``scores`` for one treated arm versus control.

    ``ds`` may hold every arm; only CG and ``treatment`` records are used and
    ``scores`` is aligned with ``ds``. Users are ranked by descending score,
    ties by ascending user id.
    """
    arm = Arm[treatment] if isinstance(treatment, str) else Arm(int(treatment))
    if arm is Arm.CG:
        raise ValidationError("uplift curves are defined for treated arms")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(ds),):
        raise LengthMismatch(f"{scores.size} scores for {len(ds)} records")
    mask = (ds.treatment == Arm.CG) | (ds.treatment == arm)
    treated = ds.treatment[mask] == arm
    if not treated.any() or treated.all():
        raise MissingArm(f"need both CG and {arm.name} records for an uplift curve")
    y, s, ids = ds.y[mask], scores[mask], ds.user_ids[mask]
    order = np.lexsort((ids, -s))
    path = _gain_path(y, treated, order)
    n = len(y)
    m = np.unique(np.round(np.linspace(0, n, n_points + 1)).astype(np.int64))
    return UpliftCurve(arm.name, m / n, path[m], float(path[-1]), n)


def auuc(curve: UpliftCurve) -> float:
    """Signed trapezoid area between the curve and the random baseline,
    divided by |total gain| (left unnormalized when the total gain is 0)."""
    diff = curve.gain - curve.baseline
    area = float(np.sum(0.5 * (diff[1:] + diff[:-1]) * np.diff(curve.k)))
    return area / abs(curve.total_gain) if curve.total_gain != 0 else area


def auuc_by_treatment(ds: ExperimentDataset, cate) -> dict[str, float]:
    cate = np.asarray(cate, dtype=np.float64)
    if cate.shape != (len(ds), 4):
        raise LengthMismatch("CATE matrix must be n x 4 and aligned with the dataset")
    return {a.name: auuc(uplift_curve(ds, cate[:, j], a)) for j, a in enumerate(TREATED_ARMS)}


# -- guardrails --------------------------------------------------------------


def guardrail_report(ds: ExperimentDataset, arms=ALL_ARMS) -> dict[str, dict[str, float]]:
    """Per-arm conversion, recall among converters, per-txn value, txns per
    converter and mean deposit (major units)."""
    out = {}
    for a in arms:
        a = Arm(int(a))
        sel = ds.treatment == a
        n = int(sel.sum())
        if n == 0:
            raise EmptyArm(f"arm {a.name} has no records")
        conv = ds.converted[sel]
        txns = ds.n_txns[sel]
        y = ds.y[sel]
        n_conv = int(conv.sum())
        out[a.name] = {
            "n": n,
            "conversion": float(conv.mean()),
            "recall": float(ds.recalled[sel][conv].mean()) if n_conv else float("nan"),
            "per_txn_value": float(y.sum() / txns.sum()) if txns.sum() else float("nan"),
            "txns_per_converter": float(txns.sum() / n_conv) if n_conv else float("nan"),
            "mean_deposit": float(y.mean()),
        }
    return out


def guardrail_deltas(report: dict, arm: str = "TG4", reference: str = "CG") -> dict[str, float]:
    """Arm versus reference: conversion in absolute points, the rest relative."""
    a, r = report[arm], report[reference]
    return {
        "conversion_pp": a["conversion"] - r["conversion"],
        "recall_pp": a["recall"] - r["recall"],
        "per_txn_value_rel": a["per_txn_value"] / r["per_txn_value"] - 1.0,
        "txns_rel": a["txns_per_converter"] / r["txns_per_converter"] - 1.0,
        "mean_deposit_rel": a["mean_deposit"] / r["mean_deposit"] - 1.0,
    }


# -- report -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class UpliftReport:
    erupt_point: float
    erupt_ipw: float
    erupt_bootstrap: BootstrapResult
    grid_erupt: float
    grid_bootstrap: BootstrapResult
    auuc: dict[str, float] | None
    percent_treated: dict[str, float]
    guardrails: dict[str, dict[str, float]]
    curves: dict[str, UpliftCurve] = field(default_factory=dict, repr=False)

    @property
    def relative_uplift(self) -> float:
        return self.erupt_point / self.grid_erupt - 1.0

    def to_dict(self, include_samples: bool = False) -> dict:
        return {
            "erupt": {
                "matched": self.erupt_point,
                "ipw": self.erupt_ipw,
                "bootstrap": self.erupt_bootstrap.to_dict(include_samples),
            },
            "grid": {"erupt": self.grid_erupt, "bootstrap": self.grid_bootstrap.to_dict(include_samples)},
            "relative_uplift_vs_grid": self.relative_uplift,
            "auuc": self.auuc,
            "percent_treated": self.percent_treated,
            "guardrails": self.guardrails,
        }

    def save(self, path, include_samples: bool = False) -> None:
        Path(path).write_text(json.dumps(_clean(self.to_dict(include_samples)), indent=2, sort_keys=True) + "\n")


def _clean(obj):
    # JSON has no NaN
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def evaluate(ds: ExperimentDataset, policy: PolicyAssignment, cate=None, propensities=UNIFORM,
             n_resamples: int = DEFAULT_RESAMPLES, seed: int = 0) -> UpliftReport:
    """ERUPT of ``policy`` and of the grid assignment, AUUC per treated arm
    when ``cate`` is given, percent treated and guardrails."""
    from .uplift import grid_policy

    grid = grid_policy(ds)
    boot = bootstrap_erupt(ds, policy, propensities, n_resamples, seed)
    grid_boot = bootstrap_erupt(ds, grid, propensities, n_resamples, seed)
    curves, areas = {}, None
    if cate is not None:
        cate = np.asarray(cate, dtype=np.float64)
        if cate.shape != (len(ds), 4):
            raise LengthMismatch("CATE matrix must be n x 4 and aligned with the dataset")
        curves = {a.name: uplift_curve(ds, cate[:, j], a) for j, a in enumerate(TREATED_ARMS)}
        areas = {name: auuc(c) for name, c in curves.items()}
    present = [a for a in ALL_ARMS if (ds.treatment == a).any()]
    return UpliftReport(
        erupt_point=boot.point,
        erupt_ipw=erupt(ds, policy, propensities, "ipw"),
        erupt_bootstrap=boot,
        grid_erupt=grid_boot.point,
        grid_bootstrap=grid_boot,
        auuc=areas,
        percent_treated=percent_treated(policy),
        guardrails=guardrail_report(ds, present),
        curves=curves,
    )


def save_curve(curve: UpliftCurve, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "gain", "baseline"])
        for k, g, b in zip(curve.k, curve.gain, curve.baseline):
            w.writerow([repr(float(k)), repr(float(g)), repr(float(b))])


def load_curve(path, treatment: str = "TG1") -> UpliftCurve:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    k = np.array([float(r["k"]) for r in rows])
    gain = np.array([float(r["gain"]) for r in rows])
    return UpliftCurve(treatment, k, gain, float(gain[-1]), 0)


# -- plots (optional dependency) ----------------------------------------------


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise ValidationError("plots need matplotlib; install the 'plots' extra") from exc
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "uplift-lab"
    import matplotlib.pyplot as plt

    return plt


def plot_curves(curves: dict[str, UpliftCurve], path) -> None:
    plt = _pyplot()
    fig, axes = plt.subplots(1, len(curves), figsize=(4 * len(curves), 3.5), squeeze=False)
    for ax, (name, c) in zip(axes[0], sorted(curves.items())):
        ax.plot(c.k, c.gain, label="model")
        ax.plot([0, 1], [0, c.total_gain], "--", label="random")
        ax.set_title(name)
        ax.set_xlabel("fraction targeted")
    axes[0][0].set_ylabel("cumulative incremental gain")
    axes[0][0].legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_erupt(report: UpliftReport, path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, b in (("grid", report.grid_bootstrap), ("policy", report.erupt_bootstrap)):
        s = b.samples[np.isfinite(b.samples)]
        ax.hist(s, bins=50, alpha=0.6, label=label)
    ax.set_xlabel("ERUPT (mean deposit)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
