"""Ensembling, threshold calibration, confusion metrics, ROC AUC, bootstrap CIs, Fleiss' kappa."""

from __future__ import annotations

import csv
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cohort import VIEWS
from .errors import AggregationError, CalibrationError, UndefinedMetricError

CI_LEVEL = 0.95
ROC_GRID = np.linspace(0.0, 1.0, 101)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


@dataclass
class ScanPrediction:
    study_id: str
    sequence_probs: dict[str, list[float]]
    view_probs: dict[str, float]
    ensemble: float
    label: int | None = None
    missing_views: tuple[str, ...] = ()

    @property
    def missing_view(self) -> bool:
        return bool(self.missing_views)

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate_scan(
    seq_probs: Mapping[str, Sequence[float]],
    study_id: str = "",
    label: int | None = None,
    expected_views: Sequence[str] = VIEWS,
) -> ScanPrediction:
    """Mean over sequences within a view, then an unweighted mean over views.

    Views absent from ``seq_probs`` are skipped and reported in ``missing_views``.
    """
    present = {v: [float(p) for p in ps] for v, ps in seq_probs.items() if len(ps) > 0}
    if not present:
        raise AggregationError(f"study {study_id!r}: no view probabilities to aggregate")
    for ps in present.values():
        if any(not 0.0 <= p <= 1.0 for p in ps):
            raise AggregationError(f"study {study_id!r}: probabilities must lie in [0, 1]")
    view_probs = {v: float(np.mean(ps)) for v, ps in present.items()}
    missing = tuple(v for v in expected_views if v not in present)
    if missing:
        warnings.warn(f"study {study_id!r}: ensemble over {sorted(present)} only; missing {list(missing)}", stacklevel=2)
    return ScanPrediction(study_id, present, view_probs, float(np.mean(list(view_probs.values()))), label, missing)


# ---------------------------------------------------------------------------
# confusion metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fn: int
    tn: int
    fp: int

    @property
    def n(self) -> int:
        return self.tp + self.fn + self.tn + self.fp

    @property
    def accuracy(self) -> Fraction:
        return Fraction(self.tp + self.tn, self.n)

    @property
    def sensitivity(self) -> Fraction | None:
        return Fraction(self.tp, self.tp + self.fn) if self.tp + self.fn else None

    @property
    def specificity(self) -> Fraction | None:
        return Fraction(self.tn, self.tn + self.fp) if self.tn + self.fp else None

    def rates(self) -> dict[str, float | None]:
        def f(x):
            return None if x is None else float(x)

        return {"accuracy": f(self.accuracy), "sensitivity": f(self.sensitivity), "specificity": f(self.specificity)}


def confusion_metrics(probs: Sequence[float], labels: Sequence[int], threshold: float) -> ConfusionCounts:
    """Counts with the rule: predicted positive iff prob > threshold."""
    p = np.asarray(probs, dtype=float)
    y = np.asarray(labels, dtype=int)
    if p.size < 1 or p.shape != y.shape:
        raise ValueError("need at least one prediction and matching labels")
    pred = p > threshold
    return ConfusionCounts(
        tp=int(np.sum(pred & (y == 1))),
        fn=int(np.sum(~pred & (y == 1))),
        tn=int(np.sum(~pred & (y == 0))),
        fp=int(np.sum(pred & (y == 0))),
    )


def percent(x: Fraction | float | None, digits: int = 2) -> str:
    return "-" if x is None else f"{float(x) * 100:.{digits}f}%"


# ---------------------------------------------------------------------------
# ROC
# ---------------------------------------------------------------------------


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1D and equally long")
    npos = int(np.sum(y == 1))
    nneg = int(np.sum(y == 0))
    if npos + nneg != y.size:
        raise ValueError("labels must be 0 or 1")
    if npos == 0 or nneg == 0:
        raise UndefinedMetricError("ROC AUC needs both classes")
    return s, y, npos, nneg


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ROC points from a threshold sweep, one point per distinct score (descending)."""
    s, y, npos, nneg = _check_binary(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    tpr = np.r_[0.0, tps / npos]
    fpr = np.r_[0.0, fps / nneg]
    thr = np.r_[np.inf, s[last]]
    return fpr, tpr, thr


def roc_auc(scores, labels) -> float:
    """Trapezoidal area under the swept ROC curve.

    Integer counts keep the area exact until the final division; it equals the
    pairwise (Mann-Whitney) statistic with ties counted one half.
    """
    s, y, npos, nneg = _check_binary(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.r_[0, np.cumsum(y)[last]].astype(np.int64)
    fps = np.r_[0, (last + 1)].astype(np.int64) - tps
    # twice the area in units of 1/(npos*nneg)
    area2 = int(np.sum(np.diff(fps) * (tps[1:] + tps[:-1])))
    return area2 / (2 * npos * nneg)


# ---------------------------------------------------------------------------
# threshold calibration
# ---------------------------------------------------------------------------


def threshold_candidates(scores) -> np.ndarray:
    u = np.unique(np.asarray(scores, dtype=float))
    return (u[:-1] + u[1:]) / 2.0


def calibrate_threshold(val_preds: Sequence[tuple[float, int]]) -> float:
    """Midpoint threshold where sensitivity and specificity are closest.

    Ties prefer higher sensitivity, then the lower threshold.
    """
    if len(val_preds) == 0:
        raise CalibrationError("no validation predictions")
    s = np.array([p for p, _ in val_preds], dtype=float)
    y = np.array([int(l) for _, l in val_preds])
    npos, nneg = int((y == 1).sum()), int((y == 0).sum())
    if npos == 0 or nneg == 0:
        raise CalibrationError("threshold calibration needs both classes")
    cands = threshold_candidates(s)
    if cands.size == 0:
        raise CalibrationError("all validation scores are identical")
    best = None
    for t in cands:
        c = confusion_metrics(s, y, t)
        gap = abs(c.sensitivity - c.specificity)
        rank = (gap, -c.sensitivity, t)
        if best is None or rank < best[0]:
            best = (rank, float(t))
    return best[1]


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------


@dataclass
class BootstrapResult:
    iterations: int
    seed: int
    level: float
    point: dict[str, float]
    ci: dict[str, tuple[float, float]]
    redraws: int = 0
    roc_fpr: list[float] = field(default_factory=list)
    roc_tpr_low: list[float] = field(default_factory=list)
    roc_tpr_high: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ci"] = {k: list(v) for k, v in self.ci.items()}
        return d


def _metrics_at(s, y, threshold) -> dict[str, float]:
    c = confusion_metrics(s, y, threshold)
    return {
        "auc": roc_auc(s, y),
        "accuracy": float(c.accuracy),
        "sensitivity": float(c.sensitivity),
        "specificity": float(c.specificity),
    }


def _interp_tpr(s, y) -> np.ndarray:
    fpr, tpr, _ = roc_curve(s, y)
    return np.interp(ROC_GRID, fpr, tpr)


def bootstrap_ci(
    preds: Sequence[float],
    labels: Sequence[int],
    threshold: float = 0.5,
    iterations: int = 1000,
    seed: int = 0,
    workers: int = 1,
    level: float = CI_LEVEL,
) -> BootstrapResult:
    """Percentile bootstrap over scans, resampling each class separately.

    Iteration ``i`` draws from its own generator seeded by ``(seed, i)``, so
    the result is independent of ``workers``.
    """
    s, y, npos, nneg = _check_binary(preds, labels)
    if s.size < 2:
        raise ValueError("bootstrap needs at least two scans")
    pos_idx = np.flatnonzero(y == 1)
    neg_idx = np.flatnonzero(y == 0)

    def one(i):
        rng = np.random.default_rng([seed, i])
        redraws = 0
        while True:
            idx = np.r_[rng.choice(pos_idx, npos), rng.choice(neg_idx, nneg)]
            ys = y[idx]
            if ys.min() != ys.max():
                break
            redraws += 1  # unreachable with per-class resampling; kept as a guard
        return _metrics_at(s[idx], ys, threshold), _interp_tpr(s[idx], ys), redraws

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(one, range(iterations)))
    else:
        results = [one(i) for i in range(iterations)]

    lo_q, hi_q = 100 * (1 - level) / 2, 100 * (1 + level) / 2
    point = _metrics_at(s, y, threshold)
    ci = {}
    for name in point:
        vals = np.array([r[0][name] for r in results])
        ci[name] = (float(np.percentile(vals, lo_q)), float(np.percentile(vals, hi_q)))
    curves = np.stack([r[1] for r in results])
    return BootstrapResult(
        iterations=iterations,
        seed=seed,
        level=level,
        point=point,
        ci=ci,
        redraws=sum(r[2] for r in results),
        roc_fpr=ROC_GRID.tolist(),
        roc_tpr_low=np.percentile(curves, lo_q, axis=0).tolist(),
        roc_tpr_high=np.percentile(curves, hi_q, axis=0).tolist(),
    )


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class EvaluationReport:
    dataset: str
    threshold: float
    counts: ConfusionCounts
    auc: float
    bootstrap: BootstrapResult | None = None
    n: int = 0

    @property
    def accuracy(self) -> Fraction:
        return self.counts.accuracy

    @property
    def sensitivity(self) -> Fraction | None:
        return self.counts.sensitivity

    @property
    def specificity(self) -> Fraction | None:
        return self.counts.specificity

    def to_dict(self) -> dict:
        c = self.counts

        def frac(x):
            return None if x is None else f"{x.numerator}/{x.denominator}"

        return {
            "dataset": self.dataset,
            "threshold": self.threshold,
            "n": self.n,
            "counts": {"tp": c.tp, "fn": c.fn, "tn": c.tn, "fp": c.fp},
            "accuracy": float(c.accuracy),
            "accuracy_fraction": frac(c.accuracy),
            "sensitivity": None if c.sensitivity is None else float(c.sensitivity),
            "sensitivity_fraction": frac(c.sensitivity),
            "specificity": None if c.specificity is None else float(c.specificity),
            "specificity_fraction": frac(c.specificity),
            "auc": self.auc,
            "bootstrap": None if self.bootstrap is None else self.bootstrap.to_dict(),
        }


def evaluate_predictions(
    probs: Sequence[float],
    labels: Sequence[int],
    threshold: float,
    dataset: str = "test",
    iterations: int = 1000,
    seed: int = 0,
    workers: int = 1,
) -> EvaluationReport:
    counts = confusion_metrics(probs, labels, threshold)
    try:
        auc = roc_auc(probs, labels)
        boot = bootstrap_ci(probs, labels, threshold, iterations, seed, workers) if iterations > 0 else None
    except UndefinedMetricError:
        auc, boot = float("nan"), None
    return EvaluationReport(dataset, float(threshold), counts, auc, boot, len(labels))


def write_roc_csv(scores, labels, path: str | Path) -> Path:
    fpr, tpr, thr = roc_curve(scores, labels)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, r in zip(thr, fpr, tpr):
            w.writerow([repr(float(t)), repr(float(f)), repr(float(r))])
    return path


def plot_roc(curves: Mapping[str, tuple[Sequence[float], Sequence[int]]], path: str | Path, bootstrap: BootstrapResult | None = None) -> Path:
    """ROC curves for single views and the ensemble, optional CI band, chance diagonal."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    for name, (s, y) in curves.items():
        fpr, tpr, _ = roc_curve(s, y)
        ax.plot(fpr, tpr, label=f"{name} (AUC {roc_auc(s, y):.3f})")
    if bootstrap is not None:
        ax.fill_between(bootstrap.roc_fpr, bootstrap.roc_tpr_low, bootstrap.roc_tpr_high, alpha=0.2, label="95% CI")
    ax.plot([0, 1], [0, 1], "k--", lw=1)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.legend(loc="lower right", fontsize=8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# rater agreement
# ---------------------------------------------------------------------------


def fleiss_kappa(m) -> float:
    """Fleiss' kappa for a subjects x categories count matrix, in exact arithmetic."""
    rows = [[int(x) for x in row] for row in m]
    if len(rows) < 2:
        raise ValueError("need at least two subjects")
    n = sum(rows[0])
    if n < 2:
        raise ValueError("need at least two raters per subject")
    if any(sum(r) != n for r in rows):
        raise ValueError("every subject must be rated by the same number of raters")
    N = len(rows)
    k = len(rows[0])
    p_j = [Fraction(sum(r[j] for r in rows), N * n) for j in range(k)]
    P_i = [Fraction(sum(x * x for x in r) - n, n * (n - 1)) for r in rows]
    P_bar = sum(P_i) / N
    P_e = sum(p * p for p in p_j)
    if P_e == 1:
        raise UndefinedMetricError("kappa undefined: every rating falls in one category")
    return float((P_bar - P_e) / (1 - P_e))


def dump_json(obj, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))
    return path
