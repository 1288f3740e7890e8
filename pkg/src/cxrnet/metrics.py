"""ROC AUC, fold aggregation, Spearman model similarity, Youden operating points, MAE."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from cxrnet.data.schema import LABELS, NO_FINDING, PATHOLOGIES
from cxrnet.errors import MetricError


def _binary_pair(scores, truths) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    t = np.asarray(truths).ravel()
    if s.shape != t.shape:
        raise MetricError(f"scores ({s.size}) and truths ({t.size}) differ in length")
    if not np.all((t == 0) | (t == 1)):
        raise MetricError("truths must be 0/1")
    if np.isnan(s).any():
        raise MetricError("scores contain NaN")
    t = t.astype(bool)
    if t.all() or not t.any():
        raise MetricError("AUC is undefined when only one class is present")
    return s, t


def roc_auc(scores, truths) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 * P(tie)."""
    s, t = _binary_pair(scores, truths)
    ranks = rankdata(s)
    n_pos = int(t.sum())
    n_neg = t.size - n_pos
    u = ranks[t].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc_or_none(scores, truths) -> float | None:
    try:
        return roc_auc(scores, truths)
    except MetricError:
        return None


def label_aucs(scores: np.ndarray, truths: np.ndarray, labels=LABELS) -> dict[str, float | None]:
    """Per-label AUC for ``[N, L]`` arrays; single-class labels map to None."""
    scores = np.asarray(scores)
    truths = np.asarray(truths)
    return {name: roc_auc_or_none(scores[:, i], truths[:, i]) for i, name in enumerate(labels)}


# ---------------------------------------------------------------- fold aggregation


@dataclass
class EvalRow:
    """AUC per label for one fold (None = undefined in that fold)."""

    fold: int
    aucs: dict[str, float | None]


@dataclass
class LabelSummary:
    mean: float
    std: float
    n_folds: int
    n_missing: int


@dataclass
class EvalReport:
    rows: dict[str, LabelSummary]
    average: LabelSummary
    n_folds: int
    pathologies: tuple[str, ...] = PATHOLOGIES
    extra_rows: tuple[str, ...] = field(default_factory=tuple)

    def summary(self, name: str) -> LabelSummary:
        return self.average if name == "Average" else self.rows[name]


def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return math.nan, math.nan
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def aggregate_folds(rows: list[EvalRow], pathologies=PATHOLOGIES, extra=(NO_FINDING,)) -> EvalReport:
    """Per-label mean and sample std over folds, plus an Average row.

    Missing (None) entries are excluded and counted. The Average row is the
    mean over pathologies of their fold means, with the mean of their stds;
    labels in ``extra`` get their own rows but stay out of the average.
    """
    if len(rows) < 2:
        raise MetricError(f"aggregation needs at least 2 folds, got {len(rows)}")
    names = tuple(pathologies) + tuple(extra)
    keys = set(rows[0].aucs)
    for r in rows[1:]:
        if set(r.aucs) != keys:
            raise MetricError(f"fold {r.fold} reports labels {sorted(set(r.aucs) ^ keys)} inconsistently")
    out = {}
    for name in names:
        if name not in keys:
            raise MetricError(f"label {name!r} missing from fold results")
        vals = [r.aucs[name] for r in rows if r.aucs[name] is not None]
        mean, std = _mean_std(vals)
        out[name] = LabelSummary(mean, std, len(vals), len(rows) - len(vals))
    present = [out[n] for n in pathologies if out[n].n_folds > 0]
    if not present:
        raise MetricError("no pathology has a defined AUC in any fold")
    avg = LabelSummary(
        float(np.mean([s.mean for s in present])),
        float(np.mean([s.std for s in present])),
        len(rows),
        sum(s.n_missing for s in out.values() if s in present),
    )
    return EvalReport(out, avg, len(rows), tuple(pathologies), tuple(extra))


# ---------------------------------------------------------------- Spearman


def spearman(a, b) -> float:
    """Pearson correlation of average ranks."""
    ra = rankdata(np.asarray(a, dtype=np.float64).ravel())
    rb = rankdata(np.asarray(b, dtype=np.float64).ravel())
    if ra.size != rb.size:
        raise MetricError(f"cannot correlate {ra.size} against {rb.size} values")
    if ra.size < 2:
        raise MetricError("rank correlation needs at least 2 values")
    da, db = ra - ra.mean(), rb - rb.mean()
    denom = math.sqrt(float(da @ da) * float(db @ db))
    if denom == 0:
        raise MetricError("rank correlation is undefined for constant scores")
    return float(da @ db / denom)


def spearman_matrix(folds: list[list[np.ndarray]], mode: str = "flatten",
                    ids: list[list] | None = None) -> np.ndarray:
    """K x K rank-correlation matrix averaged over folds.

    ``folds[f][k]`` holds model k's ``[N_f, L]`` scores on fold f. ``mode``
    ``"flatten"`` correlates all (example, label) pairs at once;
    ``"per_label"`` correlates each label column and averages. When ``ids``
    are given (``ids[f][k]`` = example ids), they must agree across models.
    """
    if mode not in ("flatten", "per_label"):
        raise MetricError(f"unknown Spearman mode {mode!r}")
    if not folds:
        raise MetricError("no folds given")
    k = len(folds[0])
    acc = np.zeros((k, k))
    for f, models in enumerate(folds):
        if len(models) != k:
            raise MetricError(f"fold {f} has {len(models)} models, expected {k}")
        arrs = [np.asarray(m, dtype=np.float64) for m in models]
        for i, a in enumerate(arrs):
            if a.shape != arrs[0].shape:
                raise MetricError(f"fold {f}: model {i} scored {a.shape}, model 0 scored {arrs[0].shape}")
            if ids is not None and list(ids[f][i]) != list(ids[f][0]):
                raise MetricError(f"fold {f}: model {i} scored a different example set than model 0")
        m = np.eye(k)
        for i in range(k):
            for j in range(i + 1, k):
                if mode == "flatten":
                    rho = spearman(arrs[i], arrs[j])
                else:
                    a2, b2 = arrs[i].reshape(len(arrs[i]), -1), arrs[j].reshape(len(arrs[j]), -1)
                    rho = float(np.mean([spearman(a2[:, c], b2[:, c]) for c in range(a2.shape[1])]))
                m[i, j] = m[j, i] = rho
        acc += m
    return acc / len(folds)


# ---------------------------------------------------------------- operating point


@dataclass(frozen=True)
class OperatingPoint:
    threshold: float
    sensitivity: float
    specificity: float

    @property
    def youden(self) -> float:
        return self.sensitivity + self.specificity - 1.0


def confusion_at(scores, truths, threshold: float) -> tuple[int, int, int, int]:
    """``(tp, fn, tn, fp)`` predicting positive when ``score >= threshold``."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    t = np.asarray(truths).ravel().astype(bool)
    pred = s >= threshold
    return int((pred & t).sum()), int((~pred & t).sum()), int((~pred & ~t).sum()), int((pred & ~t).sum())


def youden_operating_point(scores, truths) -> OperatingPoint:
    """Threshold maximizing sens + spec - 1 among the observed scores and +inf.

    Ties in J go to the lowest threshold.
    """
    s, t = _binary_pair(scores, truths)
    order = np.argsort(-s, kind="stable")
    s_sorted, t_sorted = s[order], t[order]
    n_pos, n_neg = int(t.sum()), int((~t).sum())
    # candidate k: threshold = k-th distinct score from the top; positives = all scores >= it
    distinct_end = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tp = np.cumsum(t_sorted)[distinct_end]
    fp = np.cumsum(~t_sorted)[distinct_end]
    thresholds = np.r_[np.inf, s_sorted[distinct_end]]
    tp = np.r_[0, tp]
    fp = np.r_[0, fp]
    # J scaled by n_pos * n_neg stays an integer, so ties are exact
    j = tp * n_neg + (n_neg - fp) * n_pos - n_pos * n_neg
    best = np.flatnonzero(j == j.max())
    k = best[np.argmin(thresholds[best])]
    return OperatingPoint(float(thresholds[k]), float(tp[k] / n_pos), float((n_neg - fp[k]) / n_neg))


# ---------------------------------------------------------------- regression


@dataclass(frozen=True)
class MAE:
    mean: float
    std: float

    def __float__(self) -> float:
        return self.mean


def mae(predictions, truths) -> MAE:
    """Mean absolute error with the (population) std of the absolute errors."""
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(truths, dtype=np.float64).ravel()
    if p.size != t.size:
        raise MetricError(f"predictions ({p.size}) and truths ({t.size}) differ in length")
    if p.size == 0:
        raise MetricError("MAE of no values")
    err = np.abs(p - t)
    return MAE(float(err.mean()), float(err.std()))
