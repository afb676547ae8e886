"""Negative log-likelihood window scoring and detection metrics."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .data import WindowedDataset
from .divergence import TraceEstimator
from .odeint import SolverConfig, SolverError, log_density
from .vfmodel import GaussianPrior

log = logging.getLogger(__name__)


@dataclass
class ScoreResult:
    scores: np.ndarray
    nfe: int = 0
    failures: int = 0


def score_windows(field, prior: GaussianPrior, dataset: WindowedDataset | np.ndarray,
                  solver: SolverConfig, estimator: TraceEstimator, chunk: int = 4096,
                  seed: int = 0) -> ScoreResult:
    """Score each window by ``-log p1(window)`` under ``field`` and ``prior``.

    Chunks whose solve fails are retried row by row; rows that still fail get
    ``+inf`` so scores stay aligned with labels.
    """
    x = dataset.windows if isinstance(dataset, WindowedDataset) else np.asarray(dataset, dtype=np.float64)
    rng = np.random.default_rng(seed)
    scores = np.empty(x.shape[0])
    nfe = failures = 0
    for lo in range(0, x.shape[0], chunk):
        part = x[lo:lo + chunk]
        try:
            logp, used = log_density(field, prior, part, solver, estimator, rng)
            scores[lo:lo + len(part)] = -logp
            nfe += used
            continue
        except SolverError as err:
            log.warning("chunk at %d failed (%s); retrying per window", lo, err)
        for i in range(len(part)):
            try:
                logp, used = log_density(field, prior, part[i:i + 1], solver, estimator, rng)
                scores[lo + i] = -logp[0]
                nfe += used
            except SolverError:
                scores[lo + i] = np.inf
                failures += 1
    if failures:
        log.warning("%d windows failed to integrate and were scored +inf", failures)
    return ScoreResult(scores, nfe, failures)


def _check_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels).astype(np.int64).ravel()
    if labels.min() == labels.max():
        raise ValueError("degenerate labels: need at least one positive and one negative")
    return labels


def auc(scores, labels) -> float:
    """ROC area via the Mann-Whitney U statistic (ties count one half)."""
    labels = _check_labels(labels)
    ranks = rankdata(np.asarray(scores, dtype=np.float64))
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _prf(tp, pp, n_pos):
    precision = np.where(pp > 0, tp / np.maximum(pp, 1), 0.0)
    recall = tp / n_pos
    denom = precision + recall
    f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1.0), 0.0)
    return precision, recall, f1


def sweep_threshold(scores, labels) -> tuple[float, float, float, float]:
    """Best-F1 threshold over all distinct scores (predict anomaly when ``score >= threshold``).

    Returns ``(threshold, precision, recall, f1)``; F1 ties go to the higher precision.
    """
    labels = _check_labels(labels)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    tp = np.cumsum(labels[order])
    pp = np.arange(1, s.size + 1)
    # Only the last position of each run of equal scores is a valid cut.
    cut = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    precision, recall, f1 = _prf(tp[cut], pp[cut], labels.sum())
    best = np.lexsort((-precision, -f1))[0]
    return float(s[cut[best]]), float(precision[best]), float(recall[best]), float(f1[best])


def segments(labels) -> list[tuple[int, int]]:
    """Contiguous runs of positive labels as half-open ``(start, stop)`` pairs."""
    labels = np.asarray(labels).astype(np.int8).ravel()
    edges = np.diff(np.concatenate([[0], labels, [0]]))
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


def point_adjust(predictions, labels, segs=None) -> np.ndarray:
    """Flag a whole ground-truth segment when any of its points is flagged."""
    pred = np.asarray(predictions).astype(bool).copy()
    for a, b in segs if segs is not None else segments(labels):
        if pred[a:b].any():
            pred[a:b] = True
    return pred


def metrics_at(predictions, labels) -> tuple[float, float, float]:
    pred = np.asarray(predictions).astype(bool)
    labels = np.asarray(labels).astype(bool)
    tp = np.sum(pred & labels)
    p, r, f = _prf(np.array([tp]), np.array([pred.sum()]), labels.sum())
    return float(p[0]), float(r[0]), float(f[0])


@dataclass
class ScoreReport:
    scores: np.ndarray = field(repr=False)
    labels: np.ndarray | None = field(repr=False)
    threshold: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    auc: float | None = None
    point_adjust: bool = False
    solver_tag: str = ""
    nfe: int = 0
    failures: int = 0
    notice: str = ""

    def metrics(self) -> dict:
        out = asdict(self)
        del out["scores"], out["labels"]
        out["n_windows"] = int(len(self.scores))
        return out

    def write(self, directory, stem: str = "report") -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        scores_path = directory / f"{stem}_scores.csv"
        with scores_path.open("w") as fh:
            fh.write("index,score" + (",label\n" if self.labels is not None else "\n"))
            for i, s in enumerate(self.scores):
                row = f"{i},{float(s)!r}"
                if self.labels is not None:
                    row += f",{int(self.labels[i])}"
                fh.write(row + "\n")
        doc = {"metrics": self.metrics(), "scores_path": scores_path.name}
        path = directory / f"{stem}.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


def build_report(scores, labels=None, apply_point_adjust: bool = False, solver_tag: str = "",
                 nfe: int = 0, failures: int = 0) -> ScoreReport:
    """Best-F1 threshold, P/R/F1 at it (optionally point-adjusted) and AUC."""
    scores = np.asarray(scores, dtype=np.float64)
    report = ScoreReport(scores, None if labels is None else np.asarray(labels),
                         point_adjust=apply_point_adjust, solver_tag=solver_tag, nfe=nfe,
                         failures=failures)
    if labels is None:
        report.notice = "no labels supplied: scores only, metrics omitted"
        return report
    labels = _check_labels(labels)
    report.auc = auc(scores, labels)
    if apply_point_adjust:
        segs = segments(labels)
        best = (-1.0, 0.0, 0.0, 0.0)
        for thr in np.unique(scores):
            p, r, f = metrics_at(point_adjust(scores >= thr, labels, segs), labels)
            if (f, p) > (best[0], best[1]):
                best = (f, p, r, thr)
        report.f1, report.precision, report.recall, report.threshold = (float(v) for v in best)
    else:
        report.threshold, report.precision, report.recall, report.f1 = sweep_threshold(scores, labels)
    return report
