"""Accuracy, calibration, likelihood and OOD-separation metrics."""

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import List

import numpy as np

from evdistill.entropy import EPS
from evdistill.errors import DataError, ShapeError
from evdistill.nn import atomic_write_text


def _labels(labels, n):
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (n,):
        raise ShapeError(f"{y.shape[0] if y.ndim else 0} labels for {n} predictions")
    return y


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    if preds.size == 0:
        raise ValueError("accuracy needs at least one prediction")
    y = _labels(labels, preds.shape[0])
    return float(np.mean(preds == y))


def nll(probs, labels, eps: float = EPS) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    y = _labels(labels, probs.shape[0])
    return float(-np.mean(np.log(np.maximum(probs[np.arange(y.size), y], eps))))


def brier(probs, labels) -> float:
    """Squared error against one-hot labels, averaged over samples and classes."""
    probs = np.asarray(probs, dtype=np.float64)
    y = _labels(labels, probs.shape[0])
    onehot = np.eye(probs.shape[1])[y]
    return float(np.mean((probs - onehot) ** 2))


def reliability_bins(probs, labels, n_bins: int = 10) -> List[dict]:
    """Equal-width confidence bins ``(lower, upper]``; confidence 0 joins the first bin."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    probs = np.asarray(probs, dtype=np.float64)
    y = _labels(labels, probs.shape[0])
    conf = probs.max(axis=1)
    correct = probs.argmax(axis=1) == y
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    which = _bin_index(conf, n_bins)
    bins = []
    for b in range(n_bins):
        mask = which == b
        cnt = int(mask.sum())
        bins.append(
            {
                "lower": float(edges[b]),
                "upper": float(edges[b + 1]),
                "count": cnt,
                "mean_confidence": float(conf[mask].mean()) if cnt else 0.0,
                "accuracy": float(correct[mask].mean()) if cnt else 0.0,
            }
        )
    return bins


def ece(probs, labels, n_bins: int = 10) -> float:
    """sum_b |B_b|/M * |acc(B_b) - conf(B_b)|, evaluated as sum_b |hits_b - sum conf_b| / M.

    The two forms are equal; the second skips the per-bin divisions, so hand
    examples such as 0.15 and 0.05 come out exactly.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    probs = np.asarray(probs, dtype=np.float64)
    y = _labels(labels, probs.shape[0])
    if y.size == 0:
        return 0.0
    conf = probs.max(axis=1)
    hits = (probs.argmax(axis=1) == y).astype(np.float64)
    which = _bin_index(conf, n_bins)
    gap = sum(abs(hits[which == b].sum() - conf[which == b].sum()) for b in range(n_bins))
    return float(gap / y.size)


def _bin_index(conf: np.ndarray, n_bins: int) -> np.ndarray:
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    return np.minimum(np.searchsorted(edges[1:], conf, side="left"), n_bins - 1)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their mean rank."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    _, first, counts = np.unique(xs, return_index=True, return_counts=True)
    avg = first + (counts + 1) / 2.0
    ranks = np.empty(x.size)
    ranks[order] = np.repeat(avg, counts)
    return ranks


def auroc(scores_negative, scores_positive) -> float:
    """P(positive score > negative score) with ties counted 1/2.

    Rank-sum (Mann-Whitney U) form, O(n log n).
    """
    neg = np.asarray(scores_negative, dtype=np.float64).ravel()
    pos = np.asarray(scores_positive, dtype=np.float64).ravel()
    if neg.size == 0 or pos.size == 0:
        raise ValueError("AUROC needs at least one score on each side")
    ranks = _average_ranks(np.concatenate([neg, pos]))
    u = ranks[neg.size :].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def wasserstein1(a, b) -> float:
    """Earth mover's distance between two 1-D empirical distributions."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("wasserstein1 needs nonempty samples")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    # integrate |F_a - F_b| between consecutive support points
    allv = np.sort(np.concatenate([a, b]))
    widths = np.diff(allv)
    fa = np.searchsorted(a, allv[:-1], side="right") / a.size
    fb = np.searchsorted(b, allv[:-1], side="right") / b.size
    return float(np.sum(np.abs(fa - fb) * widths))


@dataclass
class EvalReport:
    accuracy: float
    ece: float
    nll: float
    brier: float
    n_samples: int
    bins: List[dict] = field(default_factory=list)
    failures: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_probs(probs, labels, n_bins: int = 10) -> EvalReport:
    probs = np.asarray(probs, dtype=np.float64)
    y = _labels(labels, probs.shape[0])
    if y.size == 0:
        raise DataError("cannot evaluate on an empty dataset")
    bins = reliability_bins(probs, y, n_bins)
    m = y.size
    return EvalReport(
        accuracy=accuracy(probs.argmax(axis=1), y),
        ece=ece(probs, y, n_bins),
        nll=nll(probs, y),
        brier=brier(probs, y),
        n_samples=int(m),
        bins=bins,
    )


def evaluate(model, dataset, n_bins: int = 10):
    """One forward pass per sample; returns ``(EvalReport, probs)``."""
    if not dataset.labelled:
        raise DataError(f"dataset {dataset.name!r} has no labels")
    probs = np.asarray(model.predict_proba(dataset.X), dtype=np.float64)
    finite = np.all(np.isfinite(probs), axis=1)
    report = evaluate_probs(probs[finite], dataset.y[finite], n_bins)
    report.failures = int((~finite).sum())
    return report, probs


def prediction_dump(ids, labels, probs) -> str:
    probs = np.asarray(probs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "label"] + [f"p_{c}" for c in range(probs.shape[1])])
    for i, sid in enumerate(ids):
        lab = "" if labels is None else str(int(labels[i]))
        w.writerow([sid, lab] + [repr(float(v)) for v in probs[i]])
    return buf.getvalue()


def write_prediction_dump(path, ids, labels, probs):
    return atomic_write_text(path, prediction_dump(ids, labels, probs))


def read_prediction_dump(path):
    """Inverse of ``write_prediction_dump``: ``(ids, labels, probs)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    ids = [r[0] for r in body]
    labels = np.array([int(r[1]) for r in body], dtype=np.int64)
    probs = np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64)
    return ids, labels, probs
