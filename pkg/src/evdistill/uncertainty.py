"""Per-sample uncertainty scores for students and teachers."""

import csv
import io
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from evdistill import dirichlet
from evdistill.entropy import UncertaintyBreakdown, as_prob_vector, categorical_entropy
from evdistill.nn import atomic_write_text
from evdistill.teacher import TeacherEnsemble, TeacherPredictionSet, ensemble_entropy_decomposition, predictive_mean

__all__ = [
    "UncertaintyBreakdown",
    "BatchScores",
    "batch_scores",
    "predict_with_uncertainty",
    "score_ensemble",
    "score_evidential",
    "score_softmax",
]


def score_softmax(p) -> UncertaintyBreakdown:
    """Shannon entropy only; a categorical output has no epistemic part."""
    total = categorical_entropy(as_prob_vector(p))
    return UncertaintyBreakdown(total)


def score_evidential(d) -> UncertaintyBreakdown:
    return dirichlet.entropy_decomposition(d)


def score_ensemble(s: TeacherPredictionSet) -> UncertaintyBreakdown:
    ub = ensemble_entropy_decomposition(s)
    return ub[0] if len(s) == 1 else ub


def predict_with_uncertainty(model, X) -> Tuple[np.ndarray, UncertaintyBreakdown]:
    """Mean class probabilities and uncertainty for a batch, one pass per model."""
    if isinstance(model, TeacherEnsemble):
        s = model.predict_members(X)
        return predictive_mean(s), ensemble_entropy_decomposition(s)
    if getattr(model, "head", None) == "evidential":
        d = model.dirichlet(X)
        return dirichlet.mean(d), dirichlet.entropy_decomposition(d)
    p = model.predict_proba(X)
    return p, UncertaintyBreakdown(np.asarray(categorical_entropy(p)))


@dataclass
class BatchScores:
    ids: List[str]
    pred: np.ndarray
    true: Optional[np.ndarray]
    total: np.ndarray
    aleatoric: Optional[np.ndarray]
    epistemic: Optional[np.ndarray]
    probs: np.ndarray
    errors: List[Tuple[str, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    def breakdown(self) -> UncertaintyBreakdown:
        return UncertaintyBreakdown(self.total, self.aleatoric, self.epistemic)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "pred_class", "true_class", "total", "aleatoric", "epistemic"])

        def cell(arr, i):
            return "" if arr is None else repr(float(arr[i]))

        for i, sid in enumerate(self.ids):
            true = "" if self.true is None else str(int(self.true[i]))
            w.writerow([sid, int(self.pred[i]), true, cell(self.total, i), cell(self.aleatoric, i), cell(self.epistemic, i)])
        return buf.getvalue()

    def write_csv(self, path):
        return atomic_write_text(path, self.to_csv())


def batch_scores(model, samples) -> BatchScores:
    """Score a ``Dataset`` or a sequence of ``(sample_id, x)`` pairs.

    Output is sorted by sample id. Inputs whose width does not match the model
    become entries in ``errors`` rather than aborting the batch.
    """
    if hasattr(samples, "X"):
        ids, xs = list(samples.ids), list(samples.X)
        labels = samples.y
    else:
        pairs = list(samples)
        ids = [str(sid) for sid, _ in pairs]
        xs = [np.asarray(x, dtype=np.float64) for _, x in pairs]
        labels = None
    in_dim = _input_dim(model)
    ok = [i for i, x in enumerate(xs) if np.ndim(x) == 1 and len(x) == in_dim]
    errors = [(ids[i], f"expected {in_dim} features, got {np.shape(xs[i])}") for i in range(len(xs)) if i not in set(ok)]
    ok.sort(key=lambda i: ids[i])
    k = _n_classes(model)
    if ok:
        X = np.stack([xs[i] for i in ok])
        probs, ub = predict_with_uncertainty(model, X)
    else:
        probs, ub = np.zeros((0, k)), UncertaintyBreakdown(np.zeros(0), None, None)
        if isinstance(model, TeacherEnsemble) or getattr(model, "head", None) == "evidential":
            ub = UncertaintyBreakdown(np.zeros(0), np.zeros(0), np.zeros(0))
    return BatchScores(
        ids=[ids[i] for i in ok],
        pred=np.argmax(probs, axis=1) if len(ok) else np.zeros(0, dtype=np.int64),
        true=None if labels is None else np.asarray(labels)[ok],
        total=np.asarray(ub.total),
        aleatoric=None if ub.aleatoric is None else np.asarray(ub.aleatoric),
        epistemic=None if ub.epistemic is None else np.asarray(ub.epistemic),
        probs=probs,
        errors=errors,
    )


def _input_dim(model) -> int:
    if isinstance(model, TeacherEnsemble):
        return model.members[0].in_dim
    return model.transform.shape[1]


def _n_classes(model) -> int:
    if isinstance(model, TeacherEnsemble):
        return model.n_classes
    return model.net.out_dim
