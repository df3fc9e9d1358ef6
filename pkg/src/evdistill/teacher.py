"""Weighted-hypothesis teacher: members, BayesPE weights, prediction cache.

At desk scale each ensemble member ("prompt") is a small network trained on
the task with its own seed and input feature transform.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from evdistill.entropy import EPS, UncertaintyBreakdown, categorical_entropy
from evdistill.errors import DataError, EvDistillError, NumericError, ShapeError
from evdistill.special import row_max, row_sum
from evdistill.nn import Adam, Network, atomic_write_text, read_json, write_json

log = logging.getLogger(__name__)

CACHE_FORMAT = "evdistill-teacher-cache"
BUNDLE_FORMAT = "evdistill-teacher"
FORMAT_VERSION = 1


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 0:
        raise ShapeError("softmax needs at least one axis")
    e = z - row_max(z)
    np.exp(e, out=e)
    e /= row_sum(e)
    return e


def log_softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    s = z - z.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


@dataclass
class Member:
    """A network behind a fixed linear input transform ``x -> x @ transform.T``."""

    net: Network
    transform: np.ndarray
    meta: str = ""

    def __post_init__(self):
        self.transform = np.asarray(self.transform, dtype=np.float64)

    @property
    def in_dim(self) -> int:
        return self.transform.shape[1]

    def features(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.in_dim:
            raise ShapeError(f"member expects {self.in_dim} features, got {X.shape[-1]}")
        return X @ self.transform.T

    def logits(self, X) -> np.ndarray:
        return self.net.forward(self.features(X))

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.logits(X))

    def to_dict(self) -> dict:
        return {"network": self.net.to_dict(), "transform": self.transform.tolist(), "meta": self.meta}

    @classmethod
    def from_dict(cls, d) -> "Member":
        return cls(Network.from_dict(d["network"]), d["transform"], d.get("meta", ""))


def random_transform(dim: int, rng, rotate: bool = True, drop: float = 0.0) -> Tuple[np.ndarray, str]:
    """Random orthogonal rotation composed with feature dropout."""
    T = np.eye(dim)
    desc = []
    if rotate:
        q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
        T = q * np.sign(np.diag(r))
        desc.append("rot")
    if drop > 0:
        keep = rng.random(dim) >= drop
        keep[rng.integers(dim)] = True
        T = T * keep[None, :]
        desc.append(f"drop={int((~keep).sum())}/{dim}")
    return T, "+".join(desc) or "identity"


def train_member(
    X,
    y,
    n_classes: int,
    seed: int,
    hidden: Sequence[int] = (32, 32),
    activation: str = "tanh",
    rotate: bool = True,
    drop: float = 0.0,
    epochs: int = 30,
    batch_size: int = 32,
    lr: float = 1e-2,
    weight_decay: float = 1e-3,
) -> Member:
    """Fit one member with cross-entropy on hard labels (full-parameter Adam)."""
    rng = np.random.default_rng(seed)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    T, desc = random_transform(X.shape[1], rng, rotate, drop)
    net = Network.mlp([X.shape[1], *hidden, n_classes], rng, activation)
    feats = X @ T.T
    onehot = np.eye(n_classes)[y]
    opt = Adam(lr)
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), batch_size):
            idx = order[start : start + batch_size]
            p = softmax(net.forward(feats[idx]))
            grads = net.backward((p - onehot[idx]) / len(idx))
            if weight_decay:
                for name, param in net.parameters().items():
                    if name.endswith(".W"):
                        grads[name] = grads[name] + weight_decay * param
            opt.step(net, grads)
    return Member(net, T, f"seed={seed};{desc}")


@dataclass
class TeacherPredictionSet:
    """Per-member predictions: ``probs[i, n, c] = p(y=c | x_i, theta_n)``."""

    probs: np.ndarray
    weights: np.ndarray
    ids: Optional[Tuple[str, ...]] = None
    member_meta: Tuple[str, ...] = ()

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.probs.ndim == 2:
            self.probs = self.probs[None]
        if self.probs.ndim != 3 or self.probs.shape[1] != self.weights.shape[0]:
            raise ShapeError(f"probs shape {self.probs.shape} does not match {self.weights.shape[0]} weights")
        if self.ids is not None:
            self.ids = tuple(self.ids)
            if len(self.ids) != self.probs.shape[0]:
                raise ShapeError("one id per input is required")
        self.member_meta = tuple(self.member_meta)
        self._index = None

    def __len__(self) -> int:
        return self.probs.shape[0]

    @property
    def n_members(self) -> int:
        return self.probs.shape[1]

    @property
    def n_classes(self) -> int:
        return self.probs.shape[2]

    def rows_for(self, ids: Sequence[str]) -> "TeacherPredictionSet":
        """Select inputs by stable sample id."""
        if self.ids is None:
            raise DataError("this prediction set is not keyed by sample id")
        if self._index is None:
            self._index = {sid: i for i, sid in enumerate(self.ids)}
        try:
            idx = [self._index[str(s)] for s in ids]
        except KeyError as exc:
            raise DataError(f"teacher cache has no row for sample id {exc.args[0]!r}") from None
        return TeacherPredictionSet(self.probs[idx], self.weights, tuple(str(s) for s in ids), self.member_meta)


def predictive_mean(s: TeacherPredictionSet) -> np.ndarray:
    """sum_n w_n p(y | x, theta_n), accumulated member by member.

    The fixed accumulation order makes the result identical whether it is
    computed for one input or a whole batch.
    """
    out = np.zeros((s.probs.shape[0], s.probs.shape[2]))
    for n, w in enumerate(s.weights):
        out += w * s.probs[:, n, :]
    return out


def ensemble_entropy_decomposition(s: TeacherPredictionSet) -> UncertaintyBreakdown:
    """Law-of-total-entropy split of the weighted ensemble, per input."""
    total = np.asarray(categorical_entropy(predictive_mean(s)))
    per_member = np.asarray(categorical_entropy(s.probs))  # (M, N)
    aleatoric = np.zeros(s.probs.shape[0])
    for n, w in enumerate(s.weights):
        aleatoric += w * per_member[:, n]
    return UncertaintyBreakdown(total, aleatoric, total - aleatoric)


# ------------------------------------------------------------------ BayesPE


def member_log_likelihoods(probs, y, eps: float = EPS) -> np.ndarray:
    """``ll[j, n] = log max(p(y_j | x_j, theta_n), eps)``."""
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if probs.ndim != 3 or probs.shape[0] != y.shape[0]:
        raise ShapeError("probs must be (M, N, K) with one label per input")
    if y.size and (y.min() < 0 or y.max() >= probs.shape[2]):
        raise DataError("labels out of range")
    picked = probs[np.arange(y.size), :, y]
    return np.log(np.maximum(picked, eps))


def bayespe_objective(weights, loglik, entropy_weight: Optional[float] = None) -> float:
    """sum_j (sum_n w_n ll[j, n] - sum_n w_n log w_n).

    The entropy term sits inside the sum over validation points, so by default
    it carries a factor M; ``entropy_weight`` overrides that factor.
    """
    w = np.asarray(weights, dtype=np.float64)
    loglik = np.asarray(loglik, dtype=np.float64)
    lam = loglik.shape[0] if entropy_weight is None else entropy_weight
    wlogw = np.where(w > 0, w * np.log(np.where(w > 0, w, 1.0)), 0.0)
    return float(np.sum(loglik @ w) - lam * np.sum(wlogw))


def fit_bayespe_weights(
    probs, y, entropy_weight: Optional[float] = None, n_check: int = 1000, seed: int = 0
) -> np.ndarray:
    """Maximise the BayesPE objective over the simplex.

    The objective is linear in w plus lambda times the entropy of w, so the
    maximiser is ``softmax(L / lambda)`` with ``L_n = sum_j ll[j, n]``. The
    result is checked against ``n_check`` random simplex points.
    """
    loglik = member_log_likelihoods(probs, y)
    if loglik.shape[0] == 0:
        raise DataError("BayesPE needs a nonempty validation set")
    lam = loglik.shape[0] if entropy_weight is None else float(entropy_weight)
    if not lam > 0:
        raise ValueError("entropy weight must be positive")
    L = loglik.sum(axis=0)
    w = softmax(L / lam)
    if n_check:
        rng = np.random.default_rng(seed)
        best = bayespe_objective(w, loglik, lam)
        rivals = rng.dirichlet(np.ones(w.size), size=n_check)
        scores = rivals @ L - lam * np.sum(rivals * np.log(rivals), axis=1)
        tol = 1e-9 * max(1.0, abs(best))
        if np.any(scores > best + tol):
            raise NumericError("closed-form BayesPE weights lost to a random simplex point")
    return w


# ---------------------------------------------------------------- ensemble


class TeacherEnsemble:
    """N members with simplex weights."""

    def __init__(self, members: List[Member], weights=None, member_meta: Optional[Sequence[str]] = None):
        if not members:
            raise ValueError("an ensemble needs at least one member")
        k = {m.net.out_dim for m in members}
        if len(k) != 1:
            raise ShapeError(f"members disagree on the number of classes: {sorted(k)}")
        self.members = list(members)
        n = len(members)
        w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
        self.set_weights(w)
        self.member_meta = tuple(member_meta) if member_meta is not None else tuple(m.meta for m in members)
        self.forward_passes = 0

    def set_weights(self, w) -> None:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (len(self.members),):
            raise ShapeError(f"need {len(self.members)} weights, got shape {w.shape}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("teacher weights must be nonnegative and sum to 1")
        self.weights = w

    @property
    def n_members(self) -> int:
        return len(self.members)

    @property
    def n_classes(self) -> int:
        return self.members[0].net.out_dim

    def best_member(self) -> int:
        """Index of the highest-weight member (lowest index on ties)."""
        return int(np.argmax(self.weights))

    def predict_members(self, X, ids=None, threads: int = 1) -> TeacherPredictionSet:
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X2 = X[None] if single else X

        def run(n):
            try:
                return self.members[n].predict_proba(X2)
            except EvDistillError as exc:
                raise type(exc)(f"teacher member {n}: {exc}") from exc
            except Exception as exc:
                raise EvDistillError(f"teacher member {n} failed: {exc}") from exc

        if threads > 1:
            # members are distinct networks, so activation caches never collide
            with ThreadPoolExecutor(threads) as pool:
                rows = list(pool.map(run, range(self.n_members)))
        else:
            rows = [run(n) for n in range(self.n_members)]
        self.forward_passes += self.n_members * X2.shape[0]
        probs = np.stack(rows, axis=1)
        return TeacherPredictionSet(probs, self.weights, ids, self.member_meta)

    def predict_proba(self, X) -> np.ndarray:
        return predictive_mean(self.predict_members(X))

    def fit_weights(self, X, y, entropy_weight: Optional[float] = None) -> np.ndarray:
        w = fit_bayespe_weights(self.predict_members(X).probs, y, entropy_weight)
        self.set_weights(w)
        return w

    def to_dict(self) -> dict:
        return {
            "format": BUNDLE_FORMAT,
            "version": FORMAT_VERSION,
            "weights": self.weights.tolist(),
            "member_meta": list(self.member_meta),
            "members": [m.to_dict() for m in self.members],
        }

    @classmethod
    def from_dict(cls, d) -> "TeacherEnsemble":
        if d.get("format") != BUNDLE_FORMAT or d.get("version") != FORMAT_VERSION:
            raise DataError(f"unsupported teacher bundle (format={d.get('format')}, version={d.get('version')})")
        return cls([Member.from_dict(m) for m in d["members"]], d["weights"], d["member_meta"])

    def save(self, path) -> Path:
        return write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "TeacherEnsemble":
        return cls.from_dict(read_json(path))


# ------------------------------------------------------------------- cache


def cache_predictions(teacher: TeacherEnsemble, dataset, path, threads: int = 1) -> Path:
    """Write per-member predictions for every sample as JSONL (atomically)."""
    s = teacher.predict_members(dataset.X, dataset.ids, threads=threads)
    return write_cache(s, path)


def write_cache(s: TeacherPredictionSet, path) -> Path:
    if s.ids is None:
        raise DataError("cannot cache predictions without sample ids")
    header = {
        "format": CACHE_FORMAT,
        "version": FORMAT_VERSION,
        "N": s.n_members,
        "K": s.n_classes,
        "weights": s.weights.tolist(),
        "member_meta": list(s.member_meta),
    }
    lines = [json.dumps(header, sort_keys=True)]
    for sid, rows in zip(s.ids, s.probs):
        lines.append(json.dumps({"sample_id": sid, "probs": rows.tolist()}))
    return atomic_write_text(path, "\n".join(lines) + "\n")


def load_cache(path) -> TeacherPredictionSet:
    path = Path(path)
    if not path.exists():
        raise DataError(f"teacher cache not found: {path}")
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty teacher cache")
    header = json.loads(lines[0])
    if header.get("format") != CACHE_FORMAT or header.get("version") != FORMAT_VERSION:
        raise DataError(
            f"{path}: unsupported cache (format={header.get('format')!r}, version={header.get('version')!r}); "
            f"expected {CACHE_FORMAT!r} version {FORMAT_VERSION}"
        )
    n, k = int(header["N"]), int(header["K"])
    ids, probs = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        rec = json.loads(line)
        p = np.asarray(rec["probs"], dtype=np.float64)
        if p.shape != (n, k):
            raise DataError(f"{path}: line {lineno} has probs of shape {p.shape}, header says ({n}, {k})")
        ids.append(str(rec["sample_id"]))
        probs.append(p)
    arr = np.stack(probs) if probs else np.zeros((0, n, k))
    return TeacherPredictionSet(arr, header["weights"], tuple(ids), tuple(header["member_meta"]))
