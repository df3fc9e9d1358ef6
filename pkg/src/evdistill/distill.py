"""Softmax and Dirichlet distillation losses and the student training loop."""

import csv
import io
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from evdistill import dirichlet
from evdistill.dirichlet import DirichletParams, link_from_logits, sigmoid
from evdistill.entropy import EPS
from evdistill.errors import ConfigError, NumericError
from evdistill.nn import Adam, DenseLayer, Network, restore_checkpoint, save_checkpoint, atomic_write_text, read_json, write_json
from evdistill.special import digamma, row_sum
from evdistill.teacher import TeacherEnsemble, TeacherPredictionSet, log_softmax, predictive_mean, softmax

log = logging.getLogger(__name__)

HEADS = ("softmax", "evidential")
STUDENT_FORMAT = "evdistill-student"
FORMAT_VERSION = 1


# ------------------------------------------------------------------ losses


def teacher_log_mean(s: TeacherPredictionSet, eps: float = EPS) -> np.ndarray:
    """``sum_n w_n log max(p_nc, eps)`` per input and class, shape (M, K)."""
    logp = np.log(np.maximum(s.probs, eps))
    out = np.zeros((s.probs.shape[0], s.probs.shape[2]))
    for n, w in enumerate(s.weights):
        out += w * logp[:, n, :]
    return out


def loss_softmax(student_probs, teacher_set: TeacherPredictionSet, eps: float = EPS) -> float:
    """Cross-entropy of the student against the teacher's weighted mean."""
    p = np.asarray(student_probs, dtype=np.float64)
    target = predictive_mean(teacher_set)
    vals = -np.sum(target * np.log(np.maximum(p, eps)), axis=-1)
    return float(np.mean(vals))


def loss_dirichlet(d, teacher_set: TeacherPredictionSet, eps: float = EPS) -> float:
    """Weighted negative Dirichlet log-likelihood of the member predictions."""
    d = d if isinstance(d, DirichletParams) else DirichletParams(d)
    alpha = np.atleast_2d(d.alpha)
    ell = teacher_log_mean(teacher_set, eps)
    vals = -(np.atleast_1d(dirichlet.log_normalizer(alpha)) + np.sum((alpha - 1.0) * ell, axis=-1))
    return float(np.mean(vals))


def softmax_loss_grad(z, target, eps: float = EPS):
    """Per-sample L_Soft and its gradient with respect to the logits.

    ``target`` is the teacher mean, shape (M, K). Terms whose probability sits
    below the floor are constant and contribute no gradient.
    """
    logp = log_softmax(z)
    floor = np.log(eps)
    active = logp > floor
    loss = -np.sum(target * np.where(active, logp, floor), axis=-1)
    tm = target * active
    grad = softmax(z) * tm.sum(axis=-1, keepdims=True) - tm
    return loss, grad


def dirichlet_loss_grad(z, log_targets):
    """Per-sample L_Dirichlet and its logit gradient.

    ``log_targets`` is ``teacher_log_mean`` for the batch. With
    ``alpha = 1 + softplus(z)``::

        dL/dalpha_c = psi(alpha_c) - psi(alpha_0) - log_targets_c
        dalpha_c/dz_c = sigmoid(z_c)
    """
    alpha = link_from_logits(z).alpha
    a0 = alpha.sum(axis=-1)
    loss = -(dirichlet.log_normalizer(alpha) + np.sum((alpha - 1.0) * log_targets, axis=-1))
    g_alpha = digamma(alpha) - digamma(a0)[:, None] - log_targets
    return loss, g_alpha * sigmoid(z)


def apply_fixed_alpha0(d, a0: float) -> DirichletParams:
    """Rescale concentrations to total ``a0`` while keeping the mean."""
    d = d if isinstance(d, DirichletParams) else DirichletParams(d)
    if not a0 > 0:
        raise ValueError("alpha0 must be positive")
    if a0 <= d.n_classes:
        warnings.warn(f"alpha0={a0} <= K={d.n_classes}: some concentrations may drop to <= 1", stacklevel=2)
    return DirichletParams(a0 * dirichlet.mean(d))


# ----------------------------------------------------------------- student


class StudentModel:
    """Backbone copied from a teacher member, LoRA adapters, and a head type."""

    def __init__(self, net: Network, transform, head: str, fixed_alpha0: Optional[float] = None, meta: str = ""):
        if head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {head!r}")
        if fixed_alpha0 is not None and head != "evidential":
            raise ConfigError("fixed_alpha0 is only meaningful for the evidential head")
        self.net = net
        self.transform = np.asarray(transform, dtype=np.float64)
        self.head = head
        self.fixed_alpha0 = fixed_alpha0
        self.meta = meta
        self.forward_passes = 0

    @classmethod
    def from_teacher(
        cls,
        teacher: TeacherEnsemble,
        head: str,
        rank: int = 4,
        seed: int = 0,
        member: Optional[int] = None,
        train_head: bool = True,
        fresh_head: bool = True,
    ) -> "StudentModel":
        """Copy the highest-weight member's backbone and attach LoRA everywhere.

        The classification layer is re-initialised unless ``fresh_head`` is
        False, so the untrained student has not seen any labels through it.

        Layers too narrow for ``rank`` get the largest admissible rank,
        ``min(in, out) - 1`` (rank 1 for a two-class head).
        """
        idx = teacher.best_member() if member is None else member
        src = teacher.members[idx]
        net = src.net.clone()
        rng = np.random.default_rng(seed)
        if fresh_head:
            old = net.layers[-1]
            net.layers[-1] = DenseLayer.init(old.in_dim, old.out_dim, "identity", rng)
        for layer in net.layers:
            layer.train_W = layer.train_b = False
        for i, layer in enumerate(net.layers):
            r = min(rank, min(layer.in_dim, layer.out_dim) - 1)
            if r >= 1:
                net.add_lora(r, rng, layers=[i])
        net.layers[-1].train_W = net.layers[-1].train_b = train_head
        return cls(net, src.transform.copy(), head, meta=f"member={idx};{src.meta}")

    def logits(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = self.net.forward(X @ self.transform.T)
        self.forward_passes += 1 if X.ndim == 1 else X.shape[0]
        return out

    def dirichlet(self, X) -> DirichletParams:
        if self.head != "evidential":
            raise ConfigError("only the evidential head produces Dirichlet parameters")
        d = link_from_logits(self.logits(X))
        if self.fixed_alpha0 is not None:
            d = DirichletParams(self.fixed_alpha0 * dirichlet.mean(d))
        return d

    def predict_proba(self, X) -> np.ndarray:
        if self.head == "softmax":
            return softmax(self.logits(X))
        a = self.dirichlet(X).alpha
        a /= row_sum(a)  # alpha was built by this call and is not shared
        return a

    def with_fixed_alpha0(self, a0: Optional[float]) -> "StudentModel":
        """Shallow copy sharing the network, with a global alpha0 at inference."""
        return StudentModel(self.net, self.transform, self.head, a0, self.meta)

    def clone(self) -> "StudentModel":
        return StudentModel(self.net.clone(), self.transform.copy(), self.head, self.fixed_alpha0, self.meta)

    def to_dict(self) -> dict:
        return {
            "format": STUDENT_FORMAT,
            "version": FORMAT_VERSION,
            "head": self.head,
            "fixed_alpha0": self.fixed_alpha0,
            "meta": self.meta,
            "transform": self.transform.tolist(),
            "network": self.net.to_dict(),
        }

    @classmethod
    def from_dict(cls, d) -> "StudentModel":
        if d.get("format") != STUDENT_FORMAT or d.get("version") != FORMAT_VERSION:
            raise ConfigError(f"unsupported student bundle (format={d.get('format')}, version={d.get('version')})")
        return cls(Network.from_dict(d["network"]), d["transform"], d["head"], d.get("fixed_alpha0"), d.get("meta", ""))

    def save(self, path) -> Path:
        return write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "StudentModel":
        return cls.from_dict(read_json(path))


def student_nll(model, X, y, eps: float = EPS) -> float:
    """Mean ground-truth NLL; for evidential heads the Dirichlet mean is used."""
    p = model.predict_proba(X)
    y = np.asarray(y, dtype=np.int64)
    return float(-np.mean(np.log(np.maximum(p[np.arange(y.size), y], eps))))


# ---------------------------------------------------------------- training


@dataclass
class DistillConfig:
    head: str = "evidential"
    max_epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    fixed_alpha0: Optional[float] = None
    seed: int = 0
    patience: int = 0
    lora_rank: int = 4
    train_head: bool = True

    def __post_init__(self):
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.fixed_alpha0 is not None and self.head != "evidential":
            raise ConfigError("fixed_alpha0 is only permitted with the evidential head")
        if self.fixed_alpha0 is not None and not self.fixed_alpha0 > 0:
            raise ConfigError("fixed_alpha0 must be positive")
        if self.max_epochs < 1 or self.batch_size < 1 or self.patience < 0 or self.lora_rank < 1:
            raise ConfigError("max_epochs, batch_size and lora_rank must be >= 1; patience >= 0")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    nll: float
    seconds: float


@dataclass
class TrainingTrace:
    epochs: List[EpochRecord] = field(default_factory=list)
    stopped_epoch: int = 0
    restored_epoch: int = 0

    @property
    def nll(self) -> List[float]:
        return [r.nll for r in self.epochs]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "nll", "seconds"])
        for r in self.epochs:
            w.writerow([r.epoch, repr(r.loss), repr(r.nll), f"{r.seconds:.6f}"])
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        return atomic_write_text(path, self.to_csv())


class EarlyStopping:
    """Stop once the monitored value has failed to improve ``patience + 1`` times in a row."""

    def __init__(self, patience: int = 0):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.bad = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        if value < self.best:
            self.best, self.best_epoch, self.bad = value, epoch, 0
            return False
        self.bad += 1
        return self.bad > self.patience


def train_student(
    student: StudentModel,
    teacher_set: TeacherPredictionSet,
    train,
    cfg: DistillConfig,
    monitor: Optional[Callable[[StudentModel], float]] = None,
):
    """Distil ``teacher_set`` into ``student`` on the inputs of ``train``.

    Only the student's trainable parameters move. Ground-truth labels enter
    solely through the per-epoch NLL monitor that drives early stopping; the
    checkpoint with the lowest monitored NLL is restored before returning.
    """
    if student.head != cfg.head:
        raise ConfigError(f"student head {student.head!r} does not match config head {cfg.head!r}")
    rows = teacher_set.rows_for(train.ids)
    if cfg.head == "softmax":
        targets = predictive_mean(rows)
        loss_grad = softmax_loss_grad
    else:
        targets = teacher_log_mean(rows)
        loss_grad = dirichlet_loss_grad
    if monitor is None:
        if not train.labelled:
            raise ConfigError("early stopping needs labelled training data")
        monitor = lambda m: student_nll(m, train.X, train.y)  # noqa: E731

    feats = train.X @ student.transform.T
    net = student.net
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.lr)
    stopper = EarlyStopping(cfg.patience)
    trace = TrainingTrace()
    best_ckpt = None
    m = len(train)
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(m)
        total = 0.0
        for start in range(0, m, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            z = net.forward(feats[idx])
            loss, g = loss_grad(z, targets[idx])
            if not np.all(np.isfinite(loss)):
                bad = [train.ids[i] for i in idx[~np.isfinite(loss)]]
                raise NumericError(f"non-finite loss in epoch {epoch}, batch at {start}; samples {bad[:5]}")
            total += float(loss.sum())
            opt.step(net, net.backward(g / len(idx)))
        value = float(monitor(student))
        trace.epochs.append(EpochRecord(epoch, total / m, value, time.perf_counter() - t0))
        stop = stopper.update(epoch, value)
        if stopper.best_epoch == epoch:
            best_ckpt = save_checkpoint(net, epoch, value)
        log.info("epoch %d: loss %.6f nll %.6f", epoch, total / m, value)
        if stop:
            break
    trace.stopped_epoch = trace.epochs[-1].epoch
    restore_checkpoint(net, best_ckpt)
    trace.restored_epoch = best_ckpt.epoch
    student.fixed_alpha0 = cfg.fixed_alpha0
    return student, trace
