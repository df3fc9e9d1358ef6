"""Dirichlet distribution maths for the evidential head.

Every function broadcasts over leading axes: ``alpha`` may be a single
concentration vector of shape ``(K,)`` or a batch ``(M, K)``.
"""

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from evdistill.entropy import EPS, UncertaintyBreakdown, categorical_entropy
from evdistill.errors import NumericError, ShapeError
from evdistill.special import digamma, lgamma, row_sum


class ProbabilityFloorWarning(UserWarning):
    """Raised when log_density had to clamp a boundary probability."""


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    t = np.abs(x)
    np.negative(t, out=t)
    np.exp(t, out=t)
    np.log1p(t, out=t)
    t += np.maximum(x, 0.0)
    return t


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass(frozen=True)
class DirichletParams:
    alpha: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        if a.ndim == 0 or a.shape[-1] < 2:
            raise ShapeError(f"alpha needs at least two classes, got shape {a.shape}")
        # min and max propagate NaN, so one pass each covers every bad value
        if a.size and not (a.min() > 0 and a.max() < np.inf):
            raise NumericError("Dirichlet concentrations must be finite and > 0")
        object.__setattr__(self, "alpha", a)

    @property
    def alpha0(self):
        s = self.alpha.sum(axis=-1)
        return float(s) if s.ndim == 0 else s

    @property
    def n_classes(self) -> int:
        return self.alpha.shape[-1]


def _params(d) -> DirichletParams:
    return d if isinstance(d, DirichletParams) else DirichletParams(d)


_ABOVE_ONE = np.nextafter(1.0, 2.0)


def link_from_logits(z) -> DirichletParams:
    """alpha_c = 1 + softplus(z_c)."""
    z = np.asarray(z, dtype=np.float64)
    if z.size and not (np.isfinite(z.min()) and np.isfinite(z.max())):
        raise NumericError("non-finite logit passed to the evidential link")
    alpha = softplus(z)
    alpha += 1.0
    # 1 + softplus(z) rounds to exactly 1.0 once z < about -37; keep alpha > 1
    np.maximum(alpha, _ABOVE_ONE, out=alpha)
    return DirichletParams(alpha)


def mean(d) -> np.ndarray:
    a = _params(d).alpha
    return a / row_sum(a)


def log_normalizer(d):
    """log Gamma(alpha0) - sum_c log Gamma(alpha_c), i.e. -log B(alpha)."""
    a = _params(d).alpha
    out = lgamma(a.sum(axis=-1)) - lgamma(a).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def log_density(d, p, eps: float = EPS):
    """log Dir(p | alpha).

    Components of ``p`` below ``eps`` are raised to ``eps`` before the log and a
    ``ProbabilityFloorWarning`` is issued, so boundary points never yield -inf.
    """
    d = _params(d)
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != d.n_classes:
        raise ShapeError(f"p has {p.shape[-1]} classes, alpha has {d.n_classes}")
    if np.any(p < eps):
        warnings.warn("probability clamped to the floor in log_density", ProbabilityFloorWarning, stacklevel=2)
        p = np.maximum(p, eps)
    out = log_normalizer(d) + np.sum((d.alpha - 1.0) * np.log(p), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def sample(d, rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw ``n`` probability vectors; returns shape ``(n, K)``.

    Normalised independent Gamma(alpha_c, 1) variates.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    a = _params(d).alpha
    if a.ndim != 1:
        raise ShapeError("sample() takes a single concentration vector")
    g = rng.gamma(shape=a, size=(n, a.shape[0]))
    return g / g.sum(axis=1, keepdims=True)


def entropy_decomposition(d) -> UncertaintyBreakdown:
    """Total, aleatoric and epistemic entropy of the Dirichlet predictive.

    total      = H[mean]
    aleatoric  = -sum_c (alpha_c / alpha0) (psi(alpha_c + 1) - psi(alpha0 + 1))
    epistemic  = total - aleatoric
    """
    d = _params(d)
    a = d.alpha
    a0 = a.sum(axis=-1, keepdims=True)
    m = a / a0
    total = np.asarray(categorical_entropy(m))
    aleatoric = -np.sum(m * (digamma(a + 1.0) - digamma(a0 + 1.0)), axis=-1)
    epistemic = total - aleatoric
    if total.ndim == 0:
        return UncertaintyBreakdown(float(total), float(aleatoric), float(epistemic))
    return UncertaintyBreakdown(total, aleatoric, epistemic)


def simplex_grid(d, resolution: int = 60) -> np.ndarray:
    """Density of a 3-class Dirichlet on an interior barycentric grid.

    Returns rows ``(p1, p2, p3, density)`` for plotting the 2-simplex.
    """
    d = _params(d)
    if d.alpha.shape != (3,):
        raise ShapeError("simplex_grid needs a single 3-class alpha")
    i, j = np.meshgrid(np.arange(1, resolution), np.arange(1, resolution), indexing="ij")
    keep = i + j < resolution
    p1 = i[keep] / resolution
    p2 = j[keep] / resolution
    pts = np.stack([p1, p2, 1.0 - p1 - p2], axis=1)
    dens = np.exp(log_density(d, pts))
    return np.column_stack([pts, dens])


def write_simplex_grid_csv(path, d, resolution: int = 60) -> Path:
    path = Path(path)
    rows = simplex_grid(d, resolution)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["p1", "p2", "p3", "density"])
        for r in rows:
            w.writerow([repr(float(v)) for v in r])
    return path
