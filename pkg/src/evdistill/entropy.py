"""Shannon entropy and the (total, aleatoric, epistemic) record."""

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from evdistill.errors import ShapeError

#: Floor applied to probabilities before taking logs.
EPS = 1e-12

ArrayLike = Union[float, np.ndarray]


def as_prob_vector(p, atol: float = 1e-9) -> np.ndarray:
    """Validate points on the probability simplex (last axis = classes)."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 0:
        raise ShapeError("probability vector must have at least one axis")
    if np.any(~np.isfinite(p)) or np.any(p < -atol) or np.any(p > 1 + atol):
        raise ValueError("probabilities must lie in [0, 1]")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > atol):
        raise ValueError("probabilities must sum to 1")
    return p


def categorical_entropy(p) -> ArrayLike:
    """-sum_c p_c log p_c over the last axis, in nats; 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    logp = np.log(np.where(p > 0, p, 1.0))
    h = -np.sum(p * logp, axis=-1)
    return float(h) if h.ndim == 0 else h


@dataclass(frozen=True)
class UncertaintyBreakdown:
    """Entropy-based uncertainty for one input (floats) or a batch (arrays).

    ``aleatoric`` and ``epistemic`` are ``None`` for softmax students, which
    carry no second-order information.
    """

    total: ArrayLike
    aleatoric: Optional[ArrayLike] = None
    epistemic: Optional[ArrayLike] = None

    @property
    def decomposed(self) -> bool:
        return self.aleatoric is not None

    def __getitem__(self, idx) -> "UncertaintyBreakdown":
        def pick(v):
            if v is None:
                return None
            out = np.asarray(v)[idx]
            return float(out) if np.ndim(out) == 0 else out

        return UncertaintyBreakdown(pick(self.total), pick(self.aleatoric), pick(self.epistemic))

    def __len__(self) -> int:
        return int(np.size(self.total))
