"""Datasets, deterministic splits and synthetic Gaussian-cluster tasks."""

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from evdistill.errors import ConfigError, DataError
from evdistill.nn import atomic_write_text

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dataset:
    """Immutable labelled (or unlabelled) feature-vector dataset."""

    ids: Tuple[str, ...]
    X: np.ndarray
    y: Optional[np.ndarray]
    n_classes: int
    name: str = "dataset"

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            raise DataError(f"features must be a 2-D array, got shape {X.shape}")
        ids = tuple(str(i) for i in self.ids)
        if len(ids) != X.shape[0]:
            raise DataError(f"{len(ids)} ids for {X.shape[0]} rows")
        if len(set(ids)) != len(ids):
            raise DataError("sample ids must be unique")
        y = self.y
        if y is not None:
            y = np.asarray(y, dtype=np.int64)
            if y.shape != (X.shape[0],):
                raise DataError(f"label vector shape {y.shape} does not match {X.shape[0]} rows")
            if y.size and (y.min() < 0 or y.max() >= self.n_classes):
                raise DataError(f"labels must lie in [0, {self.n_classes})")
            y.setflags(write=False)
        X.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def labelled(self) -> bool:
        return self.y is not None

    def subset(self, idx, name: Optional[str] = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            tuple(self.ids[i] for i in idx),
            self.X[idx],
            None if self.y is None else self.y[idx],
            self.n_classes,
            name or self.name,
        )


# ---------------------------------------------------------------- file formats


def _fmt(v: float) -> str:
    return repr(float(v))


def save(ds: Dataset, path, fmt: Optional[str] = None) -> Path:
    """Write ``ds`` as CSV (``id,y,f0..``) or JSONL (``{"id","y","x"}``).

    Both formats start with a metadata line so that empty files still carry
    the class count: ``# name=<name> n_classes=<K> dim=<d>`` for CSV and a
    ``{"meta": {...}}`` record for JSONL.
    """
    path = Path(path)
    fmt = fmt or _infer_format(path)
    lines = []
    if fmt == "csv":
        lines.append(f"# name={ds.name} n_classes={ds.n_classes} dim={ds.dim}")
        lines.append(",".join(["id", "y"] + [f"f{j}" for j in range(ds.dim)]))
        for i in range(len(ds)):
            y = "" if ds.y is None else str(int(ds.y[i]))
            lines.append(",".join([ds.ids[i], y] + [_fmt(v) for v in ds.X[i]]))
    elif fmt == "jsonl":
        lines.append(json.dumps({"meta": {"name": ds.name, "n_classes": ds.n_classes, "dim": ds.dim}}))
        for i in range(len(ds)):
            rec = {"id": ds.ids[i], "y": None if ds.y is None else int(ds.y[i]), "x": ds.X[i].tolist()}
            lines.append(json.dumps(rec))
    else:
        raise ConfigError(f"unknown dataset format {fmt!r}")
    return atomic_write_text(path, "\n".join(lines) + "\n")


def _infer_format(path: Path) -> str:
    suffix = path.suffix.lower().lstrip(".")
    if suffix in ("csv", "jsonl"):
        return suffix
    raise ConfigError(f"cannot infer dataset format from {path.name!r}; pass format='csv' or 'jsonl'")


def _parse_meta(text: str) -> dict:
    meta = {}
    for tok in text.lstrip("#").split():
        if "=" in tok:
            k, v = tok.split("=", 1)
            meta[k] = v
    return meta


def load(path, fmt: Optional[str] = None, n_classes: Optional[int] = None, name: Optional[str] = None) -> Dataset:
    """Read a CSV or JSONL dataset, validating every row.

    Missing ids default to the row index. ``n_classes`` falls back to the file
    metadata, then to ``max(label) + 1``.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    fmt = fmt or _infer_format(path)
    with open(path, newline="") as fh:
        raw = fh.read().splitlines()
    meta = {}
    ids, xs, ys = [], [], []
    if fmt == "csv":
        body = []
        for line in raw:
            if line.startswith("#"):
                meta.update(_parse_meta(line))
            elif line.strip():
                body.append(line)
        if not body:
            raise DataError(f"{path}: missing CSV header")
        reader = csv.reader(body)
        header = next(reader)
        if "y" not in header:
            raise DataError(f"{path}: CSV header must contain a 'y' column")
        feat_cols = [i for i, h in enumerate(header) if h.startswith("f") and h[1:].isdigit()]
        feat_cols.sort(key=lambda i: int(header[i][1:]))
        if [int(header[i][1:]) for i in feat_cols] != list(range(len(feat_cols))):
            raise DataError(f"{path}: feature columns must be f0..f{{d-1}}")
        id_col = header.index("id") if "id" in header else None
        y_col = header.index("y")
        meta.setdefault("dim", str(len(feat_cols)))
        for rowno, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise DataError(f"{path}: row {rowno} has {len(row)} fields, header has {len(header)}")
            ids.append(row[id_col] if id_col is not None else str(rowno - 1))
            ys.append(_parse_label(row[y_col], path, rowno))
            xs.append(_parse_features([row[i] for i in feat_cols], path, rowno))
    elif fmt == "jsonl":
        rowno = 0
        for line in raw:
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: invalid JSON on row {rowno + 1}: {exc}") from None
            if "meta" in rec:
                meta.update({k: str(v) for k, v in rec["meta"].items()})
                continue
            rowno += 1
            if "x" not in rec:
                raise DataError(f"{path}: row {rowno} has no 'x' field")
            ids.append(str(rec.get("id", rowno - 1)))
            y = rec.get("y")
            ys.append(None if y is None else _parse_label(str(y), path, rowno))
            xs.append(_parse_features(rec["x"], path, rowno))
    else:
        raise ConfigError(f"unknown dataset format {fmt!r}")

    dims = {len(x) for x in xs}
    if len(dims) > 1:
        first = len(xs[0])
        bad = next(i for i, x in enumerate(xs) if len(x) != first)
        raise DataError(f"{path}: ragged features on row {bad + 1} ({len(xs[bad])} vs {first})")
    dim = dims.pop() if dims else int(meta.get("dim", 0))
    labelled = [y is not None for y in ys]
    if any(labelled) and not all(labelled):
        raise DataError(f"{path}: either every row or no row must carry a label")
    y_arr = np.asarray(ys, dtype=np.int64) if ys and all(labelled) else None
    if n_classes is None:
        if "n_classes" in meta:
            n_classes = int(meta["n_classes"])
        else:
            n_classes = int(y_arr.max()) + 1 if y_arr is not None and y_arr.size else 0
    if y_arr is not None:
        bad = np.flatnonzero((y_arr < 0) | (y_arr >= n_classes))
        if bad.size:
            raise DataError(f"{path}: label {y_arr[bad[0]]} on row {bad[0] + 1} outside [0, {n_classes})")
    X = np.asarray(xs, dtype=np.float64).reshape(len(xs), dim)
    if len(xs) == 0 and not any(labelled):
        y_arr = np.zeros(0, dtype=np.int64)
    return Dataset(tuple(ids), X, y_arr, n_classes, name or meta.get("name", path.stem))


def _parse_label(s, path, rowno):
    s = s.strip()
    if s == "":
        return None
    try:
        return int(s)
    except ValueError:
        raise DataError(f"{path}: non-integer label {s!r} on row {rowno}") from None


def _parse_features(vals, path, rowno):
    try:
        out = [float(v) for v in vals]
    except (TypeError, ValueError):
        raise DataError(f"{path}: non-numeric feature on row {rowno}") from None
    if not all(math.isfinite(v) for v in out):
        raise DataError(f"{path}: non-finite feature on row {rowno}")
    return out


# ---------------------------------------------------------------------- splits


def _allocate(n: int, fractions: Sequence[float]) -> List[int]:
    """Largest-remainder rounding of ``n * fractions`` to integers summing to n."""
    raw = [n * f for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split(ds: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> Tuple[Dataset, ...]:
    """Disjoint, exhaustive, seeded split; stratified when labels exist."""
    fractions = [float(f) for f in fractions]
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be nonnegative and sum to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    parts = [[] for _ in fractions]
    n_active = sum(f > 0 for f in fractions)
    stratify = ds.labelled and len(ds) > 0
    if stratify:
        counts = np.bincount(ds.y, minlength=ds.n_classes)
        if np.any((counts > 0) & (counts < n_active)):
            warnings.warn("a class has fewer samples than splits; falling back to an unstratified split")
            stratify = False
    if stratify:
        for c in range(ds.n_classes):
            idx = np.flatnonzero(ds.y == c)
            idx = idx[rng.permutation(idx.size)]
            pos = 0
            for part, k in zip(parts, _allocate(idx.size, fractions)):
                part.extend(idx[pos : pos + k].tolist())
                pos += k
    else:
        idx = rng.permutation(len(ds))
        pos = 0
        for part, k in zip(parts, _allocate(len(ds), fractions)):
            part.extend(idx[pos : pos + k].tolist())
            pos += k
    names = ("train", "val", "test") if len(fractions) == 3 else tuple(f"part{i}" for i in range(len(fractions)))
    return tuple(ds.subset(sorted(p), f"{ds.name}-{nm}") for p, nm in zip(parts, names))


# ------------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian class clusters with a shared isotropic scale ``sigma``.

    Class means sit on the first ``n_classes`` axes: for two classes at
    ``+-separation/2`` along axis 0, otherwise at ``separation/sqrt(2)`` on
    axis ``k`` so that every pair of means is ``separation`` apart.

    The OOD variant moves the data cloud by ``ood_shift * sigma`` along an
    axis orthogonal to every class mean. With ``ood_classes`` set, the class
    structure is also replaced: ``ood_classes`` fresh clusters are drawn at
    the shifted centre, on axes the in-distribution classes never use, each
    ``separation`` away from the others (a label-count change).
    """

    n_classes: int = 2
    dim: int = 8
    n_samples: int = 3200
    separation: float = 5.0
    sigma: float = 1.0
    seed: int = 0
    means: Optional[Tuple[Tuple[float, ...], ...]] = None
    ood_shift: float = 0.0
    ood_classes: Optional[int] = None
    name: str = "synthetic"

    def class_means(self) -> np.ndarray:
        if self.means is not None:
            m = np.asarray(self.means, dtype=np.float64)
            if m.shape != (self.n_classes, self.dim):
                raise ConfigError(f"means must have shape ({self.n_classes}, {self.dim})")
            return m
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        if self.n_classes > self.dim - 1:
            raise ConfigError("dim must exceed n_classes to leave an OOD axis")
        m = np.zeros((self.n_classes, self.dim))
        if self.n_classes == 2:
            m[0, 0], m[1, 0] = -self.separation / 2, self.separation / 2
        else:
            for k in range(self.n_classes):
                m[k, k] = self.separation / np.sqrt(2.0)
        return m

    def ood_direction(self) -> np.ndarray:
        u = np.zeros(self.dim)
        u[-1] = 1.0
        return u


def _draw(means: np.ndarray, sigma: float, n: int, rng) -> Tuple[np.ndarray, np.ndarray]:
    k = means.shape[0]
    y = np.repeat(np.arange(k), _allocate(n, [1.0 / k] * k))
    y = y[rng.permutation(n)]
    X = means[y] + sigma * rng.standard_normal((n, means.shape[1]))
    return X, y


def make_synthetic(spec: SyntheticSpec, ood: bool = False) -> Dataset:
    """Draw a reproducible dataset; ``ood=True`` applies the OOD transform configured on ``spec``."""
    if not spec.sigma > 0:
        raise ConfigError("covariance scale sigma must be positive")
    means = spec.class_means()
    shift = spec.ood_shift * spec.sigma * spec.ood_direction()
    # separate streams so the ID and OOD draws never share variates
    rng = np.random.default_rng([spec.seed, 1 if ood else 0])
    if not ood:
        X, y = _draw(means, spec.sigma, spec.n_samples, rng)
        k, prefix = spec.n_classes, "id"
    elif spec.ood_classes is None:
        X, y = _draw(means, spec.sigma, spec.n_samples, rng)
        X = X + shift
        k, prefix = spec.n_classes, "ood"
    else:
        k = spec.ood_classes
        free = [a for a in range(spec.dim - 1) if not np.any(means[:, a])]
        if len(free) < k:
            raise ConfigError(f"dim={spec.dim} leaves only {len(free)} unused axes for {k} OOD classes")
        centre = means.mean(axis=0) + shift
        new = np.tile(centre, (k, 1))
        for j, a in enumerate(free[:k]):
            new[j, a] += spec.separation / np.sqrt(2.0)
        X, y = _draw(new, spec.sigma, spec.n_samples, rng)
        prefix = "ood"
    ids = tuple(f"{prefix}{i:06d}" for i in range(spec.n_samples))
    return Dataset(ids, X, y, k, f"{spec.name}-{prefix}")


def gaussian_bayes_accuracy(separation: float, sigma: float) -> float:
    """Accuracy of the optimal rule for two equiprobable isotropic Gaussians."""
    return 0.5 * (1.0 + math.erf(separation / (2.0 * sigma) / math.sqrt(2.0)))
