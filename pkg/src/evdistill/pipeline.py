"""Experiment stages behind the command line.

Every stage reads from and writes to one output root, each into its own
subdirectory holding exactly one ``manifest.json``::

    out/data      train/val/test splits, OOD set, fresh ID draw
    out/teacher   teacher bundle, BayesPE weights, training-set cache
    out/students  distilled students, untrained baselines, traces
    out/eval      metric reports and per-sample prediction dumps
    out/ood       uncertainty summaries, W1/AUROC, histogram CSVs
    out/bench     inference timing
    out/sweep     global alpha0 sweep and learned-alpha0 histogram

A stage whose manifest already records the same run hash (config section,
seed and input file digests) is skipped unless ``force`` is set.
"""

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from evdistill import __version__, data, dirichlet
from evdistill.config import RunConfig
from evdistill.distill import DistillConfig, StudentModel, train_student
from evdistill.errors import ConfigError, DataError
from evdistill.metrics import auroc, evaluate, evaluate_probs, wasserstein1, write_prediction_dump
from evdistill.nn import atomic_write_text, read_json, write_json
from evdistill.teacher import (
    TeacherEnsemble,
    cache_predictions,
    load_cache,
    member_log_likelihoods,
    train_member,
)
from evdistill.uncertainty import batch_scores

log = logging.getLogger(__name__)

STAGES = ("data", "teacher", "students", "eval", "ood", "bench", "sweep")
KINDS = ("total", "aleatoric", "epistemic")
MANIFEST = "manifest.json"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    inputs: Dict[str, str]
    outputs: Dict[str, str] = field(default_factory=dict)
    tool_version: str = __version__
    wall_clock_seconds: float = 0.0

    @property
    def run_hash(self) -> str:
        key = json.dumps([self.command, self.config_hash, self.seed, self.inputs, self.tool_version], sort_keys=True)
        return hashlib.sha256(key.encode()).hexdigest()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["run_hash"] = self.run_hash
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        d = {k: v for k, v in d.items() if k != "run_hash"}
        return cls(**d)


@dataclass
class StageResult:
    stage: str
    directory: Path
    skipped: bool
    manifest: RunManifest


def _section_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=list).encode()).hexdigest()


def _up_to_date(stage_dir: Path, manifest: RunManifest) -> bool:
    path = stage_dir / MANIFEST
    if not path.exists():
        return False
    try:
        old = RunManifest.from_dict(read_json(path))
    except (TypeError, ValueError, KeyError):
        return False
    if old.run_hash != manifest.run_hash:
        return False
    return all((stage_dir / rel).exists() and sha256_file(stage_dir / rel) == digest for rel, digest in old.outputs.items())


def _run_stage(
    stage: str,
    out: Path,
    cfg: RunConfig,
    section,
    inputs: List[Path],
    body: Callable[[Path], List[Path]],
    force: bool,
) -> StageResult:
    stage_dir = out / stage
    missing = [p for p in inputs if not p.exists()]
    if missing:
        raise DataError(f"stage {stage!r} needs {', '.join(str(p) for p in missing)}; run the earlier stages first")
    manifest = RunManifest(
        command=stage,
        config_hash=_section_hash(section),
        seed=cfg.seed,
        inputs={str(p.relative_to(out)) if p.is_relative_to(out) else str(p): sha256_file(p) for p in inputs},
    )
    if not force and _up_to_date(stage_dir, manifest):
        log.info("%s: up to date, skipping", stage)
        return StageResult(stage, stage_dir, True, manifest)
    stage_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    written = body(stage_dir)
    manifest.wall_clock_seconds = round(time.perf_counter() - t0, 6)
    manifest.outputs = {str(p.relative_to(stage_dir)): sha256_file(p) for p in sorted(written)}
    write_json(stage_dir / MANIFEST, manifest.to_dict())
    log.info("%s: wrote %d files in %.2fs", stage, len(written), manifest.wall_clock_seconds)
    return StageResult(stage, stage_dir, False, manifest)


# ------------------------------------------------------------------ data


def synthetic_spec(cfg: RunConfig, **changes) -> data.SyntheticSpec:
    d = cfg.data
    kw = dict(
        n_classes=d.n_classes,
        dim=d.dim,
        n_samples=d.n_samples,
        separation=d.separation,
        sigma=d.sigma,
        seed=cfg.seed,
        ood_shift=d.ood_shift,
        ood_classes=d.ood_classes,
    )
    kw.update(changes)
    return data.SyntheticSpec(**kw)


def _data_inputs(cfg: RunConfig) -> List[Path]:
    return [Path(p) for p in (cfg.data.path, cfg.data.ood_path) if p]


def run_data(cfg: RunConfig, out: Path, force: bool = False) -> StageResult:
    def body(d: Path) -> List[Path]:
        if cfg.data.path:
            full = data.load(cfg.data.path, cfg.data.format, name="input")
            ood = data.load(cfg.data.ood_path, cfg.data.format, name="ood") if cfg.data.ood_path else None
            fresh = None
        else:
            spec = synthetic_spec(cfg)
            full = data.make_synthetic(spec)
            ood = data.make_synthetic(spec, ood=True)
            # same distribution as the ID data, independent draw: the null case for OOD metrics
            fresh = data.make_synthetic(synthetic_spec(cfg, ood_shift=0.0, ood_classes=None, name="fresh"), ood=True)
        parts = data.split(full, cfg.data.fractions, seed=cfg.seed)
        written = [data.save(p, d / f"{n}.csv") for n, p in zip(("train", "val", "test"), parts)]
        if ood is not None:
            written.append(data.save(ood, d / "ood.csv"))
        if fresh is not None:
            written.append(data.save(fresh, d / "id_fresh.csv"))
        return written

    return _run_stage("data", out, cfg, [cfg.seed, asdict(cfg.data)], _data_inputs(cfg), body, force)


def _load_split(out: Path, name: str) -> data.Dataset:
    return data.load(out / "data" / f"{name}.csv", name=name)


# --------------------------------------------------------------- teacher


def member_seed(seed: int, n: int) -> int:
    return 1000 * seed + n


def run_teacher(cfg: RunConfig, out: Path, force: bool = False) -> StageResult:
    t = cfg.teacher

    def body(d: Path) -> List[Path]:
        train, val = _load_split(out, "train"), _load_split(out, "val")
        if t.val_overlaps_train:
            Xv = np.concatenate([train.X, val.X])
            yv = np.concatenate([train.y, val.y])
        else:
            if len(val) == 0:
                raise DataError("validation split is empty")
            Xv, yv = val.X, val.y
        members = []
        for n in range(t.n_members):
            members.append(
                train_member(
                    train.X,
                    train.y,
                    train.n_classes,
                    seed=member_seed(cfg.seed, n),
                    hidden=t.hidden,
                    activation=t.activation,
                    rotate=t.rotate,
                    drop=t.drop,
                    epochs=t.epochs,
                    batch_size=t.batch_size,
                    lr=t.lr,
                    weight_decay=t.weight_decay,
                )
            )
            log.info("member %d trained", n)
        teacher = TeacherEnsemble(members)
        val_probs = teacher.predict_members(Xv).probs
        accs = (val_probs.argmax(axis=2) == yv[:, None]).mean(axis=0)
        warnings = [
            f"member {n} validation accuracy {a:.4f} below minimum {t.min_val_accuracy}"
            for n, a in enumerate(accs)
            if a < t.min_val_accuracy
        ]
        for w in warnings:
            log.warning(w)
        teacher.fit_weights(Xv, yv, t.entropy_weight)
        report = {
            "weights": teacher.weights.tolist(),
            "member_meta": list(teacher.member_meta),
            "val_log_likelihood": member_log_likelihoods(val_probs, yv).tolist(),
            "val_accuracy": accs.tolist(),
            "best_member": teacher.best_member(),
            "warnings": warnings,
        }
        return [
            teacher.save(d / "teacher.json"),
            write_json(d / "weights.json", report),
            cache_predictions(teacher, train, d / "cache_train.jsonl", threads=cfg.threads),
        ]

    inputs = [out / "data" / "train.csv", out / "data" / "val.csv"]
    return _run_stage("teacher", out, cfg, [cfg.seed, asdict(t)], inputs, body, force)


def load_teacher(out: Path) -> TeacherEnsemble:
    return TeacherEnsemble.load(out / "teacher" / "teacher.json")


# -------------------------------------------------------------- students


def run_students(cfg: RunConfig, out: Path, force: bool = False) -> StageResult:
    s = cfg.distill

    def body(d: Path) -> List[Path]:
        teacher = load_teacher(out)
        cache = load_cache(out / "teacher" / "cache_train.jsonl")
        train = _load_split(out, "train")
        written, summary = [], {}
        for head in s.heads:
            dc = DistillConfig(
                head=head,
                max_epochs=s.max_epochs,
                batch_size=s.batch_size,
                lr=s.lr,
                fixed_alpha0=s.fixed_alpha0 if head == "evidential" else None,
                seed=cfg.seed,
                patience=s.patience,
                lora_rank=s.lora_rank,
            )
            student = StudentModel.from_teacher(teacher, head, rank=s.lora_rank, seed=cfg.seed)
            written.append(student.save(d / f"untrained_{head}.json"))
            student, trace = train_student(student, cache, train, dc)
            written.append(student.save(d / f"student_{head}.json"))
            written.append(trace.write_csv(d / f"trace_{head}.csv"))
            summary[head] = {
                "epochs_run": trace.stopped_epoch,
                "restored_epoch": trace.restored_epoch,
                "best_nll": min(trace.nll),
                "trainable_parameters": student.net.n_trainable(),
                "backbone": student.meta,
            }
        written.append(write_json(d / "summary.json", summary))
        return written

    inputs = [out / "teacher" / "teacher.json", out / "teacher" / "cache_train.jsonl", out / "data" / "train.csv"]
    return _run_stage("students", out, cfg, [cfg.seed, asdict(s)], inputs, body, force)


def load_models(out: Path, include_untrained: bool = False) -> Dict[str, object]:
    """Teacher plus whichever students exist, in a fixed order."""
    models: Dict[str, object] = {"teacher": load_teacher(out)}
    sdir = out / "students"
    for prefix in ("student",) + (("untrained",) if include_untrained else ()):
        for head in ("softmax", "evidential"):
            p = sdir / f"{prefix}_{head}.json"
            if p.exists():
                models[f"{prefix}_{head}"] = StudentModel.load(p)
    return models


def _model_inputs(out: Path, include_untrained: bool = False) -> List[Path]:
    paths = [out / "teacher" / "teacher.json"]
    for prefix in ("student",) + (("untrained",) if include_untrained else ()):
        paths += sorted((out / "students").glob(f"{prefix}_*.json"))
    return paths


# ------------------------------------------------------------------ eval


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(v) -> str:
    return "" if v is None else repr(float(v))


def run_eval(cfg: RunConfig, out: Path, force: bool = False) -> StageResult:
    def body(d: Path) -> List[Path]:
        test = _load_split(out, "test")
        if not test.labelled:
            raise DataError("evaluation needs a labelled test split")
        written, reports, rel_rows = [], {}, []
        for name, model in load_models(out, include_untrained=True).items():
            report, probs = evaluate(model, test)
            reports[name] = report.to_dict()
            written.append(write_prediction_dump(d / f"predictions_{name}.csv", test.ids, test.y, probs))
            for b in report.bins:
                rel_rows.append([name, b["lower"], b["upper"], b["count"], _num(b["mean_confidence"]), _num(b["accuracy"])])
        written.append(write_json(d / "report.json", {"dataset": test.name, "n_samples": len(test), "models": reports}))
        header = ["model", "lower", "upper", "count", "mean_confidence", "accuracy"]
        written.append(atomic_write_text(d / "reliability.csv", _csv_text(header, rel_rows)))
        return written

    inputs = _model_inputs(out, include_untrained=True) + [out / "data" / "test.csv"]
    return _run_stage("eval", out, cfg, [cfg.seed], inputs, body, force)


# ------------------------------------------------------------------- ood


def ood_comparison(id_scores, other_scores) -> Dict[str, Dict[str, Optional[float]]]:
    """Mean per kind plus W1 and AUROC of ``other`` against ``id`` per kind."""
    res: Dict[str, Dict[str, Optional[float]]] = {}
    for kind in KINDS:
        a, b = getattr(id_scores, kind), getattr(other_scores, kind)
        if a is None or b is None:
            res[kind] = {"mean": None, "w1": None, "auroc": None}
            continue
        res[kind] = {"mean": float(np.mean(b)), "w1": wasserstein1(a, b), "auroc": auroc(a, b)}
    return res


def _histogram_rows(samples: Dict[str, np.ndarray], n_bins: int):
    allv = np.concatenate(list(samples.values()))
    lo, hi = float(allv.min()), float(allv.max())
    if hi <= lo:
        hi = lo + 1e-12
    edges = np.linspace(lo, hi, n_bins + 1)
    counts = {k: np.histogram(v, bins=edges)[0] for k, v in samples.items()}
    return [[repr(float(edges[i])), repr(float(edges[i + 1]))] + [int(counts[k][i]) for k in samples] for i in range(n_bins)]


def run_ood(cfg: RunConfig, out: Path, force: bool = False) -> StageResult:
    def body(d: Path) -> List[Path]:
        sets = {"id": _load_split(out, "test")}
        for name in ("ood", "id_fresh"):
            p = out / "data" / f"{name}.csv"
            if p.exists():
                sets[name] = data.load(p, name=name)
        if len(sets) == 1:
            raise DataError("no OOD dataset found (configure data.ood_path or use the synthetic generator)")
        written, report, rows = [], {}, []
        for mname, model in load_models(out).items():
            scores = {}
            for sname, ds in sets.items():
                bs = batch_scores(model, ds)
                if bs.errors:
                    raise DataError(f"{mname} on {sname}: {len(bs.errors)} unscorable samples, first {bs.errors[0]}")
                scores[sname] = bs
                written.append(bs.write_csv(d / f"scores_{mname}_{sname}.csv"))
            report[mname] = {}
            for sname, bs in scores.items():
                cmp = ood_comparison(scores["id"], bs)
                report[mname][sname] = cmp
                rows.append(
                    [mname, sname]
                    + [_num(cmp[k]["mean"]) for k in KINDS]
                    + [_num(cmp[k]["w1"]) for k in KINDS]
                    + [_num(cmp[k]["auroc"]) for k in KINDS]
                )
            for kind in KINDS:
                vals = {s: getattr(bs, kind) for s, bs in scores.items()}
                if any(v is None for v in vals.values()):
                    continue
                header = ["bin_lower", "bin_upper"] + list(vals)
                text = _csv_text(header, _histogram_rows(vals, cfg.ood.hist_bins))
                written.append(atomic_write_text(d / f"hist_{mname}_{kind}.csv", text))
        header = ["model", "dataset"] + [f"mean_{k}" for k in KINDS] + [f"w1_{k}" for k in KINDS] + [f"auroc_{k}" for k in KINDS]
        written.append(atomic_write_text(d / "summary.csv", _csv_text(header, rows)))
        written.append(write_json(d / "report.json", report))
        return written

    inputs = _model_inputs(out) + sorted(p for p in (out / "data").glob("*.csv") if p.stem in ("test", "ood", "id_fresh"))
    return _run_stage("ood", out, cfg, [cfg.seed, asdict(cfg.ood)], inputs, body, force)


# ----------------------------------------------------------------- bench


def time_inference(predict: Callable[[np.ndarray], np.ndarray], X: np.ndarray, repeats: int) -> float:
    """Best-of-``repeats`` wall clock for one full pass over ``X``."""
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        predict(X)
        best = min(best, time.perf_counter() - t0)
    return float(best)


def benchmark(teacher: TeacherEnsemble, students: Dict[str, StudentModel], X: np.ndarray, repeats: int = 5) -> dict:
    """Forward-pass counts for a single pass over ``X`` and best-of timings."""
    m = X.shape[0]
    teacher.forward_passes = 0
    teacher.predict_proba(X)
    res = {
        "n_samples": m,
        "n_members": teacher.n_members,
        "teacher_forward_passes": teacher.forward_passes,
        "teacher_seconds": time_inference(teacher.predict_proba, X, repeats),
        "students": {},
    }
    for name, st in students.items():
        st.forward_passes = 0
        st.predict_proba(X)
        passes = st.forward_passes
        t = time_inference(st.predict_proba, X, repeats)
        res["students"][name] = {
            "forward_passes": passes,
            "seconds": t,
            "speedup": res["teacher_seconds"] / t if t > 0 else float("inf"),
        }
    return res


def run_bench(cfg: RunConfig, out: Path, force: bool = False) -> StageResult:
    def body(d: Path) -> List[Path]:
        test = _load_split(out, "test")
        models = load_models(out)
        teacher = models.pop("teacher")
        res = benchmark(teacher, models, test.X, cfg.bench.repeats)
        return [write_json(d / "report.json", res)]

    inputs = _model_inputs(out) + [out / "data" / "test.csv"]
    return _run_stage("bench", out, cfg, [cfg.seed, asdict(cfg.bench)], inputs, body, force)


# ----------------------------------------------------------------- sweep


def alpha_sweep(student: StudentModel, dataset: data.Dataset, grid) -> List[dict]:
    """Metrics under each global alpha0 in ``grid`` plus the learned per-sample alpha0."""
    if student.head != "evidential":
        raise ConfigError("the alpha0 sweep needs an evidential student")
    rows = []
    for a0 in list(grid) + [None]:
        m = student.with_fixed_alpha0(None if a0 is None else float(a0))
        d = m.dirichlet(dataset.X)
        rep = evaluate_probs(dirichlet.mean(d), dataset.y)
        ub = dirichlet.entropy_decomposition(d)
        rows.append(
            {
                "alpha0": "learned" if a0 is None else float(a0),
                "accuracy": rep.accuracy,
                "ece": rep.ece,
                "nll": rep.nll,
                "brier": rep.brier,
                "mean_total": float(np.mean(ub.total)),
                "mean_aleatoric": float(np.mean(ub.aleatoric)),
                "mean_epistemic": float(np.mean(ub.epistemic)),
            }
        )
    return rows


def run_sweep(cfg: RunConfig, out: Path, force: bool = False) -> StageResult:
    def body(d: Path) -> List[Path]:
        path = out / "students" / "student_evidential.json"
        student = StudentModel.load(path).with_fixed_alpha0(None)
        test = _load_split(out, "test")
        rows = alpha_sweep(student, test, cfg.sweep.grid)
        header = list(rows[0])
        body_rows = [[r["alpha0"] if r["alpha0"] == "learned" else repr(r["alpha0"])] + [_num(r[k]) for k in header[1:]] for r in rows]
        text = _csv_text(header, body_rows)
        a0 = student.dirichlet(test.X).alpha0
        hist = _histogram_rows({"count": np.log10(a0)}, cfg.sweep.hist_bins)
        return [
            atomic_write_text(d / "sweep.csv", text),
            atomic_write_text(d / "alpha0_hist.csv", _csv_text(["log10_alpha0_lower", "log10_alpha0_upper", "count"], hist)),
        ]

    inputs = [out / "students" / "student_evidential.json", out / "data" / "test.csv"]
    return _run_stage("sweep", out, cfg, [cfg.seed, asdict(cfg.sweep)], inputs, body, force)


RUNNERS = {
    "data": run_data,
    "teacher": run_teacher,
    "students": run_students,
    "eval": run_eval,
    "ood": run_ood,
    "bench": run_bench,
    "sweep": run_sweep,
}


def run_pipeline(cfg: RunConfig, out, force: bool = False, stages=STAGES) -> List[StageResult]:
    out = Path(out)
    return [RUNNERS[s](cfg, out, force) for s in stages]


# ----------------------------------------------------------- determinism

_TIMING_KEYS = ("seconds", "speedup")


def _strip_timing(obj):
    if isinstance(obj, dict):
        return {k: _strip_timing(v) for k, v in obj.items() if not any(k.endswith(t) for t in _TIMING_KEYS)}
    if isinstance(obj, list):
        return [_strip_timing(v) for v in obj]
    return obj


def non_timing_digest(out) -> Dict[str, str]:
    """sha256 of every output file with timing fields removed.

    Manifests are skipped whole (they hold wall clock and output digests);
    ``seconds`` columns are dropped from CSVs and timing keys from JSON.
    """
    out = Path(out)
    res = {}
    for p in sorted(out.rglob("*")):
        if not p.is_file() or p.name == MANIFEST:
            continue
        raw = p.read_bytes()
        if p.suffix == ".json":
            raw = json.dumps(_strip_timing(json.loads(raw)), sort_keys=True).encode()
        elif p.suffix == ".csv":
            rows = list(csv.reader(io.StringIO(raw.decode("utf-8"))))
            if rows and "seconds" in rows[0]:
                j = rows[0].index("seconds")
                rows = [r[:j] + r[j + 1 :] for r in rows]
            raw = _csv_text(rows[0], rows[1:]).encode() if rows else b""
        res[str(p.relative_to(out))] = hashlib.sha256(raw).hexdigest()
    return res
