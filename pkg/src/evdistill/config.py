"""Run configuration: one TOML or JSON document with a section per stage."""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Tuple

from evdistill.distill import HEADS
from evdistill.errors import ConfigError

try:  # Python 3.11+
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as _toml


@dataclass
class DataSection:
    n_classes: int = 2
    dim: int = 8
    n_samples: int = 3200
    separation: float = 5.0
    sigma: float = 1.0
    ood_shift: float = 6.0
    ood_classes: Optional[int] = 2
    # train 2000 / val 200 / test 1000 of 3200
    fractions: Tuple[float, float, float] = (0.625, 0.0625, 0.3125)
    path: Optional[str] = None
    format: Optional[str] = None
    ood_path: Optional[str] = None


@dataclass
class TeacherSection:
    n_members: int = 8
    hidden: Tuple[int, ...] = (32, 32)
    activation: str = "tanh"
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-2
    weight_decay: float = 1e-3
    rotate: bool = True
    drop: float = 0.0
    entropy_weight: Optional[float] = None
    min_val_accuracy: float = 0.0
    val_overlaps_train: bool = False


@dataclass
class DistillSection:
    heads: Tuple[str, ...] = HEADS
    max_epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-2
    patience: int = 0
    lora_rank: int = 4
    fixed_alpha0: Optional[float] = None


@dataclass
class BenchSection:
    repeats: int = 20


@dataclass
class SweepSection:
    grid: Tuple[float, ...] = (2, 5, 10, 20, 50, 100, 200, 500)
    hist_bins: int = 30


@dataclass
class OodSection:
    hist_bins: int = 30


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    data: DataSection = field(default_factory=DataSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    distill: DistillSection = field(default_factory=DistillSection)
    ood: OodSection = field(default_factory=OodSection)
    bench: BenchSection = field(default_factory=BenchSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def validate(self) -> "RunConfig":
        d, t, s = self.data, self.teacher, self.distill
        if len(d.fractions) != 3 or any(f < 0 for f in d.fractions) or abs(sum(d.fractions) - 1) > 1e-9:
            raise ConfigError(f"data.fractions must be three nonnegative numbers summing to 1, got {d.fractions}")
        if d.fractions[0] <= 0 or d.fractions[2] <= 0:
            raise ConfigError("data.fractions needs a nonempty train and test split")
        if d.fractions[1] <= 0 and not t.val_overlaps_train:
            raise ConfigError("an empty validation split requires teacher.val_overlaps_train = true")
        if not d.sigma > 0:
            raise ConfigError("data.sigma must be positive")
        if t.n_members < 1:
            raise ConfigError("teacher.n_members must be >= 1")
        if not 0 <= t.drop < 1:
            raise ConfigError("teacher.drop must lie in [0, 1)")
        bad = [h for h in s.heads if h not in HEADS]
        if bad or not s.heads:
            raise ConfigError(f"distill.heads must be a nonempty subset of {HEADS}, got {list(s.heads)}")
        if s.fixed_alpha0 is not None and not s.fixed_alpha0 > 0:
            raise ConfigError("distill.fixed_alpha0 must be positive")
        if any(not a > 0 for a in self.sweep.grid):
            raise ConfigError("sweep.grid values must be positive")
        if self.threads < 1 or self.bench.repeats < 1:
            raise ConfigError("threads and bench.repeats must be >= 1")
        return self

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


_SECTIONS = {
    "data": DataSection,
    "teacher": TeacherSection,
    "distill": DistillSection,
    "ood": OodSection,
    "bench": BenchSection,
    "sweep": SweepSection,
}


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    kw = {}
    for k, v in raw.items():
        default = getattr(cls(), k)
        kw[k] = tuple(v) if isinstance(v, list) and isinstance(default, tuple) else v
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    raw = dict(raw)
    top = {}
    for key in ("seed", "threads"):
        if key in raw:
            top[key] = raw.pop(key)
    sections = {}
    for name, cls in _SECTIONS.items():
        sections[name] = _build(cls, raw.pop(name, {}), name)
    if raw:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(raw))}")
    return RunConfig(**top, **sections).validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix.lower() == ".json":
            raw = json.loads(text)
        else:
            raw = _toml.loads(text)
    except (ValueError, _toml.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: cannot parse config: {exc}") from exc
    return config_from_dict(raw)


def default_config() -> RunConfig:
    return RunConfig().validate()


def parse_overrides(pairs: List[str]) -> dict:
    """``section.key=value`` strings (values parsed as JSON when possible)."""
    out: dict = {}
    for item in pairs:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        key, val = item.split("=", 1)
        section, name = key.split(".", 1)
        try:
            parsed = json.loads(val)
        except ValueError:
            parsed = val
        out.setdefault(section, {})[name] = parsed
    return out


def merge(cfg: RunConfig, overrides: dict) -> RunConfig:
    raw = cfg.to_dict()
    for section, values in overrides.items():
        if section not in raw or not isinstance(raw[section], dict):
            raise ConfigError(f"unknown config section: {section}")
        raw[section].update(values)
    return config_from_dict(raw)
