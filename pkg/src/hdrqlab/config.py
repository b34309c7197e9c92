"""Experiment configuration files.

INI-style text with ``[data]``, ``[train]``, ``[ptq]``, ``[merge]`` and
``[analysis]`` sections, ``key = value`` lines and ``#`` comments.  Unknown
sections or keys are rejected; missing keys fall back to defaults with a
logged notice.
"""

from __future__ import annotations

import configparser
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .hdrq import METHODS, PtqConfig
from .merge import STRATEGIES
from .synthdata import BASE_TASKS

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.replace(" ", "").split(",") if x)


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.replace(" ", "").split(",") if x)


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_int(s: str):
    return None if s.strip().lower() in ("", "auto", "none") else int(s)


@dataclass(frozen=True)
class DataSection:
    base_task: str = "two-moons"
    noise_std: float = 0.15
    n_train: int = 512
    n_test: int = 1024
    source_rotation: float = 0.0
    target_rotations: tuple[float, ...] = (40.0, -40.0)


@dataclass(frozen=True)
class TrainSection:
    hidden: tuple[int, ...] = (32, 32)
    epochs: int = 60
    lr: float = 0.01
    batch_size: int = 64
    adapt_epochs: int = 20
    adapt_lr: float = 0.002


@dataclass(frozen=True)
class PtqSection:
    method: str = "hdrq"
    weight_bits: int = 4
    act_bits: int = 8
    iterations: int = 20000
    fake_quant_tail: int = 3500
    scale: float = 0.05
    lambda_dist: float = 5e-2
    squared_distance: bool = True
    lr0: float = 1e-3
    warmup: int | None = None
    drop_prob: float = 0.5
    calib_batches: int = 4
    calib_batch_size: int = 64
    recalib_every: int = 500

    def ptq_config(self, seed: int, **overrides) -> PtqConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(PtqConfig) if hasattr(self, f.name)}
        kw.update(seed=seed, **overrides)
        return PtqConfig(**kw)


@dataclass(frozen=True)
class MergeSection:
    strategy: str = "noise_sampled"
    n_candidates: int = 30
    symmetric: bool = True


@dataclass(frozen=True)
class AnalysisSection:
    grid_n: int = 21
    resolution: int = 21
    loss: str = "cross_entropy"
    probes: int = 32
    seeds: int = 10
    bits: tuple[int, ...] = (8, 4, 3)
    methods: tuple[str, ...] = ("hdrq", "recon_only")


# keyed by the (string) annotations of the section dataclasses
PARSERS = {
    "int": int, "float": float, "str": str, "bool": _bool,
    "tuple[int, ...]": _ints, "tuple[float, ...]": _floats, "int | None": _opt_int,
    "tuple[str, ...]": lambda s: tuple(x.strip() for x in s.split(",") if x.strip()),
}


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    ptq: PtqSection = field(default_factory=PtqSection)
    merge: MergeSection = field(default_factory=MergeSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    def validate(self) -> "ExperimentConfig":
        if self.data.base_task not in BASE_TASKS:
            raise ConfigError(f"[data] base_task must be one of {BASE_TASKS}")
        if not self.data.target_rotations:
            raise ConfigError("[data] target_rotations must list at least one angle")
        if self.ptq.method not in METHODS:
            raise ConfigError(f"[ptq] method must be one of {METHODS}")
        if self.merge.strategy not in STRATEGIES:
            raise ConfigError(f"[merge] strategy must be one of {STRATEGIES}")
        bad = [m for m in self.analysis.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"[analysis] unknown methods {bad}")
        if self.analysis.loss not in ("cross_entropy", "sum_squares", "double_well"):
            raise ConfigError("[analysis] loss must be cross_entropy, sum_squares or double_well")
        try:
            self.ptq.ptq_config(0)
        except ValueError as exc:
            raise ConfigError(f"[ptq] {exc}") from exc
        return self


SECTIONS = {"data": DataSection, "train": TrainSection, "ptq": PtqSection,
            "merge": MergeSection, "analysis": AnalysisSection}


def _parse_section(name: str, cls, items: dict[str, str]):
    known = {f.name: f for f in fields(cls)}
    kw = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
        parse = PARSERS[known[key].type]
        try:
            kw[key] = parse(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}] {key}: cannot parse {raw!r} ({exc})") from exc
    for key in known:
        if key not in kw:
            log.info("[%s] %s not set, using default %r", name, key, getattr(cls(), key))
    return cls(**kw)


def parse_config(text: str, required: tuple[str, ...] = ("data",)) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",),
                                   interpolation=None, default_section="__none__")
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
    for sec in required:
        if not cp.has_section(sec):
            raise ConfigError(f"missing required section [{sec}]")
    parts = {}
    for name, cls in SECTIONS.items():
        if cp.has_section(name):
            parts[name] = _parse_section(name, cls, dict(cp.items(name)))
        else:
            log.info("section [%s] absent, using defaults", name)
            parts[name] = cls()
    return ExperimentConfig(**parts).validate()


def load_config(path: str | Path | None, required: tuple[str, ...] = ("data",)) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, required)


def with_ptq(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, ptq=replace(cfg.ptq, **kw))


DEFAULT_TEXT = """\
# desk-scale experiment
[data]
base_task = two-moons
noise_std = 0.15
n_train = 512
n_test = 1024
source_rotation = 0
target_rotations = 40, -40

[train]
hidden = 32, 32
epochs = 60
lr = 0.01
batch_size = 64
adapt_epochs = 20
adapt_lr = 0.002

[ptq]
method = hdrq
weight_bits = 4
act_bits = 8
iterations = 20000
fake_quant_tail = 3500
scale = 0.05
lambda_dist = 0.05
lr0 = 0.001
drop_prob = 0.5
calib_batches = 4

[merge]
strategy = noise_sampled
n_candidates = 30

[analysis]
grid_n = 21
seeds = 10
bits = 8, 4, 3
"""
