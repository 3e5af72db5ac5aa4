"""Pipeline configuration: nested dataclasses loaded from YAML.

Every key has a default; unknown keys and invalid values raise ConfigError
naming the dotted field path.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass
class TaskConfig:
    groups: int = 5
    contexts: int = 40  # context i belongs to group i % groups
    answers: int = 6
    fillers: int = 6

    def validate(self, path="task"):
        _check(self.groups >= 1, f"{path}.groups", "must be >= 1")
        _check(self.contexts >= self.groups, f"{path}.contexts", "must be >= groups")
        _check(self.answers >= 2, f"{path}.answers", "must be >= 2")
        _check(self.fillers >= 0, f"{path}.fillers", "must be >= 0")


@dataclass
class EnsembleConfig:
    teachers: int = 5
    order: int = 2
    temperatures: list = field(default_factory=lambda: [1.0])
    accuracy: float = 0.7  # in-group mass on the gold answer
    off_group_tv: float = 0.4  # mass moved to a distractor outside the home group
    drift: str = "sudden"  # sudden | gradual | none
    drift_magnitude: float = 1.0
    drift_span: int = 5

    def validate(self, path="ensemble"):
        _check(self.teachers >= 1, f"{path}.teachers", "must be >= 1")
        _check(0 <= self.order <= 4, f"{path}.order", "must lie in [0, 4]")
        _check(
            len(self.temperatures) in (1, self.teachers),
            f"{path}.temperatures",
            "needs one value or one per teacher",
        )
        _check(all(t > 0 for t in self.temperatures), f"{path}.temperatures", "must be positive")
        _check(0 < self.accuracy <= 1, f"{path}.accuracy", "must lie in (0, 1]")
        _check(0 <= self.off_group_tv <= self.accuracy, f"{path}.off_group_tv", "must lie in [0, accuracy]")
        _check(self.drift in ("sudden", "gradual", "none"), f"{path}.drift", "must be sudden, gradual or none")
        _check(self.drift_span >= 0, f"{path}.drift_span", "must be >= 0")


@dataclass
class CorpusConfig:
    rounds: int = 1  # passes over the context list; corpus steps = rounds * contexts
    per_context: int = 20
    max_len: int = 40

    def validate(self, path="corpus"):
        _check(self.rounds >= 1, f"{path}.rounds", "must be >= 1")
        _check(self.per_context >= 1, f"{path}.per_context", "must be >= 1")
        _check(self.max_len >= 1, f"{path}.max_len", "must be >= 1")


@dataclass
class SpdConfig:
    epochs: int = 300
    lr: float = 0.5
    momentum: float = 0.0
    mode: str = "barycenter"  # barycenter | sequence_ce
    order: int = 2
    subsample_fraction: float = 1.0

    def validate(self, path="spd"):
        _check(self.epochs >= 0, f"{path}.epochs", "must be >= 0")
        _check(self.lr > 0, f"{path}.lr", "must be positive")
        _check(0 <= self.momentum < 1, f"{path}.momentum", "must lie in [0, 1)")
        _check(self.mode in ("barycenter", "sequence_ce"), f"{path}.mode", "must be barycenter or sequence_ce")
        _check(0 <= self.order <= 4, f"{path}.order", "must lie in [0, 4]")
        _check(0 < self.subsample_fraction <= 1, f"{path}.subsample_fraction", "must lie in (0, 1]")


@dataclass
class SelfDistillConfig:
    cap: int = 64
    decoding: str = "greedy"  # greedy | sample
    max_len: int = 8

    def validate(self, path="selfdistill"):
        _check(self.cap >= 2, f"{path}.cap", "must be >= 2")
        _check(self.decoding in ("greedy", "sample"), f"{path}.decoding", "must be greedy or sample")
        _check(self.max_len >= 1, f"{path}.max_len", "must be >= 1")


@dataclass
class ApoSection:
    beta: float = 0.1
    weights: str = "uniform"  # uniform | drift
    lr: float = 50.0
    steps: int = 300
    momentum: float = 0.0
    length_normalize: bool = False

    def validate(self, path="apo"):
        _check(self.beta > 0, f"{path}.beta", "must be positive")
        _check(self.weights in ("uniform", "drift"), f"{path}.weights", "must be uniform or drift")
        _check(self.lr > 0, f"{path}.lr", "must be positive")
        _check(self.steps >= 0, f"{path}.steps", "must be >= 0")
        _check(0 <= self.momentum < 1, f"{path}.momentum", "must lie in [0, 1)")


@dataclass
class DriftConfig:
    window: int = 500
    alpha: float = 0.05
    permutations: int = 1000
    correction: str = "bonferroni"

    def validate(self, path="drift"):
        _check(self.window >= 1, f"{path}.window", "must be >= 1")
        _check(0 < self.alpha < 1, f"{path}.alpha", "must lie in (0, 1)")
        _check(self.permutations >= 100, f"{path}.permutations", "must be >= 100")
        _check(self.correction in ("bonferroni", "none"), f"{path}.correction", "must be bonferroni or none")


@dataclass
class PipelineConfig:
    seed: int = 0
    run_dir: str = "runs/default"
    threads: int = 1
    task: TaskConfig = field(default_factory=TaskConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    spd: SpdConfig = field(default_factory=SpdConfig)
    selfdistill: SelfDistillConfig = field(default_factory=SelfDistillConfig)
    apo: ApoSection = field(default_factory=ApoSection)
    drift: DriftConfig = field(default_factory=DriftConfig)

    def validate(self) -> "PipelineConfig":
        _check(isinstance(self.seed, int) and self.seed >= 0, "seed", "must be a non-negative integer")
        _check(self.threads >= 1, "threads", "must be >= 1")
        for f in dataclasses.fields(self):
            sub = getattr(self, f.name)
            if dataclasses.is_dataclass(sub):
                sub.validate(f.name)
        # drift windows compare revisits of the same contexts
        _check(self.apo.weights != "drift" or self.corpus.rounds >= 2, "apo.weights", "drift weighting needs corpus.rounds >= 2")
        return self

    def snapshot(self) -> dict:
        """Everything that determines results (run location and threads excluded)."""
        d = dataclasses.asdict(self)
        d.pop("run_dir")
        d.pop("threads")
        return d

    def override(self, dotted: str, value) -> None:
        parts = dotted.split(".")
        obj = self
        for p in parts[:-1]:
            obj = getattr(obj, p)
        if not hasattr(obj, parts[-1]):
            raise ConfigError(f"{dotted}: unknown field")
        setattr(obj, parts[-1], value)


def _check(ok: bool, path: str, msg: str) -> None:
    if not ok:
        raise ConfigError(f"{path}: {msg}")


def _build(cls, data, path: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in fields:
            raise ConfigError(f"{where}: unknown field")
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, where)
        else:
            kwargs[key] = _coerce(default, value, where)
    return cls(**kwargs)


def _coerce(default, value, where):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            value = [value]
        try:
            return [float(v) for v in value]
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected a list of numbers") from None
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def from_dict(data: dict | None) -> PipelineConfig:
    return _build(PipelineConfig, data or {}, "").validate()


def load_config(path=None) -> PipelineConfig:
    if path is None:
        return PipelineConfig().validate()
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML: {e}") from e
    return from_dict(data)


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(dataclasses.asdict(cfg), sort_keys=True)
