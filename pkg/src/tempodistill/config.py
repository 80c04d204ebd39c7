"""Unified run configuration with JSON persistence and environment overrides.

Every key can be overridden from the environment as
``TEMPODISTILL_<SECTION>__<KEY>``, e.g. ``TEMPODISTILL_DISTILL__N=50`` or
``TEMPODISTILL_SEED=3``. Values are parsed as JSON when possible and used as
plain strings otherwise.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .corpus import ClassSpec, ConfigError, CorpusConfig
from .distill import DistillConfig
from .encoder import TrainConfig
from .numkit import ContractError
from .policy import ActionSpace, DistillationEnvironment, RlConfig

ENV_PREFIX = "TEMPODISTILL_"


def teacher_defaults() -> TrainConfig:
    return TrainConfig(iterations=1000, batch_size=16, learning_rate=0.02, momentum=0.9)


def student_defaults() -> TrainConfig:
    return TrainConfig(iterations=500, batch_size=8, learning_rate=0.01, momentum=0.9)


@dataclass
class AnalysisConfig:
    n_groups: int = 4
    delta_k: int = 4
    # Selection size for the random and keyframe baselines.
    baseline_ipc: int = 1
    probe_noise: str = "common"
    # Also train students for the grid / naive-RL / early-RL searches in `costs`.
    cost_accuracy: bool = False
    resolutions: tuple = (1, 2, 4, 8)

    def validate(self) -> "AnalysisConfig":
        if self.n_groups < 1 or self.delta_k < 1 or self.baseline_ipc < 1:
            raise ConfigError("n_groups, delta_k and baseline_ipc must be >= 1")
        if self.probe_noise not in DistillationEnvironment.NOISE_MODES:
            raise ConfigError(f"probe_noise must be one of {DistillationEnvironment.NOISE_MODES}")
        self.resolutions = tuple(int(a) for a in self.resolutions)
        return self

    def action_space(self) -> ActionSpace:
        return ActionSpace(self.resolutions)


_SECTIONS = {
    "corpus": CorpusConfig,
    "teacher": TrainConfig,
    "student": TrainConfig,
    "distill": DistillConfig,
    "rl": RlConfig,
    "analysis": AnalysisConfig,
}


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    threads: int = 1
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    teacher: TrainConfig = field(default_factory=teacher_defaults)
    student: TrainConfig = field(default_factory=student_defaults)
    distill: DistillConfig = field(default_factory=DistillConfig)
    rl: RlConfig = field(default_factory=RlConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def resolved(self) -> "RunConfig":
        """Copy with the global seed pushed into every seeded section."""
        out = copy.deepcopy(self)
        for section in (out.corpus, out.teacher, out.student, out.rl):
            section.seed = int(out.seed)
        return out

    def validate(self) -> "RunConfig":
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        try:
            self.corpus.validate()
            self.distill.validate()
            self.rl.validate()
            self.analysis.validate()
            self.analysis.action_space().check_length(self.corpus.T)
            for name in ("teacher", "student"):
                t = getattr(self, name)
                if t.iterations < 1 or t.batch_size < 1 or t.learning_rate <= 0:
                    raise ConfigError(f"{name}: iterations, batch_size and learning_rate must be positive")
        except (ContractError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.analysis.delta_k > len(self.corpus.classes):
            raise ConfigError("analysis.delta_k exceeds the number of classes")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["corpus"] = self.corpus.to_dict()
        d["analysis"]["resolutions"] = list(self.analysis.resolutions)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            value = d[f.name]
            if f.name in _SECTIONS:
                kwargs[f.name] = _build_section(f.name, value)
            else:
                kwargs[f.name] = value
        cfg = cls(**kwargs)
        for name in ("seed", "threads"):
            try:
                setattr(cfg, name, int(getattr(cfg, name)))
            except (TypeError, ValueError):
                raise ConfigError(f"{name} must be an integer") from None
        cfg.out = str(cfg.out)
        return cfg


def _build_section(name: str, value) -> object:
    kind = _SECTIONS[name]
    if not isinstance(value, dict):
        raise ConfigError(f"section {name!r} must be an object")
    allowed = {f.name for f in fields(kind)}
    unknown = set(value) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    base = _SECTIONS_DEFAULTS[name]()
    merged = {**asdict(base), **value}
    if name == "corpus":
        merged["classes"] = [c if isinstance(c, dict) else asdict(c) for c in merged["classes"]]
    try:
        return kind(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


_SECTIONS_DEFAULTS = {
    "corpus": CorpusConfig,
    "teacher": teacher_defaults,
    "student": student_defaults,
    "distill": DistillConfig,
    "rl": RlConfig,
    "analysis": AnalysisConfig,
}


def _parse_env_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_env_overrides(d: dict, environ=None) -> dict:
    """Return a copy of ``d`` with every matching ``TEMPODISTILL_*`` variable applied."""
    environ = os.environ if environ is None else environ
    d = copy.deepcopy(d)
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].split("__")
        target = d
        for i, part in enumerate(path):
            match = [k for k in target if k.lower() == part.lower()]
            if not match:
                raise ConfigError(f"{key}: no config key {'.'.join(path[:i + 1]).lower()!r}")
            if i < len(path) - 1:
                if not isinstance(target[match[0]], dict):
                    raise ConfigError(f"{key}: {match[0]!r} is not a section")
                target = target[match[0]]
        path[-1] = match[0]
        target[path[-1]] = _parse_env_value(raw)
    return d


def load_config(path=None, environ=None) -> RunConfig:
    """Defaults, then the JSON file at ``path`` (if given), then environment overrides."""
    d = RunConfig().to_dict()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        d = _deep_merge(d, user)
    d = apply_env_overrides(d, environ)
    return RunConfig.from_dict(d).validate()


def _deep_merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


__all__ = ["AnalysisConfig", "ClassSpec", "ENV_PREFIX", "RunConfig", "apply_env_overrides",
           "load_config", "student_defaults", "teacher_defaults"]
