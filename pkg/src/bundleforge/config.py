"""Flat ``key=value`` experiment configuration.

Training keys use the ``TrainConfig`` field names (``temperature``,
``distill_weight``, ``l2`` ...).  Generator keys carry a ``synth.`` prefix and
LightGCN keys a ``feedback.`` prefix; both stages take their seed from the root
``seed``.  Lists are comma separated.  ``#`` starts a comment.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .corpus import ConfigError, Scenario, SynthConfig
from .diet import DistillMode, TrainConfig


@dataclass
class FeedbackConfig:
    d: int = 64
    layers: int = 2
    epochs: int = 30
    lr: float = 0.01
    reg: float = 1e-4
    batch_size: int = 2048


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    feedback: FeedbackConfig = field(default_factory=FeedbackConfig)
    data_dir: str = ""
    out: str = "runs"
    head_ratio: float = 0.3
    tail_ratio: float = 0.3
    scenarios: tuple = ("overall", "pop2lt", "lt2pop", "pop2pop", "lt2lt")
    ks: tuple = (20, 40)
    sweep_ratios: tuple = (0.5, 0.4, 0.3, 0.2, 0.1)
    bins: int = 50

    @property
    def seed(self) -> int:
        return self.train.seed

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, seed=seed))

    def validate(self) -> "ExperimentConfig":
        self.train.validate()
        if not (0 < self.head_ratio <= 1 and 0 <= self.tail_ratio <= 1) or self.head_ratio + self.tail_ratio > 1:
            raise ConfigError(f"bad popularity ratios {self.head_ratio}/{self.tail_ratio}")
        for s in self.scenarios:
            Scenario(s)
        if not self.ks or min(self.ks) <= 0:
            raise ConfigError("ks must be positive")
        if self.bins < 1:
            raise ConfigError("bins must be >= 1")
        return self


_TOP = ("data_dir", "out", "head_ratio", "tail_ratio", "scenarios", "ks", "sweep_ratios", "bins")


def _settable(cls) -> list:
    # the generator seed always follows the root seed
    return [f.name for f in fields(cls) if f.name != "seed"]


def _lookup(key: str):
    """(section attribute or None, field name, default value) for a flat key."""
    if key in _TOP:
        return None, key, getattr(ExperimentConfig(), key)
    for prefix, cls, attr in (("synth.", SynthConfig, "synth"), ("feedback.", FeedbackConfig, "feedback")):
        if key.startswith(prefix):
            name = key[len(prefix):]
            if name in _settable(cls):
                return attr, name, getattr(cls(), name)
            return None
    if key in {f.name for f in fields(TrainConfig)}:
        return "train", key, getattr(TrainConfig(), key)
    return None


def _parse(raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(raw)
    if isinstance(default, DistillMode):
        return DistillMode(raw)
    if isinstance(default, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        kind = type(default[0]) if default else str
        return tuple(kind(p) for p in parts)
    return type(default)(raw)


def _format(value) -> str:
    if isinstance(value, DistillMode):
        return value.value
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_config(text: str, source: str = "<config>", overrides: dict | None = None) -> ExperimentConfig:
    values = {"train": {}, "synth": {}, "feedback": {}, None: {}}
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        entries.append((key, raw, f"{source}:{lineno}"))
    for key, raw in (overrides or {}).items():
        entries.append((key, str(raw), "override"))
    for key, raw, where in entries:
        found = _lookup(key)
        if found is None:
            raise ConfigError(f"{where}: unknown key {key!r}")
        section, name, default = found
        try:
            values[section][name] = _parse(raw, default)
        except (ValueError, TypeError):
            raise ConfigError(f"{where}: bad value {raw!r} for key {key!r}") from None
    try:
        cfg = ExperimentConfig(
            train=TrainConfig(**values["train"]),
            synth=SynthConfig(**values["synth"]),
            feedback=FeedbackConfig(**values["feedback"]),
            **values[None],
        )
        return cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    if path is not None and not Path(path).is_file():
        raise ConfigError(f"config file {path} does not exist")
    text = "" if path is None else Path(path).read_text()
    return parse_config(text, str(path or "<defaults>"), overrides)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        lines.append(f"{f.name}={_format(getattr(cfg.train, f.name))}")
    for name in _TOP:
        lines.append(f"{name}={_format(getattr(cfg, name))}")
    for name in _settable(SynthConfig):
        lines.append(f"synth.{name}={_format(getattr(cfg.synth, name))}")
    for f in fields(FeedbackConfig):
        lines.append(f"feedback.{f.name}={_format(getattr(cfg.feedback, f.name))}")
    return "\n".join(lines) + "\n"
