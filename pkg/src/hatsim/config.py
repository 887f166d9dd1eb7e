"""Experiment configuration: nested dataclasses read from a sectioned ``key = value`` file.

Example::

    [task]
    num_classes = 5
    input_dim = 8

    [selection]
    eta = 0.25

    [training]
    b = auto

Unknown sections or keys and badly typed values raise :class:`ConfigError`
with the offending line number.
"""
from __future__ import annotations

import configparser
import dataclasses
import re
import typing
from dataclasses import dataclass, field

from .errors import ConfigError, InvalidInputError
from .injection import FUSIONS, INJECTIONS
from .selection import SELECTION_STRATEGIES


@dataclass(frozen=True)
class TaskConfig:
    num_classes: int = 5
    input_dim: int = 8
    stddev: float = 2.0
    prototype_scale: float = 2.0


@dataclass(frozen=True)
class FleetConfig:
    n_sources: int = 10
    samples_per_domain: int = 400
    source_gamma: float = 1.0
    source_labels: int = 4  # classes per source domain; 0 keeps all
    target_labels: int = 0
    max_angle: float = 1.2
    max_translation: float = 1.5
    scale_min: float = 0.8
    scale_max: float = 1.25
    source_epochs: int = 300
    source_lr: float = 0.1
    library: tuple = ((64, 32), (96, 48), (128, 64))


@dataclass(frozen=True)
class TargetConfig:
    gamma: float = 0.1
    samples: int = 0  # 0 -> fleet.samples_per_domain
    max_param_count: int = 1_000_000
    max_flops: int = 1_000_000


@dataclass(frozen=True)
class SelectionSection:
    eta: float = 0.25
    omega: float = 0.75
    n_p: int = 3
    per_class_entropy: bool = False
    target_true_labels: bool = False


@dataclass(frozen=True)
class TrainingSection:
    epochs_target: int = 200
    epochs_mixer: int = 100
    lr_target: float = 0.1
    lr_mixer: float = 0.1
    d_common: int = 32
    unlabeled_ratio: float = 1.0
    m: float = 2.0
    b: typing.Optional[float] = None  # None -> best selected-source accuracy + b_margin
    b_margin: float = 0.02
    fixed_alpha: float = 1.0
    kd_full_refresh: bool = False
    distill_labeled: bool = False


@dataclass(frozen=True)
class StrategySpec:
    selection: str = "hat"
    fusion: str = "hat_mixer"
    injection: str = "hat_adaptive"

    def __post_init__(self):
        if self.selection not in SELECTION_STRATEGIES:
            raise InvalidInputError(f"unknown selection {self.selection!r}")
        if self.fusion not in FUSIONS:
            raise InvalidInputError(f"unknown fusion {self.fusion!r}")
        if self.injection not in INJECTIONS:
            raise InvalidInputError(f"unknown injection {self.injection!r}")

    @property
    def name(self) -> str:
        for k, v in PRESETS.items():
            if v == self:
                return k
        return f"{self.selection}/{self.fusion}/{self.injection}"


PRESETS = {
    "hat": StrategySpec("hat", "hat_mixer", "hat_adaptive"),
    "supervised": StrategySpec("hat", "hat_mixer", "none"),
    "equal_distill": StrategySpec("hat", "equal", "fixed_alpha"),
    "nearest_distill": StrategySpec("hat", "nearest", "fixed_alpha"),
    "weighted_distill": StrategySpec("hat", "weighted", "fixed_alpha"),
    "random_select": StrategySpec("random", "hat_mixer", "hat_adaptive"),
    "accuracy_select": StrategySpec("accuracy_only", "hat_mixer", "hat_adaptive"),
    "no_coarse": StrategySpec("all", "hat_mixer", "hat_adaptive"),
}


def parse_strategy(name: str) -> StrategySpec:
    """A preset name or ``selection/fusion/injection``."""
    if name in PRESETS:
        return PRESETS[name]
    parts = name.split("/")
    if len(parts) != 3:
        raise InvalidInputError(f"unknown strategy {name!r}; presets: {', '.join(PRESETS)}")
    return StrategySpec(*parts)


@dataclass(frozen=True)
class MrseConfig:
    layout: tuple = (8, 4, 4, 4, 4)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    task: TaskConfig = field(default_factory=TaskConfig)
    fleet: FleetConfig = field(default_factory=FleetConfig)
    target: TargetConfig = field(default_factory=TargetConfig)
    selection: SelectionSection = field(default_factory=SelectionSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    strategy: StrategySpec = field(default_factory=StrategySpec)
    mrse: MrseConfig = field(default_factory=MrseConfig)

    def replace(self, **changes) -> "ExperimentConfig":
        """Override nested fields with dotted keys, e.g. ``replace(**{"selection.eta": 0.5})``."""
        cfg = self
        for key, value in changes.items():
            if "." in key:
                section, name = key.split(".", 1)
                sub = dataclasses.replace(getattr(cfg, section), **{name: value})
                cfg = dataclasses.replace(cfg, **{section: sub})
            else:
                cfg = dataclasses.replace(cfg, **{key: value})
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


SECTIONS = ("task", "fleet", "target", "selection", "training", "strategy", "mrse")


def _coerce(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        if raw.strip().lower() in ("auto", "none", ""):
            return None
        tp = next(a for a in typing.get_args(tp) if a is not type(None))
    if tp is bool:
        v = raw.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if tp is int:
        return int(raw.replace("_", ""))
    if tp is float:
        return float(raw)
    if tp is str:
        return raw.strip()
    if tp is tuple:
        if key == "library":
            return tuple(tuple(int(x) for x in part.split("x")) for part in re.split(r"[,\s]+", raw.strip()) if part)
        return tuple(int(x) for x in re.split(r"[,\s]+", raw.strip()) if x)
    raise ValueError(f"{key}: unsupported type {tp}")


def _line_of(text: str, section: str | None, key: str | None) -> int | None:
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[(.+)\]", s)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return n
            continue
        if key is not None and current == section and re.match(rf"{re.escape(key)}\s*[=:]", s):
            return n
    return None


def loads(text: str) -> ExperimentConfig:
    """Parse configuration text; unspecified keys keep their defaults."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("expected a [section] header", exc.lineno) from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError(f"cannot parse: {exc.errors[0][1].strip() if exc.errors else exc}", line) from None
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], getattr(exc, "lineno", None)) from None

    cfg = ExperimentConfig()
    top = {}
    for section in cp.sections():
        if section == "run":
            for key, raw in cp.items(section):
                if key != "seed":
                    raise ConfigError(f"unknown key {key!r} in [run]", _line_of(text, section, key))
                try:
                    top["seed"] = int(raw)
                except ValueError as exc:
                    raise ConfigError(str(exc), _line_of(text, section, key)) from None
            continue
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", _line_of(text, section, None))
        cls = type(getattr(cfg, section))
        hints = typing.get_type_hints(cls)
        values = {}
        for key, raw in cp.items(section):
            if key not in hints:
                raise ConfigError(f"unknown key {key!r} in [{section}]", _line_of(text, section, key))
            try:
                values[key] = _coerce(raw, hints[key], key)
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {exc}", _line_of(text, section, key)) from None
        try:
            top[section] = dataclasses.replace(getattr(cfg, section), **values)
        except InvalidInputError as exc:
            raise ConfigError(f"[{section}] {exc}", _line_of(text, section, None)) from None
    cfg = dataclasses.replace(cfg, **top)
    validate(cfg, text)
    return cfg


def load(path) -> ExperimentConfig:
    with open(path) as fh:
        return loads(fh.read())


def validate(cfg: ExperimentConfig, text: str = "") -> None:
    checks = [
        ("task", "num_classes", cfg.task.num_classes >= 2),
        ("task", "input_dim", cfg.task.input_dim >= 2),
        ("task", "stddev", cfg.task.stddev > 0),
        ("fleet", "n_sources", cfg.fleet.n_sources >= 1),
        ("fleet", "samples_per_domain", cfg.fleet.samples_per_domain >= 10),
        ("fleet", "source_gamma", 0 < cfg.fleet.source_gamma <= 1),
        ("fleet", "source_labels", cfg.fleet.source_labels == 0 or 2 <= cfg.fleet.source_labels <= cfg.task.num_classes),
        ("fleet", "target_labels", cfg.fleet.target_labels == 0 or 2 <= cfg.fleet.target_labels <= cfg.task.num_classes),
        ("fleet", "library", len(cfg.fleet.library) > 0 and all(len(s) > 0 for s in cfg.fleet.library)),
        ("target", "gamma", 0 < cfg.target.gamma <= 1),
        ("selection", "eta", 0 < cfg.selection.eta <= 1),
        ("selection", "omega", 0 < cfg.selection.omega <= 1),
        ("selection", "n_p", cfg.selection.n_p >= 1),
        ("training", "m", cfg.training.m > 0),
        ("training", "b", cfg.training.b is None or 0 <= cfg.training.b <= 1),
        ("training", "lr_target", cfg.training.lr_target > 0),
        ("training", "lr_mixer", cfg.training.lr_mixer > 0),
        ("mrse", "layout", len(cfg.mrse.layout) >= 2 and all(c >= 1 for c in cfg.mrse.layout)),
    ]
    for section, key, ok in checks:
        if not ok:
            value = getattr(getattr(cfg, section), key)
            raise ConfigError(f"invalid {section}.{key} = {value!r}", _line_of(text, section, key) if text else None)


def dumps(cfg: ExperimentConfig) -> str:
    """Serialise back to the sectioned format (round-trips through :func:`loads`)."""
    out = ["[run]", f"seed = {cfg.seed}", ""]
    for section in SECTIONS:
        out.append(f"[{section}]")
        for f in dataclasses.fields(getattr(cfg, section)):
            v = getattr(getattr(cfg, section), f.name)
            if v is None:
                v = "auto"
            elif f.name == "library":
                v = ", ".join("x".join(str(d) for d in s) for s in v)
            elif isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            out.append(f"{f.name} = {v}")
        out.append("")
    return "\n".join(out)
