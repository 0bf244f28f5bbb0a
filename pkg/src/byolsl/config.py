"""Flat ``section.key = value`` config files mapped onto dataclasses.

Lines are ``section.key = value``; ``#`` starts a comment. Tuples are
comma-separated, booleans are ``true``/``false``, empty strings are written
as nothing after the ``=``. Unknown sections or keys are an error.
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .augment import AugmentConfig
from .data import SyntheticSpec
from .loss import ConfigError, LossConfig
from .model import DEFAULT_TAU, EncoderConfig


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    return "" if value is None else str(value)


def _parse(text: str, hint, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    text = text.strip()
    try:
        if origin is typing.Union or (origin is not None and type(None) in args):
            inner = [a for a in args if a is not type(None)]
            if text == "":
                return None
            return _parse(text, inner[0], key)
        if origin in (tuple, list):
            if text == "":
                return ()
            parts = [p for p in text.split(",")]
            elem = args[0] if args else str
            return tuple(_parse(p, elem, key) for p in parts)
        if hint is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {getattr(hint, '__name__', hint)}") from None


def section_items(obj) -> list[tuple[str, str]]:
    return [(f.name, _format(getattr(obj, f.name))) for f in dataclasses.fields(obj)]


def dump(sections: dict[str, object]) -> str:
    lines = []
    for name, obj in sections.items():
        for key, value in section_items(obj):
            lines.append(f"{name}.{key} = {value}".rstrip())
    return "\n".join(lines) + "\n"


def parse_text(text: str, source: str = "<config>") -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if "." not in key:
            raise ConfigError(f"{source}:{lineno}: key {key!r} has no section prefix")
        section, _, name = key.partition(".")
        out.setdefault(section, {})[name] = value.strip()
    return out


def apply(obj, values: dict[str, str], section: str):
    """Return a copy of dataclass ``obj`` with ``values`` parsed onto it."""
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(f'{section}.{k}' for k in unknown)}")
    updates = {k: _parse(v, hints[k], f"{section}.{k}") for k, v in values.items()}
    try:
        return dataclasses.replace(obj, **updates)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def load_sections(defaults: dict[str, object], text: str, source: str = "<config>") -> dict[str, object]:
    parsed = parse_text(text, source)
    unknown = sorted(set(parsed) - set(defaults))
    if unknown:
        keys = [f"{s}.{k}" for s in unknown for k in parsed[s]]
        raise ConfigError(f"unknown keys: {', '.join(keys)}")
    return {name: apply(obj, parsed.get(name, {}), name) for name, obj in defaults.items()}


def read_file(path) -> str:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return path.read_text()


# ------------------------------------------------------------------ run config

ROOT_ENV = "BYOLSL_OUTPUT_ROOT"
PROFILES = ("desk", "paper")


@dataclasses.dataclass
class OptimConfig:
    lr: float = 0.008
    momentum: float = 0.9


@dataclasses.dataclass
class TrainConfig:
    tau: float = DEFAULT_TAU
    batch_size: int = 512
    epochs: int = 1
    max_steps: int = 0
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0
    output_dir: str = ""
    warm_start: str = ""
    deterministic: bool = False
    strict_collapse: bool = False
    collapse_floor: float = 1e-3
    collapse_patience: int = 100
    dtype: str = "float32"
    freeze_bn: bool = False

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"train.tau must lie in [0, 1], got {self.tau}")
        if self.batch_size < 1 or self.epochs < 0 or self.max_steps < 0:
            raise ConfigError("train.batch_size must be >= 1; epochs and max_steps >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("train.dtype must be float32 or float64")


@dataclasses.dataclass
class DataConfig:
    source: str = "synthetic"
    path: str = ""
    split: str = "unlabeled"
    mean: tuple[float, ...] = ()
    std: tuple[float, ...] = ()

    def __post_init__(self):
        if self.source not in ("synthetic", "stl10"):
            raise ConfigError(f"data.source must be synthetic or stl10, got {self.source!r}")


@dataclasses.dataclass
class ProbeConfig:
    lr: float = 0.008
    momentum: float = 0.9
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    min_delta: float = 1e-4
    seed: int = 0
    standardize: bool = True


@dataclasses.dataclass
class RunConfig:
    model: EncoderConfig = dataclasses.field(default_factory=EncoderConfig)
    loss: LossConfig = dataclasses.field(default_factory=LossConfig)
    optim: OptimConfig = dataclasses.field(default_factory=OptimConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    synthetic: SyntheticSpec = dataclasses.field(default_factory=SyntheticSpec)
    augment: AugmentConfig = dataclasses.field(default_factory=lambda: AugmentConfig(blur_p=1.0))
    augment_prime: AugmentConfig = dataclasses.field(default_factory=lambda: AugmentConfig(blur_p=0.1))
    probe: ProbeConfig = dataclasses.field(default_factory=ProbeConfig)

    def sections(self) -> dict[str, object]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def to_text(self) -> str:
        return dump(self.sections())

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None, source: str = "<config>") -> "RunConfig":
        base = base or cls()
        return cls(**load_sections(base.sections(), text, source))

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)

    def model_text(self) -> str:
        return dump({"model": self.model})


def paper_profile() -> RunConfig:
    """ResNet-18 on STL10 with the reported optimizer settings."""
    return RunConfig(
        model=EncoderConfig(preset="resnet18", norm="bn", dropout=0.1),
        optim=OptimConfig(lr=0.008, momentum=0.9),
        train=TrainConfig(batch_size=512, epochs=100),
        data=DataConfig(source="stl10", split="unlabeled"),
        augment=AugmentConfig(size=96, blur_kernel=9, blur_p=1.0),
        augment_prime=AugmentConfig(size=96, blur_kernel=9, blur_p=0.1),
    )


def desk_profile() -> RunConfig:
    """Tiny CNN on the synthetic shapes; minutes on a laptop CPU."""
    return RunConfig(
        model=EncoderConfig(preset="tiny-cnn", width=64, dropout=0.0),
        optim=OptimConfig(lr=0.2, momentum=0.9),
        train=TrainConfig(batch_size=64, epochs=1000, max_steps=2000),
        data=DataConfig(source="synthetic"),
        synthetic=SyntheticSpec(classes=4, per_class=500, image_size=32),
        augment=AugmentConfig(size=32, blur_p=1.0),
        augment_prime=AugmentConfig(size=32, blur_p=0.1),
    )


def profile(name: str) -> RunConfig:
    if name == "paper":
        return paper_profile()
    if name == "desk":
        return desk_profile()
    raise ConfigError(f"unknown profile {name!r}; expected one of {PROFILES}")


def load_run_config(path=None, profile_name: str = "desk") -> RunConfig:
    base = profile(profile_name)
    if path is None:
        return base
    return RunConfig.from_text(read_file(path), base, str(path))
