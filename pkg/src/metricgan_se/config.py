"""Run configuration: one flat ``section.key = value`` text file.

Example::

    # toy run
    generator.d_model = 16
    generator.frontend = [[16, 3, 1], [16, 3, 1]]
    train.lr = 2e-3
    data.n_pairs = 36

Values are Python literals (numbers, strings, lists); bare words are read
as strings.  Lines starting with ``#`` are comments.  Unknown keys are an
error so typos never pass silently.
"""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .discriminator import DiscriminatorConfig
from .generator import GeneratorConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_pairs: int = 36
    duration: float = 1.0
    snrs: tuple = (0.0, 5.0, 10.0)
    noises: tuple = ("white", "pink")
    train_fraction: float = 0.75
    split_seed: int = 0
    seed: int = 100

    def __post_init__(self):
        object.__setattr__(self, "snrs", tuple(float(s) for s in self.snrs))
        object.__setattr__(self, "noises", tuple(str(n) for n in self.noises))
        if self.n_pairs < 2:
            raise ValueError("data.n_pairs must be >= 2")


@dataclass
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @classmethod
    def toy(cls) -> RunConfig:
        """Small preset that trains end to end in a few minutes on one core."""
        return cls(
            generator=GeneratorConfig.toy(d_model=16, n_heads=2, d_k=8, d_ff=32,
                                          frontend=((16, 3, 1), (16, 3, 1))),
            discriminator=DiscriminatorConfig.toy(),
            train=TrainConfig(**TOY_TRAIN),
            data=DataConfig(n_pairs=36, duration=0.5),
        )

    def items(self) -> list[tuple[str, object]]:
        out = []
        for section in SECTIONS:
            for f in dataclasses.fields(getattr(self, section)):
                out.append((f"{section}.{f.name}", getattr(getattr(self, section), f.name)))
        return out

    def dumps(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.items())

    def override(self, updates: dict[str, object]) -> RunConfig:
        """New config with ``section.key`` values replaced (validated)."""
        grouped: dict[str, dict] = {}
        valid = dict(self.items())
        for key, value in updates.items():
            if key not in valid:
                raise ConfigError(f"unknown config key {key!r}")
            section, name = key.split(".", 1)
            grouped.setdefault(section, {})[name] = value
        parts = {}
        for section in SECTIONS:
            current = getattr(self, section)
            if section in grouped:
                try:
                    current = dataclasses.replace(current, **grouped[section])
                except (TypeError, ValueError) as e:
                    raise ConfigError(f"invalid {section} settings: {e}") from e
            parts[section] = current
        return RunConfig(**parts)


SECTIONS = ("generator", "discriminator", "train", "data")

TOY_TRAIN = dict(lr=2e-3, max_epochs=60, patience=4, d_lr=1e-3, d_warmup_steps=200,
                 finetune_epochs=6, finetune_lr_scale=0.01)


def format_value(v) -> str:
    if isinstance(v, tuple):
        v = _listify(v)
    return repr(v)


def _listify(v):
    return [_listify(x) for x in v] if isinstance(v, (list, tuple)) else v


def parse_value(text: str):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_text(text: str, source: str = "<config>") -> dict[str, object]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key.count(".") != 1:
            raise ConfigError(f"{source}:{lineno}: key {key!r} must look like 'section.name'")
        values[key] = parse_value(value)
    return values


def parse_assignment(text: str) -> tuple[str, object]:
    """``key=value`` from a command-line override."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, value = text.split("=", 1)
    return key.strip(), parse_value(value)


def load(path, base: RunConfig | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return (base or RunConfig()).override(parse_text(path.read_text(), str(path)))
