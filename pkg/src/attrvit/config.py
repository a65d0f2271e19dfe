"""Structured-text configuration shared by every command.

A config file is flat ``key = value`` lines; ``#`` starts a comment.
Keys are qualified as ``section.field`` over the sections ``data``,
``gen``, ``train``, ``encoder``, ``attr``, ``loss``, ``eval``, and
``ablate``. Command-line overrides use the same keys; a bare field name
is accepted when only one section defines it, or when the active
command prefers one of the candidate sections. Unknown keys are
rejected. ``train.num_classes`` is not a key: it is always derived from
``data.classes``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

from .attributes import AttributeConfig
from .data import SceneSpec
from .encoder import ConfigError, EncoderConfig
from .losses import LossConfig
from .train import TrainConfig


@dataclass(frozen=True)
class GenOptions:
    """Dataset emission settings."""

    count: int = 256

    def __post_init__(self) -> None:
        if self.count < 0:
            raise ConfigError("gen.count must be non-negative")


@dataclass(frozen=True)
class EvalOptions:
    """Evaluation settings: background threshold, optional eval-time
    pixel noise, and whether to score the averaged branch instead of
    the learned one."""

    bg_threshold: float = 0.3
    noise_sigma: float = 0.0
    noise_seed: int = 0
    batch_size: int = 16
    use_ema: bool = False
    baseline: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.bg_threshold <= 1.0:
            raise ConfigError("eval.bg_threshold must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ConfigError("eval.noise_sigma must be non-negative")
        if self.batch_size <= 0:
            raise ConfigError("eval.batch_size must be positive")


@dataclass(frozen=True)
class AblateOptions:
    """Sweep grid: comma-separated lists, empty meaning "keep the
    configured value". Attribute cells are ``count:width`` pairs."""

    variants: str = "full,global"
    fuse_layers: str = ""
    attributes: str = ""
    seeds: str = "0,1,2"
    budget: int = 60

    def __post_init__(self) -> None:
        if self.budget <= 0:
            raise ConfigError("ablate.budget must be positive")


@dataclass(frozen=True)
class RunConfig:
    """Everything one command run can see."""

    data: SceneSpec = field(default_factory=SceneSpec)
    gen: GenOptions = field(default_factory=GenOptions)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)
    ablate: AblateOptions = field(default_factory=AblateOptions)


_SECTION_TYPES: dict[str, type] = {
    "data": SceneSpec,
    "gen": GenOptions,
    "train": TrainConfig,
    "encoder": EncoderConfig,
    "attr": AttributeConfig,
    "loss": LossConfig,
    "eval": EvalOptions,
    "ablate": AblateOptions,
}

# Derived or internal fields that are not part of the public key set.
_HIDDEN = {"train.num_classes"}

# Bare-name tie-breaking order per command.
COMMAND_SCOPES: dict[str, tuple[str, ...]] = {
    "gen": ("data", "gen"),
    "train": ("train", "loss", "encoder", "attr", "data"),
    "eval": ("eval", "loss", "encoder"),
    "explain": ("eval", "loss"),
    "ablate": ("ablate", "train", "loss", "encoder", "attr", "data"),
    "gradcheck": ("train", "encoder"),
}


def _section_defaults(cls) -> dict[str, object]:
    out: dict[str, object] = {}
    for f in fields(cls):
        if f.default is not dataclasses.MISSING:
            default = f.default
        else:
            default = f.default_factory()  # type: ignore[misc]
        if dataclasses.is_dataclass(default):
            continue
        out[f.name] = default
    return out


def _schema() -> dict[str, object]:
    keys: dict[str, object] = {}
    for section, cls in _SECTION_TYPES.items():
        for name, default in _section_defaults(cls).items():
            qualified = f"{section}.{name}"
            if qualified not in _HIDDEN:
                keys[qualified] = default
    return keys


_SCHEMA = _schema()


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(raw: str, like, key: str):
    """Convert a raw string to the type of the default value."""
    try:
        if isinstance(like, bool):
            lowered = raw.strip().lower()
            if lowered not in ("true", "false"):
                raise ValueError(raw)
            return lowered == "true"
        if isinstance(like, int):
            return int(raw.strip())
        if isinstance(like, float):
            return float(raw.strip())
        if isinstance(like, tuple):
            return tuple(part.strip() for part in raw.split(",") if part.strip())
        return raw.strip()
    except ValueError:
        kind = type(like).__name__
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


def resolve_key(key: str, command: str) -> str:
    """Qualify a key, expanding bare field names against the command's
    preferred sections."""
    key = key.strip()
    if "." in key:
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        return key
    matches = [q for q in _SCHEMA if q.split(".", 1)[1] == key]
    if not matches:
        raise ConfigError(f"unknown config key {key!r}")
    if len(matches) == 1:
        return matches[0]
    for section in COMMAND_SCOPES.get(command, ()):
        qualified = f"{section}.{key}"
        if qualified in matches:
            return qualified
    options = ", ".join(sorted(matches))
    raise ConfigError(f"ambiguous key {key!r}: use one of {options}")


def parse_text(text: str) -> dict[str, str]:
    """Raw key/value pairs from ``key = value`` lines. Later lines win."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values


def _build_section(cls, section: str, raw: dict[str, str]):
    kwargs = {}
    for name, default in _section_defaults(cls).items():
        qualified = f"{section}.{name}"
        if qualified in raw:
            kwargs[name] = parse_value(raw[qualified], default, qualified)
    return kwargs


def build_config(raw: dict[str, str]) -> RunConfig:
    """A RunConfig from qualified raw values; section validation runs
    through each dataclass constructor."""
    data = SceneSpec(**_build_section(SceneSpec, "data", raw))
    gen = GenOptions(**_build_section(GenOptions, "gen", raw))
    encoder = EncoderConfig(**_build_section(EncoderConfig, "encoder", raw))
    attr = AttributeConfig(**_build_section(AttributeConfig, "attr", raw))
    loss = LossConfig(**_build_section(LossConfig, "loss", raw))
    train = TrainConfig(
        encoder=encoder,
        attr=attr,
        loss=loss,
        num_classes=len(data.classes),
        **_build_section(TrainConfig, "train", raw),
    )
    options = EvalOptions(**_build_section(EvalOptions, "eval", raw))
    ablate = AblateOptions(**_build_section(AblateOptions, "ablate", raw))
    return RunConfig(data=data, gen=gen, train=train, eval=options, ablate=ablate)


def load_config(
    path=None, overrides: list[str] | tuple[str, ...] = (), command: str = "train"
) -> tuple[RunConfig, dict[str, str]]:
    """Defaults, then the config file, then ``key=value`` overrides.

    Returns the built config plus the qualified keys that were
    explicitly set, so commands can tell an override from a default.
    """
    raw: dict[str, str] = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
        for key, value in parse_text(text).items():
            raw[resolve_key(key, command)] = value
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, value = item.partition("=")
        raw[resolve_key(key, command)] = value.strip()
    return build_config(raw), raw


def _section_value(cfg: RunConfig, section: str):
    if section == "encoder":
        return cfg.train.encoder
    if section == "attr":
        return cfg.train.attr
    if section == "loss":
        return cfg.train.loss
    return getattr(cfg, section)


def serialize_config(cfg: RunConfig) -> str:
    """Every key with its resolved value, one per line, sorted."""
    lines = []
    for qualified in sorted(_SCHEMA):
        section, name = qualified.split(".", 1)
        lines.append(f"{qualified} = {format_value(getattr(_section_value(cfg, section), name))}")
    return "\n".join(lines) + "\n"


# --- the training-config subset used inside checkpoints ---------------------

_TRAIN_SECTIONS = ("train", "encoder", "attr", "loss")


def train_config_text(cfg: TrainConfig) -> str:
    """Serialize a TrainConfig (including derived fields) for embedding
    in a checkpoint."""
    holders = {"train": cfg, "encoder": cfg.encoder, "attr": cfg.attr, "loss": cfg.loss}
    lines = []
    for section in _TRAIN_SECTIONS:
        holder = holders[section]
        for name in sorted(_section_defaults(type(holder))):
            lines.append(f"{section}.{name} = {format_value(getattr(holder, name))}")
    return "\n".join(lines) + "\n"


def train_config_from_text(text: str) -> TrainConfig:
    """Rebuild a TrainConfig from checkpoint text; lines outside the
    training sections are ignored, unknown fields inside them are not."""
    raw: dict[str, str] = {}
    for key, value in parse_text(text).items():
        section = key.split(".", 1)[0]
        if section not in _TRAIN_SECTIONS:
            continue
        cls = _SECTION_TYPES[section]
        name = key.split(".", 1)[1]
        if name not in _section_defaults(cls):
            raise ConfigError(f"unknown config key {key!r}")
        raw[key] = value
    encoder = EncoderConfig(**_build_section(EncoderConfig, "encoder", raw))
    attr = AttributeConfig(**_build_section(AttributeConfig, "attr", raw))
    loss = LossConfig(**_build_section(LossConfig, "loss", raw))
    return TrainConfig(
        encoder=encoder, attr=attr, loss=loss, **_build_section(TrainConfig, "train", raw)
    )
