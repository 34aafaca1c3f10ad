"""Flat ``key = value`` run configuration shared by the command-line tools."""

from __future__ import annotations

import os
import types
import typing
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .fusion import FusionConfig
from .text_model import TextCnnConfig
from .training import TrainHyper
from .vision import VisionConfig

ENV_VAR = "DOCFUSE_CONFIG"
MODALITIES = ("text", "image", "fusion")


@dataclass
class RunConfig:
    """Every setting the CLI understands.  ``None`` means "use the preset's value"."""

    seed: int = 0
    modality: str = "fusion"
    # optimisation
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 40
    epochs: int | None = None
    # text branch
    text_preset: str = "desk"
    text_depth: int | None = None
    text_channels: int | None = None
    text_window: int | None = None
    text_max_len: int | None = None
    text_embed_dim: int | None = None
    text_num_buckets: int | None = None
    text_dropout: float | None = None
    text_batchnorm: bool | None = None
    text_trainable_embeddings: bool | None = None
    text_embed_init_std: float | None = None
    hash_seed: int = 0
    # image branch
    vision_preset: str = "desk"
    vision_input_size: int | None = None
    vision_head_dim: int | None = None
    vision_linear_bottleneck: bool | None = None
    # fusion classifier
    fusion_kind: str = "concat"
    fusion_hidden: str = "256,256"
    fusion_dropout: float = 0.5
    fusion_init: str = "scratch"

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.text_preset not in ("full", "desk"):
            raise ConfigError(f"text_preset must be full or desk, got {self.text_preset!r}")
        if self.fusion_init not in ("scratch", "from_pretrained_branches"):
            raise ConfigError(f"fusion_init must be scratch or from_pretrained_branches, got {self.fusion_init!r}")
        self.hidden_widths()

    # -- builders ------------------------------------------------------------
    def hidden_widths(self) -> tuple[int, ...]:
        try:
            widths = tuple(int(w) for w in self.fusion_hidden.split(",") if w.strip())
        except ValueError:
            raise ConfigError(f"fusion_hidden must be comma-separated integers, got {self.fusion_hidden!r}") from None
        return widths

    def _overrides(self, prefix: str) -> dict:
        return {f.name[len(prefix):]: getattr(self, f.name) for f in fields(self)
                if f.name.startswith(prefix) and f.name != prefix + "preset" and getattr(self, f.name) is not None}

    def text_config(self, num_classes: int) -> TextCnnConfig:
        base = TextCnnConfig(num_classes=num_classes) if self.text_preset == "full" \
            else TextCnnConfig.desk(num_classes)
        return replace(base, hash_seed=self.hash_seed, **self._overrides("text_"))

    def vision_config(self, num_classes: int) -> VisionConfig:
        return replace(VisionConfig.preset(self.vision_preset, num_classes), **self._overrides("vision_"))

    def fusion_config(self, num_classes: int) -> FusionConfig:
        return FusionConfig(text=self.text_config(num_classes), vision=self.vision_config(num_classes),
                            num_classes=num_classes, fusion_kind=self.fusion_kind,
                            hidden_widths=self.hidden_widths(), dropout=self.fusion_dropout)

    def hyper(self) -> TrainHyper:
        epochs = self.epochs if self.epochs is not None else (100 if self.modality == "text" else 200)
        return TrainHyper(self.learning_rate, self.momentum, self.batch_size, epochs)

    # -- text form -----------------------------------------------------------
    def as_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if value is not None:
                lines.append(f"{key} = {str(value).lower() if isinstance(value, bool) else value}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, pairs: dict[str, str]) -> "RunConfig":
        return replace(self, **{k: _convert(k, v) for k, v in pairs.items()})


def _field_type(key: str):
    hints = typing.get_type_hints(RunConfig)
    if key not in hints:
        known = ", ".join(f.name for f in fields(RunConfig))
        raise ConfigError(f"unknown config key {key!r}; known keys: {known}")
    t = hints[key]
    if isinstance(t, types.UnionType) or typing.get_origin(t) is typing.Union:
        t = next(a for a in typing.get_args(t) if a is not type(None))
    return t


def _convert(key: str, raw: str):
    t = _field_type(key)
    raw = raw.strip()
    if raw.lower() in ("none", ""):
        return None
    try:
        if t is bool:
            if raw.lower() in ("true", "yes", "1", "on"):
                return True
            if raw.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        return t(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {t.__name__}") from None


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    pairs = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: line {n}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            _field_type(key)
        except ConfigError as exc:
            raise ConfigError(f"{source}: line {n}: {exc}") from None
        pairs[key] = value
    return pairs


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults <- config file (``path`` or ``$DOCFUSE_CONFIG``) <- ``overrides``."""
    path = path or os.environ.get(ENV_VAR)
    pairs: dict[str, str] = {}
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        pairs.update(parse_pairs(text, str(path)))
    pairs.update(overrides or {})
    return RunConfig().with_overrides(pairs)
