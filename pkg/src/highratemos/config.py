"""Flat key=value run configuration.

Keys are `section.field` (plus the top-level `seed`). Unknown keys are rejected.
The resolved form lists every key with defaults filled in, so a run can be
reproduced from its emitted config alone.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .encoders import make_encoder
from .errors import ConfigError
from .features import FeatureConfig, FeatureExtractor
from .losses import LossConfig
from .model import COMPONENTS, ModelConfig
from .training import TrainConfig


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "toy"
    dim: int = 64
    seed: int = 0
    path: str = ""
    freeze: bool = True


# fields supplied from other sections
_DERIVED_MODEL_FIELDS = {"d_enc", "n_mels", "n_mfcc"}
_TRAIN_SKIP = {"seed", "loss", "model"}
_VARIANT_TOGGLES = ("cross_attn", "mfcc")


def _section_fields():
    yield "feature", FeatureConfig, set()
    yield "encoder", EncoderConfig, set()
    yield "model", ModelConfig, _DERIVED_MODEL_FIELDS
    yield "loss", LossConfig, set()
    yield "train", TrainConfig, _TRAIN_SKIP


def _schema() -> dict[str, tuple[type, object]]:
    schema: dict[str, tuple[type, object]] = {"seed": (int, 0), "cv.k": (int, 5)}
    for section, cls, skip in _section_fields():
        defaults = cls()
        for f in dataclasses.fields(cls):
            if f.name in skip:
                continue
            value = getattr(defaults, f.name)
            schema[f"{section}.{f.name}"] = (type(value), value)
    return schema


SCHEMA = _schema()


def _coerce(key: str, raw, kind: type):
    if not isinstance(raw, str):
        return kind(raw)
    text = raw.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return lowered in ("true", "1", "yes")
        return kind(text)
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r} (expected {kind.__name__})") from None


def parse_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key '{key}'")
        if key in values:
            raise ConfigError(f"duplicate config key '{key}'")
        values[key] = value
    return values


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


class RunConfig:
    """Fully resolved flat configuration."""

    def __init__(self, values: dict):
        self.values = values

    @classmethod
    def resolve(cls, overrides: dict | None = None) -> "RunConfig":
        overrides = dict(overrides or {})
        for key in overrides:
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key '{key}'")
        values = {key: _coerce(key, overrides[key], kind) if key in overrides else default
                  for key, (kind, default) in SCHEMA.items()}
        variant = values["model.variant"]
        for toggle in _VARIANT_TOGGLES:
            if f"model.{toggle}" not in overrides:
                values[f"model.{toggle}"] = getattr(ModelConfig.for_variant(variant), toggle)
        cfg = cls(values)
        cfg.train_config()  # validates every section
        return cfg

    @classmethod
    def from_file(cls, path, extra: dict | None = None) -> "RunConfig":
        values = parse_text(Path(path).read_text()) if path else {}
        values.update(extra or {})
        return cls.resolve(values)

    def _section(self, section: str) -> dict:
        prefix = section + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(**self._section("feature"))

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(**self._section("encoder"))

    def model_config(self) -> ModelConfig:
        feat = self.feature_config()
        return ModelConfig(**self._section("model"), d_enc=self.encoder_config().dim,
                           n_mels=feat.n_mels, n_mfcc=feat.n_mfcc)

    def loss_config(self) -> LossConfig:
        return LossConfig(**self._section("loss"))

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self._section("train"), seed=self.seed, loss=self.loss_config(),
                           model=self.model_config())

    def make_extractor(self, cache_dir=None) -> FeatureExtractor:
        enc = self.encoder_config()
        encoder = make_encoder(enc.kind, dim=enc.dim, seed=enc.seed, path=enc.path, freeze=enc.freeze)
        return FeatureExtractor(self.feature_config(), encoder, cache_dir=cache_dir)

    def with_values(self, **changes) -> "RunConfig":
        values = dict(self.values)
        values.update(changes)
        return RunConfig.resolve(values)

    def ablate(self, component: str) -> "RunConfig":
        """Copy with one architecture component switched off."""
        model = self.model_config().without(component)
        return self.with_values(**{f"model.{c}": getattr(model, c) for c in COMPONENTS})

    def to_text(self) -> str:
        return "".join(f"{key}={_format(value)}\n" for key, value in self.values.items())
