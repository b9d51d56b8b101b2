"""Flat training/model configuration with file and override plumbing.

The on-disk format is one `key = value` pair per line (# starts a comment).
Every field of TrainConfig is addressable by its field name; command-line
flags override file values, which override the defaults here.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

PROFILES = ("f64", "f32")
ENCODERS = ("coattention", "lstm")


class ConfigError(ValueError):
    """Raised for unknown keys, malformed values, or invariant violations."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 8
    seed: int = 7
    profile: str = "f64"
    residual: bool = True
    ga: bool = True
    encoder: str = "coattention"
    layers: int = 2
    heads: int = 2
    d_model: int = 16
    d_token: int = 16
    dropout: float = 0.1
    patience: int = 20
    ga_order: str = "qr_first"
    layer_order: str = "sa_ga"
    refresh_joint: bool = False
    share_reduction_mlp: bool = False
    q_self_attention: bool = False

    def validate(self) -> "TrainConfig":
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        for name in ("epochs", "batch_size", "layers", "heads", "d_model",
                     "d_token", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % 2 != 0:
            raise ConfigError(f"d_model must be even (bidirectional halves), got {self.d_model}")
        if self.d_model % self.heads != 0:
            raise ConfigError(f"heads={self.heads} must divide d_model={self.d_model}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {PROFILES}, got {self.profile!r}")
        if self.encoder not in ENCODERS:
            raise ConfigError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        from vcrnet.grounding import GA_ORDERS
        from vcrnet.coattention import LAYER_ORDERS

        if self.ga_order not in GA_ORDERS:
            raise ConfigError(f"ga_order must be one of {GA_ORDERS}, got {self.ga_order!r}")
        if self.layer_order not in LAYER_ORDERS:
            raise ConfigError(
                f"layer_order must be one of {LAYER_ORDERS}, got {self.layer_order!r}"
            )
        return self

    # -- serialization -----------------------------------------------------

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, blob: str) -> "TrainConfig":
        return cls.from_mapping(json.loads(blob))

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**mapping).validate()

    def with_overrides(self, overrides: dict) -> "TrainConfig":
        merged = dataclasses.asdict(self)
        merged.update({k: v for k, v in overrides.items() if v is not None})
        return type(self).from_mapping(merged)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values: dict = {}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path} line {lineno}: expected key = value")
                key, text = (part.strip() for part in line.split("=", 1))
                if key not in fields:
                    raise ConfigError(f"{path} line {lineno}: unknown key {key!r}")
                values[key] = _parse_value(fields[key].type, text, path, lineno)
        return cls.from_mapping(values)


def _parse_value(annotation: str, text: str, path, lineno: int):
    kind = str(annotation)
    if kind == "bool":
        lowered = text.lower()
        if lowered not in ("true", "false"):
            raise ConfigError(f"{path} line {lineno}: expected true/false, got {text!r}")
        return lowered == "true"
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{path} line {lineno}: bad {kind} value {text!r}")
    return text
