"""Training/model configuration with documented defaults.

Every knob of the artifact lives here so a checkpoint can embed the exact
configuration it was produced with. Unknown keys are rejected on parse.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


class ConfigError(ValueError):
    """Invalid or unknown configuration input."""


@dataclass
class TrainConfig:
    # latent dynamical model
    latent_dim: int = 16
    hidden_dim: int = 16
    target_dim: int = 1
    mlp_hidden: int = 64
    post_depth: int = 2        # 1 = bare linear posterior head
    val_depth: int = 2         # 1 = bare linear emission head
    # text model
    summary_tokens: int = 8
    prefix_tokens: int = 8
    d_model: int = 64
    n_heads: int = 2
    text_depth: int = 2
    ff_dim: int = 128
    max_seq_len: int = 256
    summary_hidden: int = 64
    # optimization
    lr_start: float = 5e-4
    lr_end: float = 5e-5
    max_epochs: int = 20
    patience: int = 5
    free_nats: float = 2.5
    alpha_val: float = 1.0
    alpha_kl: float = 1.0
    alpha_text: float = 0.1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 10.0
    # evaluation & reproducibility
    mc_samples: int = 10
    seed: int = 0
    unimodal: bool = False

    def validate(self) -> None:
        positive = [
            "latent_dim", "hidden_dim", "target_dim", "mlp_hidden", "post_depth",
            "val_depth", "summary_tokens", "prefix_tokens", "d_model", "n_heads",
            "text_depth", "ff_dim", "max_seq_len", "summary_hidden", "max_epochs",
            "patience", "mc_samples",
        ]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ConfigError("learning rates must be positive")
        if self.lr_end > self.lr_start:
            raise ConfigError(
                f"lr_end {self.lr_end} must not exceed lr_start {self.lr_start}"
            )
        if self.free_nats < 0:
            raise ConfigError(f"free_nats must be >= 0, got {self.free_nats}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg


def _coerce(name: str, field_type: type, raw: str):
    if field_type is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        return field_type(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def parse_config_text(text: str) -> dict:
    """Parse flat ``key = value`` lines into typed TrainConfig fields.

    Blank lines and ``#`` comments are allowed; unknown keys are rejected.
    """
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    type_map = {"int": int, "float": float, "bool": bool, "str": str}
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        ftype = fields[key]
        if isinstance(ftype, str):
            ftype = type_map.get(ftype, str)
        out[key] = _coerce(key, ftype, raw)
    return out
