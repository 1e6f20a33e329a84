"""Training configuration, key=value config files and the config fingerprint."""

import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Optional

from errors import ConfigurationError

LOG = logging.getLogger(__name__)

ENCODERS = ("tiny_cnn", "tiny_swin")
HEADS = ("prototype", "softmax")
ENCODINGS = ("phase", "cossin")
PL_TARGETS = ("label", "prediction")

# key di file config untuk LossConfig
_LOSS_KEYS = {"gamma": "gamma", "lambda": "lam", "pl_target": "pl_target"}


def default_lambda(proto_dim):
    """lambda = 1 at d=3, downscaled as 3/d for wider prototype spaces."""
    return 3.0 / float(proto_dim)


@dataclass
class LossConfig:
    gamma: float = 1.0
    lam: Optional[float] = None  # None -> default_lambda(proto_dim)
    pl_target: str = "label"

    def resolved_lambda(self, proto_dim):
        return default_lambda(proto_dim) if self.lam is None else float(self.lam)

    def validate(self):
        if not self.gamma > 0:
            raise ConfigurationError(f"gamma must be > 0, got {self.gamma}")
        if self.lam is not None and self.lam < 0:
            raise ConfigurationError(f"lambda must be >= 0, got {self.lam}")
        if self.pl_target not in PL_TARGETS:
            raise ConfigurationError(f"pl_target must be one of {PL_TARGETS}, got '{self.pl_target}'")


@dataclass
class TrainConfig:
    encoder: str = "tiny_swin"
    head: str = "prototype"
    epochs_s: int = 5
    epochs_p: int = 5
    batch_size: int = 40
    lr0: float = 1e-4
    lr_min: float = 0.0
    weight_decay: float = 1e-4
    schedule: str = "cosine"
    optimizer: str = "adamw"
    oversample: bool = True
    seed: int = 0
    proto_dim: int = 3
    prototypes_per_class: int = 1
    num_classes: int = 2
    output_dim: int = 128
    input_encoding: str = "phase"
    grid_size: int = 64
    loss: LossConfig = field(default_factory=LossConfig)

    @property
    def lam(self):
        return self.loss.resolved_lambda(self.proto_dim)

    @property
    def in_channels(self):
        return 2 if self.input_encoding == "cossin" else 1

    def validate(self):
        if self.encoder not in ENCODERS:
            raise ConfigurationError(f"encoder must be one of {ENCODERS}, got '{self.encoder}'")
        if self.head not in HEADS:
            raise ConfigurationError(f"head must be one of {HEADS}, got '{self.head}'")
        if self.input_encoding not in ENCODINGS:
            raise ConfigurationError(f"input_encoding must be one of {ENCODINGS}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigurationError(f"unknown schedule '{self.schedule}'")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigurationError(f"unknown optimizer '{self.optimizer}'")
        for name in ("epochs_s", "epochs_p"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.oversample and self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 when oversample is on")
        if self.lr0 < 0 or self.lr_min < 0 or self.weight_decay < 0:
            raise ConfigurationError("lr0, lr_min and weight_decay must be >= 0")
        if self.proto_dim < 1 or self.prototypes_per_class < 1:
            raise ConfigurationError("proto_dim and prototypes_per_class must be >= 1")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.output_dim < 1:
            raise ConfigurationError("output_dim must be >= 1")
        if self.grid_size < 16:
            raise ConfigurationError("grid_size must be >= 16")
        self.loss.validate()
        return self

    def replace(self, **changes):
        loss_changes = {k: changes.pop(k) for k in list(changes) if k in ("gamma", "lam", "pl_target")}
        loss = dataclasses.replace(self.loss, **loss_changes)
        return dataclasses.replace(self, loss=loss, **changes).validate()

    def to_mapping(self):
        out = {}
        for f in dataclasses.fields(self):
            if f.name == "loss":
                continue
            out[f.name] = getattr(self, f.name)
        out["gamma"] = self.loss.gamma
        out["lambda"] = "auto" if self.loss.lam is None else self.loss.lam
        out["pl_target"] = self.loss.pl_target
        return out

    def to_text(self):
        """Canonical text: sorted key=value lines."""
        lines = [f"{k}={_format_value(v)}" for k, v in sorted(self.to_mapping().items())]
        return "\n".join(lines) + "\n"

    def fingerprint(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(name, raw, kind):
    text = str(raw).strip()
    try:
        if kind is bool:
            if isinstance(raw, bool):
                return raw
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigurationError(f"invalid value for {name}: '{text}'") from None
    return text


_FIELD_TYPES = {
    "encoder": str, "head": str, "epochs_s": int, "epochs_p": int, "batch_size": int,
    "lr0": float, "lr_min": float, "weight_decay": float, "schedule": str, "optimizer": str,
    "oversample": bool, "seed": int, "proto_dim": int, "prototypes_per_class": int,
    "num_classes": int, "output_dim": int, "input_encoding": str, "grid_size": int,
}


def config_from_mapping(mapping, base=None):
    """Build a TrainConfig from string or typed values; unknown keys are errors."""
    base = base or TrainConfig()
    changes = {}
    loss_changes = {}
    for key, raw in mapping.items():
        key = key.strip().replace("-", "_")
        if raw is None:
            continue
        if key in _FIELD_TYPES:
            changes[key] = _coerce(key, raw, _FIELD_TYPES[key])
        elif key in _LOSS_KEYS:
            target = _LOSS_KEYS[key]
            if target == "gamma":
                loss_changes[target] = _coerce(key, raw, float)
            elif target == "lam":
                loss_changes[target] = None if str(raw).strip() == "auto" else _coerce(key, raw, float)
            else:
                loss_changes[target] = str(raw).strip()
        else:
            raise ConfigurationError(f"unknown config key '{key}'")
    loss = dataclasses.replace(base.loss, **loss_changes)
    return dataclasses.replace(base, loss=loss, **changes).validate()


def parse_key_values(text):
    """key=value lines; '#' comments and blank lines are skipped."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got '{line}'")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config(path=None, overrides=None):
    """Config file values first, then overrides (CLI flags) on top."""
    mapping = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                mapping.update(parse_key_values(fh.read()))
        except OSError as e:
            raise ConfigurationError(f"cannot read config file {path}: {e}") from None
        LOG.info(">>> [CONFIG] %d keys loaded from %s", len(mapping), path)
    for key, value in (overrides or {}).items():
        if value is not None:
            mapping[key] = value
    return config_from_mapping(mapping)
