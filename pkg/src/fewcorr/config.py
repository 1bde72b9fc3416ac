"""Flat `key = value` run configuration with dotted section names.

Every knob ships with its protocol default (5-way 1-shot, 15 queries,
temperatures 0.5, 25 mixture components, SGD momentum 0.9, weight decay
5e-4, learning rate 5e-2).  Parsing is schema-checked: unknown keys and
badly typed values raise ConfigError, and parse -> serialize -> parse is
an exact round trip.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

from .errors import ConfigError

# key -> (type tag, default).  Type tags: int, float, bool, str, int_list.
SCHEMA = {
    "run.seed": ("int", 0),
    # episode protocol
    "episode.n_way": ("int", 5),
    "episode.k_shot": ("int", 1),
    "episode.n_query": ("int", 15),
    # backbone
    "backbone.blocks": ("int", 4),
    "backbone.widths": ("int_list", [64, 64, 64, 64]),
    "backbone.downsample_blocks": ("int", 2),
    "backbone.feature_size": ("int", 5),
    "backbone.bn_momentum": ("float", 0.1),
    "backbone.bn_eps": ("float", 1e-5),
    # branch behaviour
    "selfcorr.softmax_axis": ("str", "spatial"),  # spatial | channel
    "cross.gamma": ("float", 0.2),
    "mixture.k": ("int", 25),
    "mixture.kappa": ("float", 1.0),
    "mixture.iters": ("int", 3),
    "mixture.use_weights": ("bool", True),
    # losses
    "loss.alpha": ("float", 1.0),
    "loss.beta": ("float", 0.5),
    "loss.gamma": ("float", 0.25),
    "loss.pairing": ("str", "matched"),  # matched | fixed_query
    "temp.tau1": ("float", 0.5),
    "temp.tau2": ("float", 0.5),
    "temp.tau3": ("float", 0.5),
    # branch enable flags (the ablation grid toggles these)
    "branch.sc": ("bool", True),
    "branch.cc": ("bool", True),
    "branch.pc": ("bool", True),
    # trainer
    "train.epochs": ("int", 5),
    "train.episodes_per_epoch": ("int", 100),
    "train.lr": ("float", 5e-2),
    "train.momentum": ("float", 0.9),
    "train.weight_decay": ("float", 5e-4),
    # evaluation
    "eval.episodes": ("int", 500),
}

_CHOICES = {
    "selfcorr.softmax_axis": {"spatial", "channel"},
    "loss.pairing": {"matched", "fixed_query"},
}


def _parse_value(key: str, kind: str, raw: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "int_list":
            inner = raw[1:-1] if raw.startswith("[") and raw.endswith("]") else raw
            return [int(p) for p in inner.split(",") if p.strip()]
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


def _format_value(kind: str, value) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind == "int_list":
        return ",".join(str(v) for v in value)
    if kind == "float":
        return repr(float(value))
    return str(value)


class Config:
    """A validated mapping over SCHEMA with attribute-free dict access."""

    def __init__(self, overrides: dict | None = None):
        self._values = {k: default for k, (_, default) in SCHEMA.items()}
        for key, value in (overrides or {}).items():
            self.set(key, value)

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        kind = SCHEMA[key][0]
        if isinstance(value, str) and kind != "str":
            value = _parse_value(key, kind, value)
        if kind == "int":
            value = int(value)
        elif kind == "float":
            value = float(value)
        elif kind == "bool":
            value = bool(value)
        elif kind == "int_list":
            value = [int(v) for v in value]
        if key in _CHOICES and value not in _CHOICES[key]:
            raise ConfigError(f"{key} must be one of {sorted(_CHOICES[key])}")
        self._values[key] = value
        self._validate(key)

    def _validate(self, key: str) -> None:
        v = self._values
        positive = ("cross.gamma", "temp.tau1", "temp.tau2", "temp.tau3",
                    "mixture.kappa", "train.lr")
        if key in positive and v[key] <= 0:
            raise ConfigError(f"{key} must be positive")
        if key in ("loss.alpha", "loss.beta", "loss.gamma") and v[key] < 0:
            raise ConfigError(f"{key} must be non-negative")
        if key == "train.momentum" and not 0 <= v[key] < 1:
            raise ConfigError("train.momentum must lie in [0, 1)")
        if key == "train.weight_decay" and v[key] < 0:
            raise ConfigError("train.weight_decay must be non-negative")
        if key == "mixture.iters" and v[key] < 1:
            raise ConfigError("mixture.iters must be at least 1")
        if key == "mixture.k" and v[key] < 1:
            raise ConfigError("mixture.k must be at least 1")

    def __getitem__(self, key: str):
        try:
            return self._values[key]
        except KeyError:
            raise ConfigError(f"unknown config key {key!r}") from None

    def __eq__(self, other) -> bool:
        return isinstance(other, Config) and self._values == other._values

    def items(self):
        return self._values.items()

    def copy(self) -> "Config":
        return Config(dict(self._values))

    def serialize(self) -> str:
        lines = [f"{k} = {_format_value(SCHEMA[k][0], self._values[k])}"
                 for k in sorted(self._values)]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()


def parse_config(text: str) -> Config:
    """Parse `key = value` lines; `#` starts a comment, blanks are ignored."""
    cfg = Config()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        try:
            cfg.set(key.strip(), raw.strip())
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return cfg


def load_config(path) -> Config:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())
