"""Configuration schema and validation.

Files are YAML (JSON is a subset). Keys may be nested or dotted:
``popart: {step_size: 0.01}`` and ``popart.step_size: 0.01`` are the same.
Every key must appear in :data:`SCHEMA`; anything else is an error.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

import yaml

from ..scaling import ScalerKind


class ConfigError(ValueError):
    """Carries one diagnostic per offending key."""

    def __init__(self, errors: list):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class Field:
    kind: type
    default: Any
    check: Optional[Callable[[Any], Optional[str]]] = None
    doc: str = ""


def _positive(x):
    return None if x > 0 else "must be positive"


def _unit(x):
    return None if 0 <= x <= 1 else "must lie in [0, 1]"


def _open_unit(x):
    return None if 0 < x < 1 else "must lie in (0, 1)"


def _choice(*options):
    def check(x):
        return None if x in options else f"must be one of {', '.join(options)}"
    return check


def _scaler(x):
    try:
        ScalerKind.parse(x)
    except ValueError as exc:
        return str(exc)
    return None


SCHEMA: dict = {
    "scaler": Field(str, "return_based", _scaler, "error/target scaling strategy"),
    "n_step": Field(int, 5, _positive, "multi-step target length"),
    "target_update_interval": Field(int, 400, _positive, "updates between target syncs"),
    "optimizer": Field(str, "adam", _choice("adam", "sgd")),
    "learning_rate": Field(float, 2e-4, _positive),
    "adam.beta1": Field(float, 0.9, _open_unit),
    "adam.beta2": Field(float, 0.999, _open_unit),
    "adam.eps": Field(float, 1e-6, _positive),
    "epsilon_greedy": Field(float, 0.1, _unit),
    "batch_size": Field(int, 32, _positive),
    "replay_capacity": Field(int, 10_000, _positive),
    "sigma_v": Field(float, 1e-2, _positive, "lower floor on the scale"),
    "use_target_gap": Field(bool, False),
    "popart.step_size": Field(float, 1e-3, _positive),
    "popart.lower": Field(float, 1e-3, _positive),
    "popart.upper": Field(float, 1e3, _positive),
    "error_window": Field(int, 10_000, _positive),
    "bandit.window": Field(int, 50, _positive),
    "bandit.epsilon": Field(float, 0.1, _unit),
    "log_interval": Field(int, 100, _positive),
    "budget": Field(int, 0, lambda x: None if x >= 0 else "must be non-negative",
                    "updates per run; 0 keeps the preset's own budget"),
    "noise.steps": Field(int, 400_000, lambda x: None if x >= 10_000 else "must be >= 10000"),
    "adam_scatter.loss_min": Field(float, 1e-18, _positive),
    "adam_scatter.loss_max": Field(float, 1e4, _positive),
    "adam_scatter.points": Field(int, 45, _positive),
}

# preset-independent keys that map one-to-one onto LearnerConfig fields
LEARNER_KEYS = {
    "scaler": "scaler", "n_step": "n_step", "target_update_interval": "target_update_interval",
    "optimizer": "optimizer", "learning_rate": "learning_rate", "adam.beta1": "adam_beta1",
    "adam.beta2": "adam_beta2", "adam.eps": "adam_eps", "epsilon_greedy": "epsilon_greedy",
    "batch_size": "batch_size", "replay_capacity": "replay_capacity", "sigma_v": "sigma_v",
    "use_target_gap": "use_target_gap", "popart.step_size": "popart_step_size",
    "popart.lower": "popart_lower", "popart.upper": "popart_upper", "error_window": "error_window",
    "bandit.window": "bandit_window", "bandit.epsilon": "bandit_epsilon",
    "log_interval": "log_interval",
}


def flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(flatten(value, name + "."))
        else:
            out[name] = value
    return out


def _coerce(name: str, field: Field, value):
    if field.kind is bool:
        if isinstance(value, bool):
            return value, None
        return None, f"{name}: expected a boolean, got {value!r}"
    if field.kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            return None, f"{name}: expected an integer, got {value!r}"
        return value, None
    if field.kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return None, f"{name}: expected a number, got {value!r}"
        return float(value), None
    if not isinstance(value, str):
        return None, f"{name}: expected a string, got {value!r}"
    return value, None


def normalize(raw: Optional[dict]) -> dict:
    """Validate user keys; returns only the keys the user set, coerced."""
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(["top level must be a mapping"])
    errors, out = [], {}
    for name, value in sorted(flatten(raw).items()):
        field = SCHEMA.get(name)
        if field is None:
            errors.append(f"{name}: unknown key")
            continue
        value, err = _coerce(name, field, value)
        if err is None and field.check is not None:
            msg = field.check(value)
            err = None if msg is None else f"{name}: {msg}"
        if err is not None:
            errors.append(err)
        else:
            out[name] = value
    lo, hi = out.get("popart.lower", 1e-3), out.get("popart.upper", 1e3)
    if lo > hi:
        errors.append("popart.lower: must not exceed popart.upper")
    if errors:
        raise ConfigError(errors)
    return out


def defaults() -> dict:
    return {name: f.default for name, f in SCHEMA.items()}


def validate_config(path=None, text: Optional[str] = None) -> dict:
    """Full config (defaults filled) from a file path or YAML text.

    Raises :class:`ConfigError` listing every offending key.
    """
    if path is not None:
        text = Path(path).read_text()
    raw = yaml.safe_load(text) if text else None
    cfg = defaults()
    cfg.update(normalize(raw))
    return cfg


def user_overrides(path=None, text: Optional[str] = None) -> dict:
    """Only the keys a file sets, validated."""
    if path is not None:
        text = Path(path).read_text()
    return normalize(yaml.safe_load(text) if text else None)
