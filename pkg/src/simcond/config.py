"""Flat ``key = value`` run configuration, desk-scale defaults and the stored
filter calibration."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

from .errors import ConfigError

# 90th percentile of the tracking discrepancy over a 600-clip calibration
# population (seed 12345) drawn like each corpus; recomputed by
# ``simcond calibrate`` and checked in the test suite.
CALIBRATION = {"n_clips": 600, "seed": 12345, "quantile": 0.9}
# output of `simcond calibrate` with CALIBRATION, one value per randomization mode
CALIBRATED_THRESHOLDS = {"earth": 0.10473366238360984, "randomized": 0.16810827267967948}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = value
    return out


def load_file(path) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_text(text, str(path))


def coerce(key: str, raw, default):
    """Parse ``raw`` to the type of ``default``."""
    if not isinstance(raw, str):
        return raw
    s = raw.strip()
    try:
        if isinstance(default, bool):
            low = s.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(s)
        if isinstance(default, int):
            return int(s)
        if isinstance(default, float):
            return float(s)
        if isinstance(default, tuple):
            if not s:
                return ()
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in s.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
    return s


def resolve(defaults: Mapping, file_values: Mapping | None = None, overrides: Mapping | None = None) -> dict:
    """Defaults, then config-file values, then explicit overrides; unknown keys
    are rejected."""
    cfg = dict(defaults)
    for layer in (file_values or {}, overrides or {}):
        for k, v in layer.items():
            if v is None:
                continue
            if k not in defaults:
                raise ConfigError(f"unknown config key {k!r}")
            cfg[k] = coerce(k, v, defaults[k])
    return cfg


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    return str(v)


def dump(cfg: Mapping) -> str:
    return "".join(f"{k} = {format_value(cfg[k])}\n" for k in sorted(cfg))


def write_resolved(cfg: Mapping, path) -> None:
    Path(path).write_text(dump(cfg))
