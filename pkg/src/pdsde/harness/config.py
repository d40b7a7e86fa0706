"""Experiment configuration: JSON loading, schema validation and hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path

import jsonschema

# keys that influence scheduling or output location but never results
_NON_SEMANTIC = ("workers", "output_dir")

DEFAULTS = {
    "T": 1.0,
    "x0": 0.0,
    "p": 2.0,
    "beta": 0.0,
    "method": "auto",
    "workers": 1,
}


class ConfigError(ValueError):
    pass


def schema() -> dict:
    text = resources.files("pdsde.harness").joinpath("config.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def validate(cfg: dict) -> dict:
    """Validate against the published schema and fill top-level defaults."""
    try:
        jsonschema.validate(cfg, schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    out = copy.deepcopy(cfg)
    for k, v in DEFAULTS.items():
        out.setdefault(k, v)
    return out


def load_config(path: str | Path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return validate(raw)


def config_hash(cfg: dict) -> str:
    """SHA-256 (first 16 hex digits) of the canonical config without scheduling keys."""
    semantic = {k: v for k, v in cfg.items() if k not in _NON_SEMANTIC}
    blob = json.dumps(semantic, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
