"""Run configuration: defaults, YAML file parsing, flag overrides, and
provenance manifests.

Precedence is flags > file > defaults. Unknown keys anywhere are a hard
error so typos cannot silently fall back to defaults. A fully-defaulted
config runs the whole pipeline end to end at desk scale.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import yaml

from .errors import ConfigError
from .seeding import derive_seed

# One nested mapping defines the schema, the defaults, and the value types.
DEFAULTS: dict = {
    "dataset": {
        "name": "mnist-like",
        "root": "data-cache",
        "seed": 0,
    },
    "classifier_a": {
        "architecture": "small-cnn-a",
        "epochs": 2,
        "learning_rate": 0.05,
        "batch_size": 128,
        "seed": 11,
    },
    "classifier_b": {
        "architecture": "small-cnn-b",
        "epochs": 2,
        "learning_rate": 0.05,
        "batch_size": 128,
        "seed": 22,
    },
    "attack": {
        "kind": "pgd",
        "epsilon": 0.3,
        "alpha": 0.075,
        "iterations": 10,
        "random_init": True,
        "seed": 3,
    },
    "diffusion": {
        "timesteps": 200,
        "beta_start": 1.0e-4,
        "beta_end": 0.02,
        "epochs": 35,
        "learning_rate": 2.0e-3,
        "batch_size": 128,
        "base_channels": 16,
        "t_star": 30,
        "denoise_steps": None,
        "seed": 33,
    },
    "eval": {
        "subset_size": 1000,
        "subset_seed": 7,
        "grid_seed": 5,
        "output_dir": "results",
        "triptych_grid": 4,
    },
}

_NONE_OK = {("diffusion", "denoise_steps")}


@dataclass(frozen=True)
class RunConfig:
    """Resolved configuration for a full pipeline run."""

    values: dict

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def hash(self) -> str:
        return config_hash(self.values)

    def derive(self, label: str) -> int:
        """Per-operation seed derived from the dataset master seed."""
        return derive_seed(self.values["dataset"]["seed"], label)


def _coerce(section: str, key: str, value, template):
    """Coerce a raw value (possibly a CLI string) to the default's type."""
    if value is None:
        if template is None or (section, key) in _NONE_OK:
            return None
        raise ConfigError(f"{section}.{key} may not be null")
    if template is None:  # denoise_steps: optional int
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{section}.{key} expects an integer or null, got {value!r}") from None
    if isinstance(template, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError(f"{section}.{key} expects a boolean, got {value!r}")
    if isinstance(template, int) and not isinstance(template, bool):
        try:
            as_float = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{section}.{key} expects an integer, got {value!r}") from None
        if as_float != int(as_float):
            raise ConfigError(f"{section}.{key} expects an integer, got {value!r}")
        return int(as_float)
    if isinstance(template, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{section}.{key} expects a number, got {value!r}") from None
    return str(value)


def _apply(resolved: dict, section: str, key: str, value) -> None:
    if section not in resolved:
        raise ConfigError(f"unknown config section {section!r}")
    if key not in resolved[section]:
        raise ConfigError(f"unknown config key {section}.{key}")
    resolved[section][key] = _coerce(section, key, value, DEFAULTS[section][key])


def parse_config(path: str | Path | None, overrides: dict[str, object] | None = None) -> RunConfig:
    """Build a RunConfig from an optional YAML file plus dotted overrides.

    overrides maps "section.key" to values (strings are coerced). An empty
    or absent file yields pure defaults. Unknown sections or keys raise
    ConfigError naming the offender.
    """
    resolved = copy.deepcopy(DEFAULTS)

    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f" at line {mark.line + 1}" if mark is not None else ""
            raise ConfigError(f"cannot parse {path}{where}: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping of sections")
        for section, body in loaded.items():
            if not isinstance(body, dict):
                raise ConfigError(f"{path}: section {section!r} must be a mapping")
            for key, value in body.items():
                _apply(resolved, str(section), str(key), value)

    for dotted, value in (overrides or {}).items():
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        section, key = dotted.split(".", 1)
        _apply(resolved, section, key, value)

    _validate(resolved)
    return RunConfig(resolved)


def _validate(resolved: dict) -> None:
    attack = resolved["attack"]
    if attack["kind"] not in ("pgd", "fgsm"):
        raise ConfigError(f"attack.kind must be pgd or fgsm, got {attack['kind']!r}")
    if not 0.0 < attack["epsilon"] <= 0.5:
        raise ConfigError(f"attack.epsilon must be in (0, 0.5], got {attack['epsilon']}")
    diff = resolved["diffusion"]
    if not 1 <= diff["t_star"] <= diff["timesteps"]:
        raise ConfigError(
            f"diffusion.t_star must be in [1, {diff['timesteps']}], got {diff['t_star']}"
        )
    if resolved["eval"]["subset_size"] < 1:
        raise ConfigError("eval.subset_size must be >= 1")


def config_hash(values: dict) -> str:
    return hashlib.sha256(json.dumps(values, sort_keys=True).encode()).hexdigest()[:16]


def apply_master_seed(config: RunConfig, master_seed: int) -> RunConfig:
    """Re-derive every section seed from one master seed.

    Section seeds become derive_seed(master, "<section>.seed"), keeping
    modules decoupled while the whole run stays a function of one number.
    """
    values = copy.deepcopy(config.values)
    for section in ("dataset", "classifier_a", "classifier_b", "attack", "diffusion"):
        values[section]["seed"] = derive_seed(master_seed, f"{section}.seed")
    values["eval"]["subset_seed"] = derive_seed(master_seed, "eval.subset_seed")
    values["eval"]["grid_seed"] = derive_seed(master_seed, "eval.grid_seed")
    return RunConfig(values)


def write_manifest(out_dir: str | Path, config: RunConfig, artifacts: dict[str, str]) -> Path:
    """Emit provenance: resolved config, its hash, and artifact hashes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": config.values,
        "config_hash": config.hash(),
        "artifacts": artifacts,
        "created": datetime.now(timezone.utc).isoformat(),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
