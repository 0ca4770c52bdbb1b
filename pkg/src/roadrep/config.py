"""Run configuration: INI-style file with [section] headers, CLI overrides,
two numeric profiles, canonical echo and hashing.

Unknown sections or keys are rejected. Profiles differ only in numbers.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, fields


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # paths
    roads: str = ""
    edges: str = ""
    trajectories: str = ""
    workdir: str = ""
    # dims
    d: int = 32
    d_t: int = 32
    d_f: int = 16
    # training
    epochs_spatial: int = 300
    epochs_temporal: int = 20
    batch_contrastive: int = 128
    batch_traffic: int = 16
    lr: float = 1e-3
    lambda_reg: float = 10.0
    lambda_cls: float = 1.0
    temperature: float = 0.5
    # hypergraph
    k_zones: int = 8
    radius_m: float = 200.0
    # ablation
    no_mixhop: bool = False
    no_hg1: bool = False
    no_hg2: bool = False
    no_hg3: bool = False
    no_tm: bool = False
    freeze_mixhop: bool = False
    raw_degrees: bool = False
    bidirectional: bool = False
    # fusion
    mode: str = "concat"
    # run
    seed: int = 0

    def validate(self):
        for name in ("d", "d_t", "d_f"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("epochs_spatial", "epochs_temporal"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.batch_contrastive < 2:
            raise ConfigError("batch_contrastive must be >= 2")
        if self.batch_traffic < 1:
            raise ConfigError("batch_traffic must be >= 1")
        if self.lr <= 0 or self.temperature <= 0:
            raise ConfigError("lr and temperature must be positive")
        if self.lambda_reg < 0 or self.lambda_cls < 0 or (self.lambda_reg == 0 and self.lambda_cls == 0):
            raise ConfigError("loss weights must be non-negative and not both zero")
        if self.k_zones < 1:
            raise ConfigError("k_zones must be >= 1")
        if self.radius_m <= 0:
            raise ConfigError("radius_m must be positive")
        if self.mode not in ("concat", "sum", "gated"):
            raise ConfigError(f"unknown fusion mode {self.mode!r}")
        return self


SECTIONS = {
    "paths": ("roads", "edges", "trajectories", "workdir"),
    "dims": ("d", "d_t", "d_f"),
    "training": ("epochs_spatial", "epochs_temporal", "batch_contrastive", "batch_traffic",
                 "lr", "lambda_reg", "lambda_cls", "temperature"),
    "hypergraph": ("k_zones", "radius_m"),
    "ablation": ("no_mixhop", "no_hg1", "no_hg2", "no_hg3", "no_tm",
                 "freeze_mixhop", "raw_degrees", "bidirectional"),
    "fusion": ("mode",),
    "run": ("seed",),
}

PROFILES = {
    "desk": dict(d=32, d_t=32, d_f=16, epochs_spatial=300, epochs_temporal=20,
                 batch_contrastive=32, batch_traffic=16, lr=1e-3,
                 lambda_reg=10.0, lambda_cls=1.0, temperature=0.5,
                 k_zones=8, radius_m=200.0),
    "paper": dict(d=128, d_t=128, d_f=32, epochs_spatial=5000, epochs_temporal=100,
                  batch_contrastive=1024, batch_traffic=64, lr=1e-3,
                  lambda_reg=10.0, lambda_cls=1.0, temperature=0.5,
                  k_zones=256, radius_m=200.0),
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {exc}") from None


def load_config_file(path) -> dict:
    """Parse and type-check a config file; returns a field -> value dict."""
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from None
    out = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            out[key] = _parse_value(key, raw)
    return out


def build_config(profile: str = "desk", file_path=None, overrides: dict | None = None) -> RunConfig:
    """Profile defaults, then config file, then CLI overrides; validated."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    cfg = RunConfig(**PROFILES[profile])
    merged = {}
    if file_path is not None:
        merged.update(load_config_file(file_path))
    if overrides:
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown config field {key!r}")
            merged[key] = value
    for key, value in merged.items():
        setattr(cfg, key, value)
    return cfg.validate()


def effective_text(cfg: RunConfig) -> str:
    """Canonical flat echo, one section.key=value per line."""
    lines = []
    for section, keys in SECTIONS.items():
        for key in keys:
            lines.append(f"{section}.{key}={getattr(cfg, key)!r}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    """Hash of everything that changes results (workdir location excluded)."""
    lines = [ln for ln in effective_text(cfg).splitlines() if not ln.startswith("paths.workdir=")]
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()
