"""Checkpoint serialization, run configuration, and metrics export.

Checkpoints store all parameters as little-endian float32 behind a
length-checked JSON header; configs are flat sectioned key/value files
(INI) validated against the built-in defaults.
"""
from __future__ import annotations

import configparser
import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .envs import DenvParams, KenvParams, TorqueProfile

CHECKPOINT_MAGIC = b"SPKC"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Invalid, unknown, or out-of-range configuration entry."""


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


@dataclass
class SacParams:
    total_steps: int = 500_000
    buffer_size: int = 50_000
    gamma: float = 0.99
    tau: float = 0.005
    batch_size: int = 256
    learning_starts: int = 5_000
    policy_lr: float = 3e-4
    q_lr: float = 1e-4
    alpha_init: float = 0.2
    policy_freq: int = 2
    target_freq: int = 3
    hidden: tuple = (512, 512, 384)
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    eval_every: int = 5_000
    eval_episodes: int = 5
    precision: str = "float32"


@dataclass
class SnnParams:
    time_steps: int = 16
    surrogate_slope: float = 10.0
    beta_init: float = 1.0
    v_th_init: float = 2.0
    reset_mode: str = "zero"


@dataclass
class SpttqParams:
    delta: float = 0.95
    episodes: int = 50
    stability_eps: float = 1e-4


@dataclass
class RunConfig:
    sac: SacParams = field(default_factory=SacParams)
    snn: SnnParams = field(default_factory=SnnParams)
    kenv: KenvParams = field(default_factory=KenvParams)
    denv: DenvParams = field(default_factory=DenvParams)
    spttq: SpttqParams = field(default_factory=SpttqParams)

    def env_params(self, env_name: str):
        if env_name == "kenv":
            return self.kenv
        if env_name == "denv":
            return self.denv
        raise ConfigError(f"unknown environment {env_name!r}")


def default_config() -> RunConfig:
    return RunConfig()


def desk_preset() -> RunConfig:
    """Small-network, short-horizon preset for CI-scale experiments."""
    cfg = RunConfig()
    cfg.sac = replace(cfg.sac, hidden=(128, 128, 96), total_steps=100_000)
    return cfg


# --- flat key/value <-> RunConfig -----------------------------------------

def _profile_flat(prefix: str, p: TorqueProfile, out: dict):
    out[f"{prefix}.profile_kind"] = p.kind
    out[f"{prefix}.profile_amplitude"] = p.amplitude
    out[f"{prefix}.profile_frequency"] = p.frequency
    out[f"{prefix}.profile_phase"] = p.phase


def config_to_flat(cfg: RunConfig) -> dict:
    flat = {}
    for section in ("sac", "snn", "spttq"):
        obj = getattr(cfg, section)
        for k, v in vars(obj).items():
            flat[f"{section}.{k}"] = v
    for section in ("kenv", "denv"):
        obj = getattr(cfg, section)
        for k, v in vars(obj).items():
            if k == "profile":
                _profile_flat(section, v, flat)
            else:
                flat[f"{section}.{k}"] = v
    return flat


def _coerce(key: str, raw, default):
    if isinstance(default, bool):
        if str(raw).lower() in ("true", "1", "yes"):
            return True
        if str(raw).lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(str(raw))
        except ValueError:
            raise ConfigError(f"{key}: expected integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(str(raw))
        except ValueError:
            raise ConfigError(f"{key}: expected number, got {raw!r}") from None
    if isinstance(default, tuple):
        try:
            return tuple(int(x) for x in str(raw).replace("(", "").replace(")", "").split(","))
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated integers, got {raw!r}") from None
    return str(raw)


def _validate(cfg: RunConfig):
    checks = [
        (0.0 < cfg.sac.gamma < 1.0, "sac.gamma must be in (0, 1)"),
        (0.0 < cfg.sac.tau <= 1.0, "sac.tau must be in (0, 1]"),
        (cfg.sac.batch_size >= 1, "sac.batch_size must be positive"),
        (cfg.sac.total_steps >= 1, "sac.total_steps must be positive"),
        (cfg.sac.buffer_size >= 1, "sac.buffer_size must be positive"),
        (all(h >= 1 for h in cfg.sac.hidden), "sac.hidden sizes must be positive"),
        (cfg.sac.precision in ("float32", "float64"),
         "sac.precision must be float32|float64"),
        (cfg.snn.time_steps >= 1, "snn.time_steps must be >= 1"),
        (cfg.snn.surrogate_slope > 0.0, "snn.surrogate_slope must be positive"),
        (cfg.snn.reset_mode in ("zero", "subtract"), "snn.reset_mode must be zero|subtract"),
        (0.0 < cfg.spttq.delta <= 1.0, "spttq.delta must be in (0, 1]"),
        (cfg.spttq.episodes >= 1, "spttq.episodes must be >= 1"),
        (cfg.kenv.d_min > 0 and cfg.kenv.d_max > cfg.kenv.d_min,
         "kenv delays must satisfy 0 < d_min < d_max"),
        (cfg.kenv.max_steps >= 1, "kenv.max_steps must be positive"),
        (cfg.denv.dt > 0.0, "denv.dt must be positive"),
        (cfg.denv.tau_max > 0.0, "denv.tau_max must be positive"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)


def config_from_flat(overrides: dict, base: RunConfig | None = None) -> RunConfig:
    cfg = base or default_config()
    defaults = config_to_flat(cfg)
    flat = dict(defaults)
    for key, raw in overrides.items():
        if key not in defaults:
            raise ConfigError(f"unknown configuration key {key!r}")
        flat[key] = _coerce(key, raw, defaults[key])

    def section(prefix, cls, **extra):
        kwargs = {k.split(".", 1)[1]: v for k, v in flat.items()
                  if k.startswith(prefix + ".") and "profile_" not in k}
        return cls(**kwargs, **extra)

    def profile(prefix):
        return TorqueProfile(flat[f"{prefix}.profile_kind"],
                             flat[f"{prefix}.profile_amplitude"],
                             flat[f"{prefix}.profile_frequency"],
                             flat[f"{prefix}.profile_phase"])

    cfg = RunConfig(
        sac=section("sac", SacParams),
        snn=section("snn", SnnParams),
        spttq=section("spttq", SpttqParams),
        kenv=section("kenv", KenvParams, profile=profile("kenv")),
        denv=section("denv", DenvParams, profile=profile("denv")),
    )
    _validate(cfg)
    return cfg


def load_config(path: str, base: RunConfig | None = None) -> RunConfig:
    """Parse a sectioned key/value file; absent keys fall back to defaults."""
    parser = configparser.ConfigParser()
    try:
        with open(path) as f:
            parser.read_file(f)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    overrides = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            overrides[f"{section}.{key}"] = raw
    return config_from_flat(overrides, base)


def parse_overrides(pairs) -> dict:
    """Parse repeatable --set section.key=value arguments."""
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form section.key=value")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def save_config(path: str, cfg: RunConfig):
    parser = configparser.ConfigParser()
    for key, value in config_to_flat(cfg).items():
        section, name = key.split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        parser.set(section, name, str(value))
    with open(path, "w") as f:
        parser.write(f)


def config_hash(cfg: RunConfig) -> str:
    flat = config_to_flat(cfg)
    blob = json.dumps({k: repr(v) for k, v in sorted(flat.items())})
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(path: str, actor, meta: dict):
    """Write actor parameters (float32 LE) behind a JSON header, atomically."""
    arrays = actor.state_arrays()
    header = dict(meta)
    header["format_version"] = CHECKPOINT_VERSION
    header.update(actor.describe())
    header["arrays"] = [{"name": n, "shape": list(a.shape)} for n, a in arrays]
    payload = b"".join(a.astype("<f4").tobytes() for _, a in arrays)
    header["payload_bytes"] = len(payload)
    blob = json.dumps(header, sort_keys=True).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path: str):
    """Read a checkpoint back into a freshly constructed actor.

    Returns (actor, meta). Corruption modes (bad magic, unknown version,
    payload length mismatch) are reported distinctly.
    """
    from . import sac  # deferred: sac builds the actor objects

    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    if len(blob) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", blob[4:8])
    try:
        header = json.loads(blob[8:8 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from e
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {header.get('format_version')!r}")
    payload = blob[8 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"{path}: payload length {len(payload)} != declared {header['payload_bytes']}")

    actor = sac.build_actor_from_description(header)
    offset = 0
    loaded = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        raw = payload[offset:offset + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"{path}: payload mismatch for array {spec['name']}")
        loaded[spec["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: trailing bytes in payload")
    actor.load_state_arrays(loaded)
    meta = {k: v for k, v in header.items() if k not in ("arrays", "payload_bytes")}
    return actor, meta


# --- metrics ---------------------------------------------------------------

def format_value(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.6g}"
    return str(v)


def write_metrics_csv(path: str, header, rows):
    """Header plus records; reals at 6 significant digits."""
    header = list(header)
    with open(path, "w", newline="") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            if isinstance(row, dict):
                row = [row[h] for h in header]
            f.write(",".join(format_value(v) for v in row) + "\n")
