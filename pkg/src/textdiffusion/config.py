"""Run configuration: a flat JSON file plus key=value overrides.

Unknown keys are rejected (typo safety), documented ranges are enforced at
load, and the canonical-JSON digest identifies a run for checkpoint/resume
compatibility.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict, fields
from pathlib import Path

__all__ = ["ConfigError", "RunConfig"]


class ConfigError(ValueError):
    """Unknown key, bad type, or out-of-range value."""


@dataclass
class RunConfig:
    # diffusion
    time_steps: int = 2000  # T
    s0: float = 1e-4
    alpha_min: float = 1e-4
    # data / framing
    max_target_len: int = 64  # n
    max_source_len: int = 128
    task: str = ""  # synthetic task name, or empty when using TSV paths
    synth_size: int = 0
    synth_alphabet: int = 16
    synth_min_len: int = 4
    synth_max_len: int = 10
    train_data: str = ""
    dev_data: str = ""
    vocab_path: str = ""
    truncate: bool = False
    # model
    embed_dim: int = 16  # latent dim per token; desk scale (128 at full scale)
    hidden_dim: int = 32
    ffn_dim: int = 128
    heads: int = 2
    encoder_layers: int = 2
    decoder_layers: int = 2
    dropout: float = 0.0
    # optimization
    batch_size: int = 128
    max_steps: int = 30000
    learning_rate: float = 1e-4
    warmup_steps: int = 10000
    # adaptive schedule
    adaptive_schedule: bool = True
    schedule_update_interval: int = 20000  # U
    schedule_stride: int = 20  # K
    ledger_decay: float = 0.99
    # self-conditioning / sampling
    self_conditioning: bool = True
    clamp: bool = False
    prior_p1: float = 0.0
    prior_p2: float = 0.0
    mbr_candidates: int = 1
    # run control
    seed: int = 0
    dtype: str = "float32"
    checkpoint_interval: int = 10000
    log_interval: int = 100
    dev_eval_interval: int = 0  # 0 disables dev BLEU tracking
    dev_eval_samples: int = 32
    out_dir: str = "runs/default"

    _RANGES = {
        "time_steps": (2, 1_000_000),
        "max_target_len": (4, 4096),
        "max_source_len": (2, 4096),
        "embed_dim": (2, 4096),
        "hidden_dim": (2, 8192),
        "ffn_dim": (2, 32768),
        "heads": (1, 64),
        "encoder_layers": (1, 48),
        "decoder_layers": (1, 48),
        "batch_size": (1, 8192),
        "max_steps": (1, 10_000_000),
        "warmup_steps": (0, 10_000_000),
        "schedule_update_interval": (1, 10_000_000),
        "schedule_stride": (1, 1_000_000),
        "mbr_candidates": (1, 1000),
        "checkpoint_interval": (1, 10_000_000),
        "log_interval": (1, 10_000_000),
    }
    _UNIT = ("s0", "alpha_min", "dropout", "ledger_decay", "prior_p1", "prior_p2")

    def __post_init__(self):
        for name, (lo, hi) in self._RANGES.items():
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
            if not lo <= value <= hi:
                raise ConfigError(f"{name}={value} outside [{lo}, {hi}]")
        for name in self._UNIT:
            value = getattr(self, name)
            if not 0.0 <= float(value) <= 1.0:
                raise ConfigError(f"{name}={value} outside [0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.hidden_dim % self.heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} must be divisible by heads {self.heads}"
            )
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.task and self.task not in ("copy", "reverse", "map-rule"):
            raise ConfigError(f"unknown synthetic task {self.task!r}")
        if self.task and self.synth_size < 1:
            raise ConfigError("synthetic task requires synth_size >= 1")
        if not 1 <= self.synth_min_len <= self.synth_max_len:
            raise ConfigError(
                f"synth lengths must satisfy 1 <= min <= max, got "
                f"[{self.synth_min_len}, {self.synth_max_len}]"
            )
        if self.task and self.synth_max_len > self.max_target_len - 2:
            raise ConfigError(
                f"synth_max_len {self.synth_max_len} does not fit max_target_len "
                f"{self.max_target_len} (two slots frame the target)"
            )
        if not self.task and not self.train_data:
            raise ConfigError("either task (synthetic) or train_data (TSV) is required")

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    @classmethod
    def from_dict(cls, payload: dict) -> "RunConfig":
        unknown = set(payload) - cls.field_names()
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**payload)

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(payload, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(payload)

    def with_overrides(self, overrides: list[str]) -> "RunConfig":
        """Apply ``key=value`` strings; values parse as JSON, else strings."""
        payload = asdict(self)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, _, raw = item.partition("=")
            key = key.strip()
            if key not in self.field_names():
                raise ConfigError(f"unknown config key {key!r}")
            try:
                payload[key] = json.loads(raw)
            except json.JSONDecodeError:
                payload[key] = raw
        return RunConfig.from_dict(payload)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()
