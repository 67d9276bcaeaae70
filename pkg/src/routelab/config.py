"""Run configuration: one flat record, a key=value file format, CLI overrides.

The config file mirrors the field names below, one ``key = value`` pair per
line, ``#`` comments allowed. Lists (the layer pattern) are comma separated.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from routelab.routing import ConfigError

VARIANTS = ("dense", "mod", "sdt", "stt_fixed", "stt_threshold")
LAYER_KINDS = ("dense", "decision", "dynamic", "stt", "mod")


@dataclass
class ModelConfig:
    # dimensions
    d: int = 64
    heads: int = 4
    layers: int = 8
    seq_len: int = 128
    vocab: int = 256
    ffn_mult: float = 2.0
    # stack layout
    variant: str = "dense"
    pattern: tuple = ()          # empty = derive from variant
    # routing
    gamma: float = 0.5
    g_th: float = 0.5
    prior_factor: float = 0.0625
    ma_decay: float = 0.9
    # residual predictors start deliberately uninformed: a from-scratch
    # backbone has near-zero residuals at init, and a near-zero predictor
    # would be accurate by accident, removing the novelty-bootstrap phase
    predictor_init_std: float = 0.3
    # loss weights
    lambda_pred: float = 0.05
    lambda_causal: float = 0.01
    lambda_g_reg: float = 0.001
    g_reg_mode: str = "auto"     # auto: threshold routing only | always | never
    # optimisation; group ratios follow backbone <= predictor <= router
    lr_backbone: float = 1e-3
    lr_predictor: float = 1e-3
    lr_router: float = 1e-2
    warmup_frac: float = 0.01
    # gate temperature schedule
    beta_start: float = 0.1
    beta_end: float = 100.0
    beta_warmup_steps: int = 100
    learnable_betas: bool = False
    # run shape
    seed: int = 42
    batch_size: int = 8
    grad_accum: int = 1
    total_steps: int = 2000
    init_std: float = 0.02

    def resolved_pattern(self) -> tuple:
        if self.pattern:
            return tuple(self.pattern)
        return build_pattern(self.variant, self.layers)

    def routing_mode(self) -> str:
        return "threshold" if self.variant == "stt_threshold" else "fixed"

    def ffn_hidden(self) -> int:
        return int(round(self.d * self.ffn_mult))

    def validate(self) -> None:
        if self.d <= 0 or self.heads <= 0 or self.layers <= 0 or self.seq_len <= 0:
            raise ConfigError("dimensions must be positive")
        if self.d % self.heads != 0:
            raise ConfigError(f"heads ({self.heads}) must divide d ({self.d})")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError(f"warmup_frac must be in [0, 1), got {self.warmup_frac}")
        for name in ("lambda_pred", "lambda_causal", "lambda_g_reg"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0 < self.ma_decay < 1:
            raise ConfigError(f"ma_decay must be in (0, 1), got {self.ma_decay}")
        if self.g_reg_mode not in ("auto", "always", "never"):
            raise ConfigError(f"g_reg_mode must be auto/always/never, got {self.g_reg_mode}")
        validate_pattern(self.resolved_pattern())

    # --- serialisation -----------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "pattern":
                v = ",".join(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        cfg = cls()
        cfg.apply_overrides(parse_config_text(text))
        return cfg

    @classmethod
    def from_file(cls, path) -> "ModelConfig":
        return cls.from_text(Path(path).read_text())

    def apply_overrides(self, overrides: dict) -> None:
        types = {f.name: f for f in fields(self)}
        for key, raw in overrides.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(self, key, _coerce(key, raw, type(getattr(self, key))))


def _coerce(key: str, raw, pytype):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    if key == "pattern":
        return tuple(p.strip() for p in raw.split(",") if p.strip())
    if pytype is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {key!r}: expected a boolean, got {raw!r}")
    if pytype is int:
        return int(raw)
    if pytype is float:
        return float(raw)
    if pytype is tuple:
        return tuple(p.strip() for p in raw.split(",") if p.strip())
    return raw


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_pattern(variant: str, layers: int) -> tuple:
    """Default stack layout: cost-saving layers interleave with full blocks."""
    if variant == "dense":
        return ("dense",) * layers
    if layers % 2 != 0:
        raise ConfigError(f"variant {variant!r} needs an even layer count, got {layers}")
    if variant == "mod":
        return ("dense", "mod") * (layers // 2)
    if variant == "sdt":
        return ("decision", "dynamic") * (layers // 2)
    if variant in ("stt_fixed", "stt_threshold"):
        return ("dense", "stt") * (layers // 2)
    raise ConfigError(f"unknown variant {variant!r}")


def validate_pattern(pattern: tuple) -> None:
    for kind in pattern:
        if kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {kind!r}")
    for i, kind in enumerate(pattern):
        if kind == "dynamic":
            if i == 0 or pattern[i - 1] != "decision":
                raise ConfigError(f"layer {i}: dynamic must immediately follow a decision layer")
        if kind == "decision":
            if i + 1 >= len(pattern) or pattern[i + 1] != "dynamic":
                raise ConfigError(f"layer {i}: decision must be immediately followed by a dynamic layer")
