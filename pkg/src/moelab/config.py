"""Model and cost-model configuration.

All knobs for one MoE transformer stack plus the alpha-beta network model
used by the expert-parallelism simulator. Configs load from a flat
``key = value`` text file with ``#`` comments. Keys are case-sensitive and
unknown keys are rejected so typos fail loudly instead of silently falling
back to defaults.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

VANILLA = "vanilla"
FINE_GRAINED = "fine_grained"
BIGMAC = "bigmac"
VARIANTS = (VANILLA, FINE_GRAINED, BIGMAC)


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


@dataclass(frozen=True)
class ModelConfig:
    """Scalar hyper-parameters of the modelled MoE stack.

    ``b_tokens`` is the number of tokens per iteration (global batch times
    sequence length), kept as a single count because every downstream
    formula consumes the product rather than the factors.
    """

    b_tokens: int = 524288
    s: int = 2048
    h: int = 2048
    e: int = 64
    top_k: int = 8
    f: float = 1.2
    ep: int = 32
    r: float = 0.25
    l: int = 24
    v: int = 50257
    bytes_per_element: int = 2

    @property
    def rh(self) -> int:
        """Expert inner width r*h, guaranteed integral by validation."""
        return round(self.r * self.h)

    def validate(self) -> None:
        for name in ("b_tokens", "s", "h", "e", "top_k", "ep", "l", "v",
                     "bytes_per_element"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer "
                                  f"(got {getattr(self, name)})")
        if not (0.0 < self.r <= 1.0):
            raise ConfigError(f"r must lie in (0, 1] (got {self.r})")
        if abs(self.r * self.h - round(self.r * self.h)) > 1e-9:
            raise ConfigError(f"r*h must be integral (r={self.r}, h={self.h})")
        if self.rh < 1:
            raise ConfigError(f"r*h must be at least 1 (r={self.r}, h={self.h})")
        if self.top_k > self.e:
            raise ConfigError(f"top_k={self.top_k} exceeds e={self.e}")
        if self.e % self.ep != 0:
            raise ConfigError(f"e={self.e} not divisible by ep={self.ep} (e, ep)")
        if self.b_tokens % self.ep != 0:
            raise ConfigError(f"b_tokens={self.b_tokens} not divisible by "
                              f"ep={self.ep} (b_tokens, ep)")
        if not (self.f > 0.0):
            raise ConfigError(f"f must be positive or inf (got {self.f})")


@dataclass(frozen=True)
class CostModel:
    """Alpha-beta network model plus per-device compute throughput.

    alpha_s: fixed latency charged once per all-to-all phase, seconds.
    beta_Bps: per-link bandwidth, bytes per second.
    device_flops: sustained FLOP/s of one device.
    """

    alpha_s: float = 1e-6
    beta_Bps: float = 12.5e9
    device_flops: float = 1e14

    def validate(self) -> None:
        if self.alpha_s < 0.0:
            raise ConfigError(f"alpha_s must be non-negative (got {self.alpha_s})")
        if not (self.beta_Bps > 0.0):
            raise ConfigError(f"beta_Bps must be positive (got {self.beta_Bps})")
        if not (self.device_flops > 0.0):
            raise ConfigError(f"device_flops must be positive "
                              f"(got {self.device_flops})")


_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_COST_KEYS = {f.name for f in fields(CostModel)}
_INT_KEYS = {f.name for f in fields(ModelConfig) if f.type == "int"}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in _INT_KEYS:
        try:
            return int(raw, 0)
        except ValueError:
            raise ConfigError(f"key {key}: expected an integer, got {raw!r}") from None
    try:
        value = float(raw)
    except ValueError:
        raise ConfigError(f"key {key}: expected a number, got {raw!r}") from None
    if math.isnan(value):
        raise ConfigError(f"key {key}: nan is not a valid value")
    return value


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines into a raw {key: number} dict."""
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', "
                              f"got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in _MODEL_KEYS and key not in _COST_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


def parse_overrides(pairs: list[str]) -> dict:
    """Parse repeated KEY=VALUE override strings (command-line form)."""
    values: dict = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r}: expected KEY=VALUE")
        key, _, raw = pair.partition("=")
        key = key.strip()
        if key not in _MODEL_KEYS and key not in _COST_KEYS:
            raise ConfigError(f"override: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


def build_configs(values: dict) -> tuple[ModelConfig, CostModel]:
    """Materialize validated configs from a merged raw value dict."""
    cfg = ModelConfig(**{k: v for k, v in values.items() if k in _MODEL_KEYS})
    cost = CostModel(**{k: v for k, v in values.items() if k in _COST_KEYS})
    cfg.validate()
    cost.validate()
    return cfg, cost


def load_config(path: str | None, overrides: list[str] | None = None,
                ) -> tuple[ModelConfig, CostModel]:
    """Load a config file (optional) and apply overrides on top of defaults."""
    values: dict = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        values.update(parse_config_text(text, source=path))
    if overrides:
        values.update(parse_overrides(overrides))
    return build_configs(values)
