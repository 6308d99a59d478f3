"""
Shared vocabulary of the controller: thinking states, control tags,
threshold/window configuration and sampling settings.

Everything here is immutable after validation and safe to share across
concurrent sessions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, replace
from enum import Enum
from pathlib import Path

__all__ = [
    "ThinkingState",
    "ControlTag",
    "FsmConfig",
    "SamplingConfig",
    "ConfigError",
    "ThresholdOrderViolation",
    "OverlappingHysteresisBands",
    "NonPositiveWindow",
    "InvalidConfig",
    "validate_config",
    "validate_sampling_config",
    "render_tag",
    "parse_tag",
    "load_config_file",
    "dump_config_file",
]


class ThinkingState(Enum):
    """Controller states. INIT is the start state, END is terminal."""

    INIT = "INIT"
    NORMAL = "NORMAL"
    FAST = "FAST"
    SLOW = "SLOW"
    SKIP = "SKIP"
    END = "END"


class ControlTag(Enum):
    """Steering tags appended to the generation context at step boundaries."""

    FAST_STEP = "[Fast_Step]"
    SLOW_STEP = "[Slow_Step]"
    NORMAL_STEP = "[Normal_Step]"
    SKIP_STEP = "[Skip_Step]"


_TAG_BY_TEXT = {t.value: t for t in ControlTag}


def render_tag(tag: ControlTag) -> str:
    """Exact tag literal, no surrounding whitespace."""
    return tag.value


def parse_tag(text: str) -> ControlTag:
    """Inverse of render_tag. Raises ValueError on unknown literals."""
    try:
        return _TAG_BY_TEXT[text]
    except KeyError:
        raise ValueError(f"not a control tag: {text!r}") from None


class ConfigError(ValueError):
    """Base class for configuration problems."""


class ThresholdOrderViolation(ConfigError):
    pass


class OverlappingHysteresisBands(ConfigError):
    pass


class NonPositiveWindow(ConfigError):
    pass


class InvalidConfig(ConfigError):
    """Aggregate of every violated invariant found during validation."""

    def __init__(self, violations: list[ConfigError]):
        self.violations = violations
        super().__init__("; ".join(str(v) for v in violations))


@dataclass(frozen=True)
class FsmConfig:
    """Thresholds, hysteresis margin and entry windows for the state machine."""

    tau_fast: float = 0.2    # enter FAST when a full window stays below this
    tau_slow: float = 0.6    # enter SLOW when a full window stays above this
    tau_skip: float = 0.85   # escalate SLOW to SKIP above this
    delta: float = 0.1       # hysteresis margin on FAST/SLOW exits
    k_fast: int = 6          # window length for FAST entry
    k_slow: int = 5          # window length for SLOW entry
    k_skip: int = 35         # window length for SKIP escalation

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "FsmConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown fsm config fields: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class SamplingConfig:
    """Decoding settings shared by every backend call of a session."""

    temperature: float = 0.6
    top_p: float = 0.95
    max_total_tokens: int = 16384   # whole-session generation budget
    top_k_logprobs: int = 20        # candidates per token; >= 10 for mass@10

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SamplingConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown sampling config fields: {sorted(unknown)}")
        return cls(**data)


def validate_config(cfg: FsmConfig) -> FsmConfig:
    """Return cfg unchanged iff all invariants hold.

    Raises InvalidConfig carrying one entry per violated invariant, so a
    bad config reports every problem at once instead of the first.
    """
    violations: list[ConfigError] = []

    if not (0.0 < cfg.tau_fast < cfg.tau_slow < cfg.tau_skip < 1.0):
        violations.append(ThresholdOrderViolation(
            "thresholds must satisfy 0 < tau_fast < tau_slow < tau_skip < 1, "
            f"got ({cfg.tau_fast}, {cfg.tau_slow}, {cfg.tau_skip})"
        ))
    if cfg.delta <= 0.0:
        violations.append(ConfigError(f"delta must be > 0, got {cfg.delta}"))
    elif not (cfg.tau_fast + cfg.delta < cfg.tau_slow - cfg.delta):
        violations.append(OverlappingHysteresisBands(
            f"exit bands overlap: tau_fast + delta = {cfg.tau_fast + cfg.delta} "
            f"must stay below tau_slow - delta = {cfg.tau_slow - cfg.delta}"
        ))
    for name in ("k_fast", "k_slow", "k_skip"):
        k = getattr(cfg, name)
        if not isinstance(k, int) or k < 1:
            violations.append(NonPositiveWindow(f"{name} must be an integer >= 1, got {k!r}"))

    if violations:
        raise InvalidConfig(violations)
    return cfg


def validate_sampling_config(cfg: SamplingConfig) -> SamplingConfig:
    violations: list[ConfigError] = []
    if cfg.temperature < 0.0:
        violations.append(ConfigError(f"temperature must be >= 0, got {cfg.temperature}"))
    if not (0.0 < cfg.top_p <= 1.0):
        violations.append(ConfigError(f"top_p must be in (0, 1], got {cfg.top_p}"))
    if not isinstance(cfg.max_total_tokens, int) or cfg.max_total_tokens < 1:
        violations.append(ConfigError(
            f"max_total_tokens must be a positive integer, got {cfg.max_total_tokens!r}"))
    if not isinstance(cfg.top_k_logprobs, int) or cfg.top_k_logprobs < 10:
        violations.append(ConfigError(
            f"top_k_logprobs must be an integer >= 10, got {cfg.top_k_logprobs!r}"))
    if violations:
        raise InvalidConfig(violations)
    return cfg


# Config files are one self-describing JSON document covering both sections.

def load_config_file(path: str | Path) -> tuple[FsmConfig, SamplingConfig]:
    """Read {"fsm": {...}, "sampling": {...}} and validate both sections."""
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must contain a JSON object")
    fsm = FsmConfig.from_dict(doc.get("fsm", {}))
    sampling = SamplingConfig.from_dict(doc.get("sampling", {}))
    return validate_config(fsm), validate_sampling_config(sampling)


def dump_config_file(path: str | Path, fsm: FsmConfig, sampling: SamplingConfig) -> None:
    doc = {"fsm": fsm.to_dict(), "sampling": sampling.to_dict()}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def override(cfg, **updates):
    """Functional update for the frozen config dataclasses, dropping Nones."""
    updates = {k: v for k, v in updates.items() if v is not None}
    return replace(cfg, **updates) if updates else cfg
