"""Run configuration: gateway settings, mask parameters, judge limits, and the
loop budgets. Loadable from a flat ``key = value`` text file; CLI flags win
over file values."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigInvalid
from .gateway import BackendKind, GatewayConfig
from .judge import DEFAULT_RUN_COMMANDS, RunLimits
from .masking import MaskParams
from .model import DEFAULT_DIMENSIONS, Dimension


@dataclass
class Config:
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    mask_params: MaskParams = field(default_factory=MaskParams)
    run_limits: RunLimits = field(default_factory=RunLimits)
    max_iterations: int = 10
    max_questions: int = 20
    parallel_sessions: int = 4
    judge_process_cap: int = 4
    language: str = "python"
    template_dir: str | None = None
    few_shot_path: str | None = None
    run_commands: dict[str, list[str]] = field(default_factory=lambda: dict(DEFAULT_RUN_COMMANDS))
    taxonomy: tuple[Dimension, ...] = DEFAULT_DIMENSIONS
    deterministic_timing: bool | None = None  # None: deterministic under mock/replay

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ConfigInvalid("max_iterations must be >= 1")
        if self.max_questions < 1:
            raise ConfigInvalid("max_questions must be >= 1")
        if self.parallel_sessions < 1:
            raise ConfigInvalid("parallel_sessions must be >= 1")


_GATEWAY_KEYS = {
    "kind": lambda v: BackendKind(v.upper().replace("-", "_")),
    "endpoint": str,
    "model": str,
    "timeout_s": float,
    "max_retries": int,
    "session_token_budget": int,
    "api_key_env": str,
    "script_path": str,
    "cassette_path": str,
    "record_path": str,
}

_MASK_KEYS = {
    "min_gap_words": int,
    "max_spans_per_sentence": int,
    "max_total_spans": int,
    "max_masked_word_fraction": float,
    "protected_keywords": lambda v: frozenset(w.strip().lower() for w in v.split(",") if w.strip()),
}

_LIMIT_KEYS = {
    "wall_time_s": float,
    "memory_mb": int,
    "max_output_bytes": int,
}

_TOP_KEYS = {
    "max_iterations": int,
    "max_questions": int,
    "parallel_sessions": int,
    "judge_process_cap": int,
    "language": str,
    "template_dir": str,
    "few_shot_path": str,
    "deterministic_timing": lambda v: v.strip().lower() in ("1", "true", "yes"),
}


def parse_config_text(text: str, source: str = "<config>") -> Config:
    """Parse ``section.key = value`` lines; '#' starts a comment."""
    gateway_kwargs: dict[str, Any] = {}
    mask_kwargs: dict[str, Any] = {}
    limit_kwargs: dict[str, Any] = {}
    top_kwargs: dict[str, Any] = {}
    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigInvalid(f"{source}:{line_no}: expected 'key = value', got {raw_line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            if key.startswith("gateway."):
                sub = key[len("gateway."):]
                gateway_kwargs[sub] = _GATEWAY_KEYS[sub](value)
            elif key.startswith("mask."):
                sub = key[len("mask."):]
                mask_kwargs[sub] = _MASK_KEYS[sub](value)
            elif key.startswith("limits."):
                sub = key[len("limits."):]
                limit_kwargs[sub] = _LIMIT_KEYS[sub](value)
            elif key in _TOP_KEYS:
                top_kwargs[key] = _TOP_KEYS[key](value)
            else:
                raise KeyError(key)
        except KeyError:
            raise ConfigInvalid(f"{source}:{line_no}: unknown config key {key!r}") from None
        except (ValueError, TypeError) as exc:
            raise ConfigInvalid(f"{source}:{line_no}: bad value for {key!r}: {exc}") from None
    return Config(
        gateway=GatewayConfig(**gateway_kwargs),
        mask_params=MaskParams(**mask_kwargs),
        run_limits=RunLimits(**limit_kwargs),
        **top_kwargs,
    )


def load_config(path: str | Path) -> Config:
    path = Path(path)
    if not path.exists():
        raise ConfigInvalid(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


def apply_overrides(config: Config, **overrides: Any) -> Config:
    """Flag-style overrides; None values are ignored (flags win when set)."""
    gateway_fields = {f.name for f in fields(GatewayConfig)}
    config_fields = {f.name for f in fields(Config)}
    gateway_updates = {}
    top_updates = {}
    for key, value in overrides.items():
        if value is None:
            continue
        if key in gateway_fields:
            gateway_updates[key] = value
        elif key in config_fields:
            top_updates[key] = value
        else:
            raise ConfigInvalid(f"unknown override {key!r}")
    gateway = replace(config.gateway, **gateway_updates) if gateway_updates else config.gateway
    return replace(config, gateway=gateway, **top_updates)
