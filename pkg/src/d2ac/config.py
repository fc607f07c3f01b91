"""Run configuration: ``key = value`` text files with ``#`` comments."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields

from .engine import TrainConfig
from .envs import ENV_NAMES, make_env
from .errors import ConfigError, ConfigParseError

OUTPUT_DIR_ENV = "D2AC_OUTPUT_DIR"

# Defaults that differ between dense-reward and sparse multi-goal tasks.
REWARD_KIND_DEFAULTS = {
    "dense": dict(target_update_interval=1, env_opt_ratio=1, workers=4, buffer_size=1_000_000, her=False),
    "sparse": dict(target_update_interval=10, env_opt_ratio=2, workers=20, buffer_size=2_500_000, her=True),
}

SUPPORT_DEFAULTS = {
    "point_mass_dense": (-100.0, 0.0, 101),
    "point_mass_goal": (-50.0, 0.0, 101),
    "pendulum": (-1000.0, 1000.0, 201),
    "predator_prey": (-200.0, 200.0, 201),
}


@dataclass
class RunConfig(TrainConfig):
    env: str = "point_mass_dense"
    total_steps: int = 30_000
    eval_interval: int = 2_500
    eval_episodes: int = 10
    checkpoint_every: int = 10
    output_dir: str = "runs/default"
    seeds: int = 3
    cells: str = "full,no_cdq,scalar_cdq,scalar_single"
    k_grid: str = ""

    def validate(self) -> None:
        super().validate()
        if self.env not in ENV_NAMES:
            raise ConfigError(f"unknown env {self.env!r}; choose from {', '.join(ENV_NAMES)}")
        if self.total_steps < 0:
            raise ConfigError(f"total_steps must be non-negative, got {self.total_steps}")
        for name in ("eval_interval", "eval_episodes", "checkpoint_every", "seeds"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")


def env_defaults(env: str) -> dict:
    if env not in ENV_NAMES:
        raise ConfigError(f"unknown env {env!r}; choose from {', '.join(ENV_NAMES)}")
    kind = make_env(env, 0).spec.reward_kind
    v_min, v_max, n_atoms = SUPPORT_DEFAULTS[env]
    return dict(REWARD_KIND_DEFAULTS[kind], v_min=v_min, v_max=v_max, n_atoms=n_atoms)


_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _convert(kind, raw: str):
    if kind is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is int:
        value = float(raw)
        if not value.is_integer():
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(value)
    if kind is float:
        return float(raw)
    return raw


def _field_types() -> dict[str, type]:
    kinds = {"int": int, "float": float, "bool": bool, "str": str}
    return {f.name: kinds[f.type] if isinstance(f.type, str) else f.type for f in fields(RunConfig)}


def parse_config_text(text: str, overrides: dict | None = None) -> RunConfig:
    """Parse ``key = value`` lines. Keys not given take the defaults for the chosen env."""
    types = _field_types()
    given: dict[str, object] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigParseError(line_no, f"expected 'key = value', got {line.strip()!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if not key:
            raise ConfigParseError(line_no, f"missing key in {line.strip()!r}")
        if key not in types:
            raise ConfigError(f"line {line_no}: unknown key {key!r}")
        if key in given:
            raise ConfigParseError(line_no, f"duplicate key {key!r}")
        if not raw and types[key] is not str:
            raise ConfigParseError(line_no, f"missing value for {key!r}")
        try:
            given[key] = _convert(types[key], raw)
        except ValueError as exc:
            raise ConfigParseError(line_no, f"{key}: {exc}") from None
    for key, value in (overrides or {}).items():
        if key not in types:
            raise ConfigError(f"unknown key {key!r}")
        given[key] = _convert(types[key], value) if isinstance(value, str) else value
    env = str(given.get("env", RunConfig.env))
    values = {**env_defaults(env), **given}
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def parse_config(path, overrides: dict | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), overrides)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(cfg: RunConfig) -> str:
    """Serialize every field; ``parse_config_text(format_config(c)) == c``."""
    return "".join(f"{k} = {_format(v)}\n" for k, v in asdict(cfg).items())


def resolve_output_dir(cfg: RunConfig) -> str:
    return os.environ.get(OUTPUT_DIR_ENV) or cfg.output_dir
