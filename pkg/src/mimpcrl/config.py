"""Run configuration: one INI file covering every tunable of a run.

A config file may set any subset of the keys; unset keys keep the
benchmark defaults, which match the bundled ``configs/default.ini``.
Every key can also be overridden through the environment as
``MIMPCRL__<SECTION>__<KEY>`` (for example ``MIMPCRL__TRAINING__STEPS=5``),
applied on top of the file.  Unknown sections or keys are rejected with
the offending line number rather than ignored, so typos cannot silently
fall back to defaults.
"""

from __future__ import annotations

import configparser
import os
import re
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping, get_type_hints

import numpy as np

from .critic import CriticConfig
from .ocp import THETA_LABELS, MpcParams, OcpSpec, build_scalar_example
from .policy import ExplorationConfig
from .trainer import TrainSettings

_ENV_PREFIX = "MIMPCRL__"

#: Section layout of the config file; key order is the canonical
#: serialization order.
_SCHEMA: dict[str, tuple[str, ...]] = {
    "model": (
        "x_ref",
        "u_ref",
        "switch_cost",
        "penalty_weight",
        "model_bias",
        "horizon",
    ),
    "exploration": ("integer_temperature", "continuous_scale"),
    "training": (
        "steps",
        "learning_rate",
        "discount",
        "rollouts",
        "rollout_horizon",
        "initial_state",
        "update_mode",
        "evaluation_rollouts",
        "adapt_mask",
    ),
    "critic": (
        "grid_low",
        "grid_high",
        "grid_nodes",
        "tolerance",
        "max_sweeps",
        "tilt_nodes",
        "noise_cells",
    ),
    "numerics": ("tau_target", "fd_step", "curvature_step"),
    "run": ("seed", "output_dir"),
}


@dataclass(frozen=True)
class RunConfig:
    """Validated snapshot of every tunable.

    Construction triggers the same precondition checks the individual
    modules would raise at use time, so a config that loads is a config
    that runs.
    """

    x_ref: float = 0.0
    u_ref: float = 0.0
    switch_cost: float = 0.2
    penalty_weight: float = 1.0
    model_bias: float = 0.0
    horizon: int = 10
    integer_temperature: float = 2e-2
    continuous_scale: float = 1e-2
    steps: int = 100
    learning_rate: float = 2e-3
    discount: float = 0.95
    rollouts: int = 30
    rollout_horizon: int = 50
    initial_state: float = 0.0
    update_mode: str = "compatible"
    evaluation_rollouts: int = 1000
    adapt_mask: tuple[bool, ...] = (True, True, True, True, True)
    grid_low: float = -1.5
    grid_high: float = 1.5
    grid_nodes: int = 301
    tolerance: float = 1e-6
    max_sweeps: int = 10_000
    tilt_nodes: int = 5
    noise_cells: int = 8
    tau_target: float = 1e-9
    fd_step: float = 1e-4
    curvature_step: float = 1e-4
    seed: int = 0
    output_dir: str = "runs"

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "adapt_mask", tuple(bool(b) for b in self.adapt_mask)
        )
        for field in fields(self):
            value = getattr(self, field.name)
            if isinstance(value, float) and not np.isfinite(value):
                raise ValueError(f"{field.name} must be finite, got {value}")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.rollouts < 1 or self.rollout_horizon < 1:
            raise ValueError("rollouts and rollout_horizon must be at least 1")
        if self.rollouts * self.rollout_horizon <= len(THETA_LABELS):
            raise ValueError(
                "rollouts * rollout_horizon must exceed the parameter count"
            )
        if self.evaluation_rollouts < 2:
            raise ValueError("evaluation_rollouts must be at least 2")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        if self.tau_target <= 0 or self.fd_step <= 0 or self.curvature_step <= 0:
            raise ValueError("tau_target, fd_step and curvature_step must be positive")
        if len(self.adapt_mask) != len(THETA_LABELS):
            raise ValueError(
                f"adapt_mask needs {len(THETA_LABELS)} entries, got {len(self.adapt_mask)}"
            )
        if not self.output_dir or self.output_dir != self.output_dir.strip():
            raise ValueError("output_dir must be a non-empty path")
        # nested constructors enforce the remaining module preconditions
        self.mpc_params()
        self.settings()

    def mpc_params(self) -> MpcParams:
        return MpcParams(
            x_ref=self.x_ref,
            u_ref=self.u_ref,
            switch_cost=self.switch_cost,
            penalty_weight=self.penalty_weight,
            model_bias=self.model_bias,
        )

    def theta(self) -> np.ndarray:
        return self.mpc_params().as_array()

    def problem(self) -> OcpSpec:
        return build_scalar_example(horizon=self.horizon)

    def exploration(self) -> ExplorationConfig:
        return ExplorationConfig(
            integer_temperature=self.integer_temperature,
            continuous_scale=self.continuous_scale,
        )

    def critic(self) -> CriticConfig:
        return CriticConfig(
            grid_low=self.grid_low,
            grid_high=self.grid_high,
            grid_nodes=self.grid_nodes,
            tolerance=self.tolerance,
            max_sweeps=self.max_sweeps,
            tilt_nodes=self.tilt_nodes,
            noise_cells=self.noise_cells,
        )

    def settings(self) -> TrainSettings:
        return TrainSettings(
            steps=self.steps,
            learning_rate=self.learning_rate,
            discount=self.discount,
            exploration=self.exploration(),
            rollouts=self.rollouts,
            rollout_horizon=self.rollout_horizon,
            initial_state=self.initial_state,
            seed=self.seed,
            update_mode=self.update_mode,
            evaluation_rollouts=self.evaluation_rollouts,
            critic=self.critic(),
            tau_target=self.tau_target,
            fd_step=self.fd_step,
            curvature_step=self.curvature_step,
            adapt_mask=self.adapt_mask,
        )


_FIELD_TYPES = get_type_hints(RunConfig)


def _parse_value(section: str, key: str, raw: str, where: str = "") -> object:
    raw = raw.strip()
    if key == "adapt_mask":
        parts = [p.strip() for p in raw.split(",")]
        if not all(p in ("0", "1") for p in parts):
            raise ValueError(
                f"[{section}] {key} must be comma-separated 0/1 flags, got {raw!r}{where}"
            )
        return tuple(p == "1" for p in parts)
    kind = _FIELD_TYPES[key]
    if kind is str:
        return raw
    try:
        return kind(raw)
    except ValueError:
        raise ValueError(
            f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}{where}"
        ) from None


def _line_hint(text: str, token: str) -> str:
    """Best-effort line number of a section header or key assignment."""
    pattern = re.compile(rf"^\s*(\[{re.escape(token)}\]|{re.escape(token)}\s*[=:])")
    for number, line in enumerate(text.splitlines(), start=1):
        if pattern.match(line):
            return f" (line {number})"
    return ""


def _key_section(key: str) -> str | None:
    for section, keys in _SCHEMA.items():
        if key in keys:
            return section
    return None


def _env_overrides(env: Mapping[str, str]) -> list[tuple[str, str, str]]:
    overrides = []
    for name in sorted(env):
        if not name.startswith(_ENV_PREFIX):
            continue
        parts = name[len(_ENV_PREFIX) :].split("__")
        if len(parts) != 2:
            raise ValueError(
                f"malformed override variable {name}: expected "
                f"{_ENV_PREFIX}<SECTION>__<KEY>"
            )
        section, key = parts[0].lower(), parts[1].lower()
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ValueError(f"environment variable {name} names no config key")
        overrides.append((section, key, env[name]))
    return overrides


def loads(text: str, env: Mapping[str, str] | None = None) -> RunConfig:
    """Parse config text, then apply environment overrides on top."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ValueError(f"config parse failure: {err}") from None
    if parser.defaults():
        raise ValueError("the DEFAULT section is not supported; use explicit sections")

    values: dict[str, object] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            known = ", ".join(_SCHEMA)
            raise ValueError(
                f"unknown config section [{section}]{_line_hint(text, section)}; "
                f"known sections: {known}"
            )
        for key, raw in parser[section].items():
            if key not in _SCHEMA[section]:
                hint = _line_hint(text, key)
                right = _key_section(key)
                extra = f"; did you mean section [{right}]?" if right else ""
                raise ValueError(f"unknown config key [{section}] {key}{hint}{extra}")
            values[key] = _parse_value(section, key, raw, _line_hint(text, key))

    for section, key, raw in _env_overrides(env or {}):
        values[key] = _parse_value(section, key, raw, " (from environment)")
    return RunConfig(**values)


def load_config(path: str | Path, env: Mapping[str, str] | None = None) -> RunConfig:
    """Read a config file; ``env`` defaults to the process environment."""
    text = Path(path).read_text(encoding="utf-8")
    return loads(text, os.environ if env is None else env)


def _format_value(value: object) -> str:
    if isinstance(value, tuple):
        return ",".join("1" if b else "0" for b in value)
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dumps(config: RunConfig) -> str:
    """Canonical INI text; ``loads(dumps(c))`` reproduces ``c`` exactly."""
    lines = []
    for section, keys in _SCHEMA.items():
        lines.append(f"[{section}]")
        for key in keys:
            lines.append(f"{key} = {_format_value(getattr(config, key))}")
        lines.append("")
    return "\n".join(lines)


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(config), encoding="utf-8")
