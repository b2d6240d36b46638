"""
Experiment configuration: frozen section dataclasses and the flat
`section.field=value` file format.

    # comment
    schedule.T=21
    denoiser.hidden=128,128
    prep.rotate=yes
"""

from __future__ import annotations

import logging
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Literal

from .diffusion import InferenceMode
from .meta import MetaConfig
from .schedule import NoiseSchedule, linear_alpha_schedule
from .tasks import FAMILIES, TaskFamily
from .weightprep import PrepConfig

log = logging.getLogger(__name__)

TRUE_WORDS = {"true", "1", "yes"}
FALSE_WORDS = {"false", "0", "no"}

# prep.k always follows schedule.k
DERIVED_KEYS = {"prep.k": "schedule.k"}


class ConfigError(ValueError):
    """Bad configuration file or value."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True)
class ScheduleSection:
    T: int = 21
    k: int = 3
    alpha_min: float = 0.70
    alpha_max: float = 0.999

    def __post_init__(self) -> None:
        self.build()

    def build(self, k: int | None = None, T: int | None = None) -> NoiseSchedule:
        return linear_alpha_schedule(self.T if T is None else T, self.k if k is None else k, self.alpha_min, self.alpha_max)


@dataclass(frozen=True)
class TaskSection:
    family: TaskFamily = "blobs"
    n_way: int = 2
    k_shot: int = 5
    query_size: int = 20
    hidden: tuple[int, ...] = (32, 32)

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown task family {self.family!r}")
        if self.n_way < 1 or self.k_shot < 1 or self.query_size < 1:
            raise ValueError("n_way, k_shot and query_size must be positive")
        if self.family == "blobs" and self.n_way < 2:
            raise ValueError("blobs tasks need n_way >= 2")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")


@dataclass(frozen=True)
class DenoiserSection:
    t_embed_dim: int = 16
    hidden: tuple[int, ...] = (128, 128)
    init_std: float = 0.05

    def __post_init__(self) -> None:
        if self.t_embed_dim < 2 or self.t_embed_dim % 2:
            raise ValueError("t_embed_dim must be a positive even number")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ValueError("denoiser needs at least one positive hidden width")
        if not self.init_std > 0:
            raise ValueError("init_std must be positive")


@dataclass(frozen=True)
class RunSection:
    base_seed: int = 0
    n_train_tasks: int = 16
    n_eval_tasks: int = 8
    inference_mode: InferenceMode = "posterior"
    finetune_steps: int = 0
    finetune_lr: float = 0.01
    reptile_finetune_steps: int = 5
    n_seeds: int = 10
    k_sweep: tuple[int, ...] = (1, 2, 3, 4, 5)
    component_ablation: bool = False
    max_fail_fraction: float = 0.1
    recovery_chains: int = 10
    recovery_tolerance: float = 0.1

    def __post_init__(self) -> None:
        if self.base_seed < 0:
            raise ValueError("base_seed must be nonnegative")
        if self.n_train_tasks < 1 or self.n_eval_tasks < 1 or self.n_seeds < 1:
            raise ValueError("task and seed counts must be positive")
        if self.finetune_steps < 0 or self.reptile_finetune_steps < 0:
            raise ValueError("finetune step counts must be nonnegative")
        if not self.finetune_lr > 0:
            raise ValueError("finetune_lr must be positive")
        if not self.k_sweep or any(k < 1 for k in self.k_sweep):
            raise ValueError("k_sweep needs positive segment numbers")
        if not 0.0 <= self.max_fail_fraction < 1.0:
            raise ValueError("max_fail_fraction must lie in [0, 1)")
        if self.recovery_chains < 1 or not self.recovery_tolerance > 0:
            raise ValueError("recovery_chains and recovery_tolerance must be positive")


@dataclass(frozen=True)
class VerifySection:
    n_instances: int = 100
    prop1_trials: int = 100
    grad_checks: int = 20
    grad_tol: float = 1e-4
    hessian_iters: int = 50
    n_max: int = 20
    M_max: int = 50
    rhs_scale: float = 1.0

    def __post_init__(self) -> None:
        if min(self.n_instances, self.prop1_trials, self.grad_checks, self.hessian_iters) < 1:
            raise ValueError("verification counts must be positive")
        if self.n_max < 1 or self.M_max < 1:
            raise ValueError("n_max and M_max must be positive")
        if not self.rhs_scale > 0 or not self.grad_tol > 0:
            raise ValueError("rhs_scale and grad_tol must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    prep: PrepConfig = field(default_factory=PrepConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    task: TaskSection = field(default_factory=TaskSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    run: RunSection = field(default_factory=RunSection)
    verify: VerifySection = field(default_factory=VerifySection)

    def __post_init__(self) -> None:
        if self.prep.k != self.schedule.k:
            object.__setattr__(self, "prep", replace(self.prep, k=self.schedule.k))
        if self.prep.rotate and self.task.family != "blobs":
            raise ValueError("rotation augmentation needs 2-D blobs inputs")

    def with_seed(self, seed: int) -> ExperimentConfig:
        return replace(self, run=replace(self.run, base_seed=seed))

    def with_k(self, k: int, T: int | None = None) -> ExperimentConfig:
        schedule = replace(self.schedule, k=k, T=self.schedule.T if T is None else T)
        return replace(self, schedule=schedule, prep=replace(self.prep, k=k))


SECTION_NAMES = tuple(f.name for f in fields(ExperimentConfig))


# ──────────────────────────────────────────────────────────────────────────────
# Parsing
# ──────────────────────────────────────────────────────────────────────────────

def _convert(raw: str, hint: Any) -> Any:
    origin = typing.get_origin(hint)
    if origin is Literal:
        choices = typing.get_args(hint)
        if raw not in choices:
            raise ValueError(f"expected one of {', '.join(choices)}, got {raw!r}")
        return raw
    if origin is tuple:
        if not raw:
            return ()
        return tuple(int(part.strip()) for part in raw.split(","))
    if hint is bool:
        word = raw.lower()
        if word in TRUE_WORDS:
            return True
        if word in FALSE_WORDS:
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    return raw


def parse_config(text: str) -> ExperimentConfig:
    defaults = ExperimentConfig()
    overrides: dict[str, dict[str, Any]] = {name: {} for name in SECTION_NAMES}
    last_line: dict[str, int] = {}

    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {raw_line.strip()!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key in DERIVED_KEYS:
            raise ConfigError(f"{key} is derived, set {DERIVED_KEYS[key]} instead", lineno)
        section, _, name = key.partition(".")
        if section not in overrides or not name:
            raise ConfigError(f"unknown key {key!r}", lineno)
        hints = typing.get_type_hints(type(getattr(defaults, section)))
        if name not in hints:
            raise ConfigError(f"unknown key {key!r}", lineno)
        try:
            overrides[section][name] = _convert(value, hints[name])
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {e}", lineno) from e
        last_line[section] = lineno

    sections = {}
    for name in SECTION_NAMES:
        try:
            sections[name] = replace(getattr(defaults, name), **overrides[name])
        except ValueError as e:
            raise ConfigError(f"invalid [{name}] settings: {e}", last_line.get(name)) from e
    try:
        return ExperimentConfig(**sections)
    except ValueError as e:
        raise ConfigError(str(e), max(last_line.values(), default=None)) from e


def load_config(path: str | Path | None = None, seed: int | None = None) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        cfg = parse_config(text)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    log.debug("resolved config: %s", cfg)
    return cfg


def _render(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def config_lines(cfg: ExperimentConfig) -> list[str]:
    """Every setting as a `section.field=value` line, in declaration order."""
    lines = []
    for name in SECTION_NAMES:
        section = getattr(cfg, name)
        for f in fields(section):
            key = f"{name}.{f.name}"
            if key not in DERIVED_KEYS:
                lines.append(f"{key}={_render(getattr(section, f.name))}")
    return lines
