"""Run configuration: one TOML file with a table per component, plus command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from .dataset_gen import DatasetSpec, derive_seed
from .heart_model import HeartParams
from .rl_agent import AgentTrainConfig
from .rm_trainer import TrainSpec
from .trace_model import TimingConfig


@dataclass(frozen=True)
class CrossValidation:
    archs: tuple[str, ...] = ("lstm", "transformer")
    windows: tuple[int, ...] = (20, 30, 50, 100)
    n_configs: int = 20  # how many of the 20 (val, test) fold configurations to run
    agent_arch: str = "lstm"  # reward machine handed to the agent
    agent_window: int = 20


@dataclass(frozen=True)
class VerifyConfig:
    steps: int = 5000
    seed: int = 1
    dfa_horizon: int = 20000
    dfa_seeds: tuple[int, ...] = (0, 1, 2)


@dataclass(frozen=True)
class Gates:
    """Conditions the pipeline checks before exiting 0."""
    min_mean_f1: float = 0.0
    max_incorrect: int | None = None
    require_dfa_match: bool = False


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    threads: int = 1
    timing: TimingConfig = field(default_factory=TimingConfig)
    heart: HeartParams = field(default_factory=HeartParams)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    agent: AgentTrainConfig = field(default_factory=AgentTrainConfig)
    cv: CrossValidation = field(default_factory=CrossValidation)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    gates: Gates = field(default_factory=Gates)

    def sub_seed(self, component: str, index: int = 0) -> int:
        return derive_seed(self.seed, component, index)

    def validate(self) -> None:
        self.timing.validate()
        self.heart.validate()
        if self.agent.log_len != self.cv.agent_window:
            raise ValueError(f"agent.log_len ({self.agent.log_len}) must equal cv.agent_window ({self.cv.agent_window})")
        missing = set(self.cv.windows) - set(self.dataset.window_sizes)
        if missing:
            raise ValueError(f"cv.windows {sorted(missing)} not in dataset.window_sizes")
        if self.cv.agent_window not in self.dataset.window_sizes:
            raise ValueError(f"cv.agent_window {self.cv.agent_window} not in dataset.window_sizes")
        if not 1 <= self.cv.n_configs <= 20:
            raise ValueError("cv.n_configs must lie in 1..20")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


_SECTIONS = {
    "timing": TimingConfig, "heart": HeartParams, "dataset": DatasetSpec, "train": TrainSpec,
    "agent": AgentTrainConfig, "cv": CrossValidation, "verify": VerifyConfig, "gates": Gates,
}


def _coerce(cls, values: dict[str, Any], section: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ValueError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    kwargs = {}
    for k, v in values.items():
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    return cls(**kwargs)


def from_dict(raw: dict[str, Any]) -> RunConfig:
    top = {}
    sections = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ValueError(f"[{key}] must be a table")
            sections[key] = value
        elif key in ("seed", "out_dir", "threads"):
            top[key] = value
        else:
            raise ValueError(f"unknown top-level key {key!r}")
    built = {name: _coerce(_SECTIONS[name], vals, name) for name, vals in sections.items()}
    cfg = RunConfig(**top, **built)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ValueError(f"{path}: {exc}") from exc
    return from_dict(raw)


def override(cfg: RunConfig, **changes: Any) -> RunConfig:
    """Replace top-level fields (``seed``, ``out_dir``, ``threads``) ignoring ``None`` values."""
    changes = {k: v for k, v in changes.items() if v is not None}
    new = dataclasses.replace(cfg, **changes)
    new.validate()
    return new


def dump_toml(cfg: RunConfig) -> str:
    """Render a config back to TOML (flat tables, lists for tuples)."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        return repr(v)

    lines = [f"seed = {cfg.seed}", f"out_dir = {fmt(cfg.out_dir)}", f"threads = {cfg.threads}"]
    for name in _SECTIONS:
        lines.append("")
        lines.append(f"[{name}]")
        for k, v in dataclasses.asdict(getattr(cfg, name)).items():
            if v is not None:
                lines.append(f"{k} = {fmt(v)}")
    return "\n".join(lines) + "\n"
