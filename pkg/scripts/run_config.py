#!/usr/bin/env python3
"""
RNPx run configuration.

One INI file per experiment with the sections [run], [dataset], [model],
[objective], [trainer], [eval] and [paths]. Any key can be overridden on
the command line as `--set section.key=value`.
"""

import configparser
import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_core import PydanticUndefined

from models.rnp_v1.errors import ConfigError
from models.rnp_v1.evaluate import EvalConfig
from models.rnp_v1.model import ModelConfig
from models.rnp_v1.objectives import ObjectiveKind, ObjectiveSpec, TRAIN_SAMPLES
from models.rnp_v1.taskgen import DatasetSpec
from models.rnp_v1.train import AlphaSchedule, ScheduleKind, TrainConfig

logger = logging.getLogger(__name__)

PROJECT_ROOT = Path(__file__).parent.parent


class RunSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int = 0
    name: str = "rnpx"


class ObjectiveSection(BaseModel):
    """Objective plus its alpha schedule (`schedule = constant|linear|step`)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: ObjectiveKind = ObjectiveKind.RNP_VI
    alpha: float = Field(0.7, ge=0.0)
    num_samples: int = Field(TRAIN_SAMPLES, ge=1)
    alpha_eps: float = Field(1e-3, gt=0.0)
    schedule: ScheduleKind = ScheduleKind.CONSTANT
    alpha_end: Optional[float] = None
    anneal_steps: int = Field(0, ge=0)
    granularity: int = Field(10, ge=1)

    def spec(self) -> ObjectiveSpec:
        return ObjectiveSpec(kind=self.kind, alpha=self.alpha, num_samples=self.num_samples,
                             alpha_eps=self.alpha_eps)

    def alpha_schedule(self) -> AlphaSchedule:
        return AlphaSchedule(kind=self.schedule, start=self.alpha, end=self.alpha_end,
                             anneal_steps=self.anneal_steps, granularity=self.granularity)

    @model_validator(mode="after")
    def _check_schedule(self):
        self.alpha_schedule()
        return self


class TrainerSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    batch_tasks: int = Field(16, ge=1)
    steps: int = Field(20000, ge=1)
    learning_rate: float = Field(5e-4, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    checkpoint_interval: int = Field(1000, ge=1)
    val_tasks: int = Field(64, ge=1)


class PathsSection(BaseModel):
    """Output and input locations; `{name}` and `{seed}` expand from [run]."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    output_dir: str = "runs/{name}/seed{seed}"
    metrics: str = ""
    checkpoint: str = ""
    checkpoint_template: str = ""
    hare_lynx: str = "data/hare_lynx/hare_lynx.csv"
    dump: str = "predictions.csv"


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", protected_namespaces=())

    run: RunSection = RunSection()
    dataset: DatasetSpec = DatasetSpec()
    model: ModelConfig = ModelConfig()
    objective: ObjectiveSection = ObjectiveSection()
    trainer: TrainerSection = TrainerSection()
    eval: EvalConfig = EvalConfig()
    paths: PathsSection = PathsSection()

    @property
    def seed(self) -> int:
        return self.run.seed

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON of every key except run.seed."""
        data = self.model_dump(mode="json")
        data["run"].pop("seed")
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def expand(self, template: str) -> Path:
        path = Path(template.format(name=self.run.name, seed=self.run.seed))
        return path if path.is_absolute() else PROJECT_ROOT / path

    @property
    def output_dir(self) -> Path:
        return self.expand(self.paths.output_dir)

    @property
    def metrics_path(self) -> Path:
        return self.expand(self.paths.metrics) if self.paths.metrics else self.output_dir / "metrics.csv"

    @property
    def checkpoint_path(self) -> Path:
        return self.expand(self.paths.checkpoint) if self.paths.checkpoint else self.output_dir / "ckpt_final"

    def train_config(self) -> TrainConfig:
        t = self.trainer
        return TrainConfig(
            name=self.run.name, dataset=self.dataset, model=self.model,
            objective=self.objective.spec(), schedule=self.objective.alpha_schedule(),
            batch_tasks=t.batch_tasks, steps=t.steps, learning_rate=t.learning_rate,
            beta1=t.beta1, beta2=t.beta2, adam_eps=t.adam_eps, seed=self.run.seed,
            checkpoint_interval=t.checkpoint_interval, val_tasks=t.val_tasks,
            eval_samples=self.eval.num_samples, config_hash=self.config_hash(),
        )


def resolve_input(path) -> Path:
    """Relative inputs resolve against the working directory, then the project root."""
    path = Path(path)
    if path.is_absolute() or path.exists():
        return path
    return PROJECT_ROOT / path


def _read_ini(path: Path) -> Dict[str, Dict[str, str]]:
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    return {section: dict(parser[section]) for section in parser.sections()}


def apply_override(data: Dict[str, Dict[str, str]], assignment: str):
    """Apply one `section.key=value` override in place."""
    key, sep, value = assignment.partition("=")
    section, dot, name = key.strip().partition(".")
    if not sep or not dot or not section or not name:
        raise ConfigError(f"override must look like section.key=value, got {assignment!r}")
    data.setdefault(section, {})[name] = value.strip()


def load_run_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    """Read an INI file (optional), apply overrides, and validate every key."""
    data = _read_ini(resolve_input(path)) if path else {}
    for assignment in overrides:
        apply_override(data, assignment)

    unknown = sorted(set(data) - set(RunConfig.model_fields))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    # empty values mean "use the default"
    cleaned = {section: {k: v for k, v in keys.items() if v != ""} for section, keys in data.items()}
    try:
        return RunConfig.model_validate(cleaned)
    except ValidationError as e:
        raise ConfigError(" ".join(str(e).split())) from e


def _render_default(value) -> str:
    if value is None or value is PydanticUndefined:
        return "(unset)"
    if hasattr(value, "value"):
        return str(value.value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def describe_keys() -> str:
    """Every recognised `section.key` with its default, one per line."""
    lines = ["configuration keys (section.key = default):"]
    for section, info in RunConfig.model_fields.items():
        for key, field in info.annotation.model_fields.items():
            lines.append(f"  {section}.{key} = {_render_default(field.default)}")
    return "\n".join(lines)
