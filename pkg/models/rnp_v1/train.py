"""
Meta-training loop for the RNPx neural process.

Each step draws a minibatch of tasks, averages the selected objective over
it, and takes one Adam step. Every `checkpoint_interval` steps a checkpoint
is written and the model is scored on a held-out validation slice.
"""

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence

import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch.utils.data import Dataset
from tqdm import tqdm

from models.rnp_v1.errors import DomainError, NumericError
from models.rnp_v1.evaluate import (EvalSplit, MetricsRecord, RunLabels, eval_marginal_ll,
                                    make_exp_id, write_metrics)
from models.rnp_v1.model import ModelConfig, NeuralProcess, build_model, save_checkpoint
from models.rnp_v1.numkit import RngStream
from models.rnp_v1.objectives import (EVAL_SAMPLES, ObjectiveSpec, batch_loss,
                                      log_weight_range)
from models.rnp_v1.taskgen import DatasetSpec, Task, TaskSource

logger = logging.getLogger(__name__)


class ScheduleKind(str, Enum):
    CONSTANT = "constant"
    LINEAR_ANNEAL = "linear"
    STEP_ANNEAL = "step"


class AlphaSchedule(BaseModel):
    """alpha as a function of the training step.

    Annealing schedules move from `start` down to `end` over `anneal_steps`
    and are restricted to 0 < end <= start < 1.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: ScheduleKind = ScheduleKind.CONSTANT
    start: float = Field(0.7, ge=0.0)
    end: Optional[float] = None
    anneal_steps: int = Field(0, ge=0)
    granularity: int = Field(10, ge=1)

    @model_validator(mode="after")
    def _check_anneal(self):
        if self.kind == ScheduleKind.CONSTANT:
            return self
        if self.end is None or self.anneal_steps < 1:
            raise ValueError(f"{self.kind.value} schedule needs `end` and anneal_steps >= 1")
        if not (0.0 < self.end <= self.start < 1.0):
            raise ValueError(f"annealing needs 0 < end <= start < 1, got {self.start} -> {self.end}")
        return self


def alpha_at(schedule: AlphaSchedule, step: int) -> float:
    if step < 0:
        raise DomainError(f"step must be >= 0, got {step}")
    if schedule.kind == ScheduleKind.CONSTANT:
        return schedule.start
    progress = min(step / schedule.anneal_steps, 1.0)
    if schedule.kind == ScheduleKind.STEP_ANNEAL:
        progress = math.floor(progress * schedule.granularity) / schedule.granularity
    return schedule.start + (schedule.end - schedule.start) * progress


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", protected_namespaces=())

    name: str = "rnpx"
    dataset: DatasetSpec = DatasetSpec()
    model: ModelConfig = ModelConfig()
    objective: ObjectiveSpec = ObjectiveSpec()
    schedule: Optional[AlphaSchedule] = None
    batch_tasks: int = Field(16, ge=1)
    steps: int = Field(20000, ge=1)
    learning_rate: float = Field(5e-4, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    seed: int = 0
    checkpoint_interval: int = Field(1000, ge=1)
    val_tasks: int = Field(64, ge=1)
    eval_samples: int = Field(EVAL_SAMPLES, ge=1)
    config_hash: str = ""

    def alpha_schedule(self) -> AlphaSchedule:
        return self.schedule or AlphaSchedule(start=self.objective.alpha)


@dataclass
class TrainResult:
    model: NeuralProcess
    final_checkpoint: Path
    checkpoints: List[Path] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    alphas: List[float] = field(default_factory=list)
    records: List[MetricsRecord] = field(default_factory=list)


class TaskDataset(Dataset):
    """Map-style view of a task source for minibatch sampling."""

    def __init__(self, source: TaskSource):
        self.source = source

    def __len__(self):
        return len(self.source)

    def __getitem__(self, idx) -> Task:
        return self.source[int(idx)]


def sample_batch(dataset: TaskDataset, batch_tasks: int, seed: int, step: int) -> List[Task]:
    """Tasks drawn with replacement, keyed by (seed, step)."""
    indices = RngStream(seed, "batch", (step,)).generator.integers(0, len(dataset), batch_tasks)
    return [dataset[i] for i in indices]


def make_optimizer(model: NeuralProcess, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                            betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps, foreach=False)


@contextmanager
def single_threaded():
    """Pin torch intra-op parallelism to one thread for the duration."""
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(previous)


def _diagnose(model: NeuralProcess, tasks: Sequence[Task], cfg: TrainConfig, step: int) -> str:
    lows, highs = [], []
    for i, task in enumerate(tasks):
        try:
            lo, hi = log_weight_range(model, task, cfg.objective.num_samples,
                                      RngStream(cfg.seed, "diagnose", (step, i)))
        except NumericError:
            continue
        lows.append(lo)
        highs.append(hi)
    if not lows:
        return "log-weights unavailable"
    return f"log-weight min {min(lows):.6g}, max {max(highs):.6g}"


def train(cfg: TrainConfig, output_dir, train_tasks: Optional[Sequence[Task]] = None,
          val_tasks: Optional[Sequence[Task]] = None, progress: bool = True,
          metrics_path=None) -> TrainResult:
    """Run meta-training and write `ckpt_step<n>` and `ckpt_final` to `output_dir`.

    Validation rows go to `metrics_path`, by default `output_dir/metrics.csv`.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = Path(metrics_path) if metrics_path else output_dir / "metrics.csv"

    schedule = cfg.alpha_schedule()
    source = TaskSource(cfg.dataset, cfg.seed, "train", tasks=train_tasks)
    dataset = TaskDataset(source)
    if val_tasks is None:
        val_tasks = TaskSource(cfg.dataset, cfg.seed, "val").take(cfg.val_tasks)
    exp_id = make_exp_id(cfg.name, cfg.config_hash, seed=cfg.seed)

    logger.info(f"Training {cfg.objective.kind.value} on {cfg.dataset.label}: "
                f"{cfg.steps} steps x {cfg.batch_tasks} tasks, K={cfg.objective.num_samples}, "
                f"schedule={schedule.kind.value} alpha0={schedule.start}")

    with single_threaded():
        model = build_model(cfg.model, cfg.seed)
        optimizer = make_optimizer(model, cfg)
        result = TrainResult(model=model, final_checkpoint=output_dir / "ckpt_final")

        bar = tqdm(range(cfg.steps), desc="train", disable=not progress, leave=False)
        for step in bar:
            alpha = alpha_at(schedule, step)
            tasks = sample_batch(dataset, cfg.batch_tasks, cfg.seed, step)

            optimizer.zero_grad()
            try:
                loss = batch_loss(model, tasks, cfg.objective,
                                  RngStream(cfg.seed, "train-step", (step,)), alpha)
            except NumericError as e:
                raise NumericError(f"step {step}: {e} ({_diagnose(model, tasks, cfg, step)})") from e
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at step {step} "
                                   f"({_diagnose(model, tasks, cfg, step)})")
            loss.backward()
            optimizer.step()

            result.losses.append(value)
            result.alphas.append(alpha)
            bar.set_postfix(loss=f"{value:.4f}", alpha=f"{alpha:.3f}")

            done = step + 1
            if done % cfg.checkpoint_interval == 0 or done == cfg.steps:
                path = save_checkpoint(model, output_dir / f"ckpt_step{done}",
                                       cfg.config_hash, cfg.seed)
                result.checkpoints.append(path)
                labels = RunLabels(exp_id, cfg.dataset.label, cfg.objective.kind.value,
                                   cfg.objective.label_alpha(alpha))
                records = [eval_marginal_ll(model, val_tasks, cfg.eval_samples, split,
                                            cfg.seed, labels)
                           for split in (EvalSplit.CONTEXT, EvalSplit.TARGET)]
                write_metrics(records, metrics_path)
                result.records += records
                logger.info(f"step {done}/{cfg.steps}: loss {value:.4f}, alpha {alpha:.4f}, "
                            f"val target LL {records[-1].ll_mean:.4f}")

        save_checkpoint(model, result.final_checkpoint, cfg.config_hash, cfg.seed)

    logger.info(f"Training complete: final loss {result.losses[-1]:.4f}, "
                f"checkpoint {result.final_checkpoint}")
    return result
