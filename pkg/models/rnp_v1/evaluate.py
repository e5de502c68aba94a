"""
Evaluation harness: marginal log-likelihood estimates, sweeps, misspecification
protocols and prediction dumps.

Every reported log-likelihood is per point: log (1/K) sum_k p(Y|X, z_k) with
z_k drawn from the conditional prior q(z|C), divided by (points x output dims).
The context split predicts the context points themselves from the full context.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator

from models.rnp_v1 import __version__
from models.rnp_v1.errors import ContractError, DomainError, IngestionError, IntegrityError
from models.rnp_v1.model import NeuralProcess, load_checkpoint, reparam_sample
from models.rnp_v1.numkit import RngStream, as_tensor, log_mean_exp
from models.rnp_v1.objectives import EVAL_SAMPLES
from models.rnp_v1.taskgen import (CorruptionSpec, DatasetKind, DatasetSpec, HareLynxSplit,
                                   HareLynxSplitMode, Task, TaskSource, TaskSplit,
                                   corrupt_context, load_hare_lynx)

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ("exp_id", "dataset", "objective", "alpha", "K", "split",
                   "ll_mean", "ll_std", "n_tasks", "seed", "wall_seconds")
DUMP_COLUMNS = ("x", "mean", "std", "is_context")
FLOAT_FORMAT = "%.17g"

K_GRID = (1, 8, 16, 32, 50)
NCONTEXT_GRID = tuple(range(5, 96, 10))
ALPHA_GRID = tuple(round(0.1 * i, 10) for i in range(21))


class EvalSplit(str, Enum):
    CONTEXT = "context"
    TARGET = "target"


class SweepKind(str, Enum):
    ALPHA = "alpha"
    K = "k"
    NCONTEXT = "ncontext"


class MisspecProtocol(str, Enum):
    NOISY_CONTEXT = "noisy"
    LV_TO_HARELYNX = "lv"


class EvalConfig(BaseModel):
    """Evaluation settings shared by `eval`, `sweep`, `misspec` and `dump`."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    num_samples: int = Field(EVAL_SAMPLES, ge=1)
    n_tasks: int = Field(100, ge=1)
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    ncontext_targets: int = Field(50, ge=1)
    restrict_alpha: bool = False
    noise_betas: Tuple[float, ...] = (0.0, 0.3)
    hare_lynx_splits: int = Field(20, ge=1)
    hare_lynx_mode: HareLynxSplitMode = HareLynxSplitMode.RANDOM
    context_fraction: float = Field(0.5, gt=0.0, lt=1.0)
    dump_points: int = Field(200, ge=2)

    @field_validator("seeds", "noise_betas", mode="before")
    @classmethod
    def _split_list(cls, value):
        if isinstance(value, str):
            return tuple(v.strip() for v in value.split(",") if v.strip())
        return value


@dataclass(frozen=True)
class MetricsRecord:
    exp_id: str
    dataset: str
    objective: str
    alpha: float
    K: int
    split: str
    ll_mean: float
    ll_std: float
    n_tasks: int
    seed: int
    wall_seconds: float

    def to_row(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RunLabels:
    """Identity columns stamped on every record of one evaluation run."""

    exp_id: str = ""
    dataset: str = ""
    objective: str = ""
    alpha: float = float("nan")


def make_exp_id(name: str, config_hash: str, version: str = __version__,
                seed: Optional[int] = None) -> str:
    """`name:hash12:version`, or `name:hash12:s<seed>:version` when the run seed is given."""
    if seed is None:
        return f"{name}:{config_hash[:12]}:{version}"
    return f"{name}:{config_hash[:12]}:s{seed}:{version}"


# --- Estimators ----------------------------------------------------------------------

def task_log_likelihood(model: NeuralProcess, task: Task, num_samples: int,
                        rng: RngStream) -> float:
    """Per-point log (1/K) sum_k p(Y_T | X_T, z_k), z_k ~ q(z | C)."""
    with torch.no_grad():
        prior = model.prior(task)
        z = reparam_sample(prior, rng.normal(num_samples, prior.mean.shape[-1]))
        joint = model.decode(task.x_tgt, z).joint_log_likelihood(as_tensor(task.y_tgt))
        return float(log_mean_exp(joint)) / (task.num_target * task.y_dim)


def eval_marginal_ll(model: NeuralProcess, tasks: Sequence[Task],
                     num_samples: int = EVAL_SAMPLES, split: EvalSplit = EvalSplit.TARGET,
                     seed: int = 0, labels: RunLabels = RunLabels()) -> MetricsRecord:
    """Mean and spread over tasks of the per-point marginal log-likelihood estimate."""
    if len(tasks) == 0:
        raise DomainError("cannot evaluate an empty task list")
    if num_samples < 1:
        raise DomainError(f"need at least one latent sample, got {num_samples}")
    split = EvalSplit(split)

    start = time.perf_counter()
    rng = RngStream(seed, "eval")
    values = np.empty(len(tasks))
    for i, task in enumerate(tasks):
        scored = task.context_as_target() if split == EvalSplit.CONTEXT else task
        values[i] = task_log_likelihood(model, scored, num_samples, rng.child("task", i))

    record = MetricsRecord(
        exp_id=labels.exp_id, dataset=labels.dataset, objective=labels.objective,
        alpha=labels.alpha, K=num_samples, split=split.value,
        ll_mean=float(values.mean()), ll_std=float(values.std()),
        n_tasks=len(tasks), seed=seed, wall_seconds=time.perf_counter() - start,
    )
    logger.info(f"{record.dataset or 'tasks'} {split.value}: LL {record.ll_mean:.4f} "
                f"+/- {record.ll_std:.4f} (K={num_samples}, n={len(tasks)}, seed={seed})")
    return record


def evaluate_splits(model: NeuralProcess, tasks: Sequence[Task], num_samples: int,
                    seeds: Iterable[int], labels: RunLabels,
                    splits: Sequence[EvalSplit] = (EvalSplit.CONTEXT, EvalSplit.TARGET)
                    ) -> List[MetricsRecord]:
    return [eval_marginal_ll(model, tasks, num_samples, split, seed, labels)
            for seed in seeds for split in splits]


# --- Metrics CSV ---------------------------------------------------------------------

def write_metrics(records: Sequence[MetricsRecord], path) -> Path:
    """Append records to a metrics CSV, writing the header when the file is new."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([r.to_row() for r in records], columns=list(METRICS_COLUMNS))
    is_new = not path.exists() or path.stat().st_size == 0
    frame.to_csv(path, mode="a", header=is_new, index=False, float_format=FLOAT_FORMAT,
                 na_rep="nan", encoding="utf-8")
    return path


def read_metrics(path) -> List[MetricsRecord]:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"metrics file not found: {path}")
    # identity columns are free text ("NA" is a valid dataset name); floats parse via float()
    frame = pd.read_csv(path, encoding="utf-8", keep_default_na=False, float_precision="round_trip",
                        dtype={"exp_id": str, "dataset": str, "objective": str, "split": str})
    if tuple(frame.columns) != METRICS_COLUMNS:
        raise IngestionError(f"{path}: unexpected metrics header {list(frame.columns)}")
    return [MetricsRecord(
        exp_id=row.exp_id, dataset=row.dataset, objective=row.objective,
        alpha=float(row.alpha), K=int(row.K), split=row.split, ll_mean=float(row.ll_mean),
        ll_std=float(row.ll_std), n_tasks=int(row.n_tasks), seed=int(row.seed),
        wall_seconds=float(row.wall_seconds),
    ) for row in frame.itertuples(index=False)]


def select_alpha(records: Iterable[MetricsRecord], split: str = EvalSplit.TARGET.value) -> float:
    """The alpha with the highest mean log-likelihood on `split` across seeds."""
    frame = pd.DataFrame([r.to_row() for r in records if r.split == split])
    if frame.empty:
        raise DomainError(f"no {split} records to select alpha from")
    means = frame.groupby("alpha")["ll_mean"].mean()
    return float(means.idxmax())


# --- Sweeps --------------------------------------------------------------------------

def parse_grid(text: str, kind: SweepKind) -> List[float]:
    values = [float(v) for v in text.split(",") if v.strip()]
    if not values:
        raise DomainError("sweep grid is empty")
    if kind in (SweepKind.K, SweepKind.NCONTEXT):
        if any(v != int(v) or v < 1 for v in values):
            raise DomainError(f"{kind.value} grid needs positive integers, got {text}")
        return [int(v) for v in values]
    return values


def default_grid(kind: SweepKind) -> List[float]:
    return list({SweepKind.ALPHA: ALPHA_GRID, SweepKind.K: K_GRID,
                 SweepKind.NCONTEXT: NCONTEXT_GRID}[kind])


def restrict_alpha_grid(grid: Sequence[float]) -> List[float]:
    """Keep 0 < alpha < 1 only."""
    return [a for a in grid if 0.0 < a < 1.0]


def checkpoint_for_alpha(template: str, alpha: float) -> Path:
    """Expand a `{alpha}` checkpoint template, e.g. `runs/a{alpha}/ckpt_final`."""
    if "{alpha}" not in template:
        raise ContractError(f"checkpoint template {template!r} has no {{alpha}} field")
    return Path(template.format(alpha=f"{alpha:g}"))


def _test_tasks(dataset: DatasetSpec, seed: int, n_tasks: int,
                task_split: Optional[TaskSplit] = None) -> List[Task]:
    return TaskSource(dataset, seed, "test", task_split=task_split).take(n_tasks)


def run_sweep(kind: SweepKind, grid: Sequence[float], dataset: DatasetSpec, eval_cfg: EvalConfig,
              checkpoint, labels: RunLabels, data_seed: int = 0,
              loader: Callable[[Path], NeuralProcess] = load_checkpoint) -> List[MetricsRecord]:
    """One record per (grid point, split, seed).

    ALPHA expects `checkpoint` to be a `{alpha}` template with one trained
    model per grid point; K and NCONTEXT share one checkpoint.
    """
    kind = SweepKind(kind)
    grid = list(grid)
    if kind == SweepKind.ALPHA and eval_cfg.restrict_alpha:
        grid = restrict_alpha_grid(grid)
    if not grid:
        raise DomainError(f"{kind.value} sweep grid is empty")

    records: List[MetricsRecord] = []
    if kind == SweepKind.ALPHA:
        tasks = _test_tasks(dataset, data_seed, eval_cfg.n_tasks)
        for alpha in grid:
            path = checkpoint_for_alpha(str(checkpoint), alpha)
            if not path.exists():
                raise IntegrityError(f"alpha sweep point {alpha:g}: checkpoint not found at {path}")
            point = RunLabels(labels.exp_id, labels.dataset, labels.objective, float(alpha))
            records += evaluate_splits(loader(path), tasks, eval_cfg.num_samples,
                                       eval_cfg.seeds, point)
        return records

    path = Path(checkpoint)
    if not path.exists():
        raise IntegrityError(f"{kind.value} sweep: checkpoint not found at {path}")
    model = loader(path)

    if kind == SweepKind.K:
        tasks = _test_tasks(dataset, data_seed, eval_cfg.n_tasks)
        for k in grid:
            records += evaluate_splits(model, tasks, int(k), eval_cfg.seeds, labels)
        return records

    for m in grid:
        split = TaskSplit.fixed(int(m), eval_cfg.ncontext_targets,
                                x_range=dataset.task_split().x_range)
        tasks = _test_tasks(dataset, data_seed, eval_cfg.n_tasks, split)
        point = RunLabels(labels.exp_id, f"{labels.dataset}/ctx={int(m)}", labels.objective,
                          labels.alpha)
        records += evaluate_splits(model, tasks, eval_cfg.num_samples, eval_cfg.seeds, point)
    return records


# --- Misspecification protocols ------------------------------------------------------

def corrupted_tasks(tasks: Sequence[Task], beta: float, seed: int) -> List[Task]:
    spec = CorruptionSpec(beta=beta)
    return [corrupt_context(task, spec, RngStream(seed, "corrupt", (i,)))
            for i, task in enumerate(tasks)]


def hare_lynx_tasks(path, eval_cfg: EvalConfig, seed: int) -> List[Task]:
    """Context/target splits of the Hare-Lynx series (one for PREFIX, several for RANDOM)."""
    split = HareLynxSplit(mode=eval_cfg.hare_lynx_mode, context_fraction=eval_cfg.context_fraction)
    if split.mode == HareLynxSplitMode.PREFIX:
        return [load_hare_lynx(path, split)]
    return [load_hare_lynx(path, split, RngStream(seed, "hare-lynx", (i,)))
            for i in range(eval_cfg.hare_lynx_splits)]


def run_misspec_protocol(protocol: MisspecProtocol, model: NeuralProcess, dataset: DatasetSpec,
                         eval_cfg: EvalConfig, labels: RunLabels, data_seed: int = 0,
                         hare_lynx_path=None) -> List[MetricsRecord]:
    """NOISY_CONTEXT: target LL per noise level on corrupted contexts with clean targets.
    LV_TO_HARELYNX: context and target LL on held-out LV tasks and on the real series."""
    protocol = MisspecProtocol(protocol)
    tasks = _test_tasks(dataset, data_seed, eval_cfg.n_tasks)

    if protocol == MisspecProtocol.NOISY_CONTEXT:
        records = []
        for beta in eval_cfg.noise_betas:
            noisy = corrupted_tasks(tasks, beta, data_seed)
            point = RunLabels(labels.exp_id, f"{labels.dataset}+noise{beta:g}", labels.objective,
                              labels.alpha)
            records += evaluate_splits(model, noisy, eval_cfg.num_samples, eval_cfg.seeds, point,
                                       splits=(EvalSplit.TARGET,))
        return records

    if dataset.kind != DatasetKind.LV:
        logger.warning(f"LV_TO_HARELYNX run on a {dataset.label} dataset")
    if hare_lynx_path is None:
        raise IngestionError("Hare-Lynx protocol needs a data file")
    real = hare_lynx_tasks(hare_lynx_path, eval_cfg, data_seed)
    in_domain = RunLabels(labels.exp_id, "lotka_volterra", labels.objective, labels.alpha)
    shifted = RunLabels(labels.exp_id, "hare_lynx", labels.objective, labels.alpha)
    return (evaluate_splits(model, tasks, eval_cfg.num_samples, eval_cfg.seeds, in_domain)
            + evaluate_splits(model, real, eval_cfg.num_samples, eval_cfg.seeds, shifted))


# --- Prediction dump -----------------------------------------------------------------

def emit_prediction_dump(model: NeuralProcess, task: Task, num_samples: int, path,
                         grid_points: int = 200, seed: int = 0,
                         grid: Optional[np.ndarray] = None) -> pd.DataFrame:
    """Predictive mean/std on an input grid (averaged over K prior samples) plus context rows.

    Context rows carry the observed y in `mean`, std 0 and is_context 1.
    """
    if task.x_ctx.shape[1] != 1 or task.y_dim != 1:
        raise ContractError("prediction dumps support 1-D inputs and outputs only")
    if grid is None:
        xs = np.concatenate([task.x_ctx[:, 0], task.x_tgt[:, 0]])
        grid = np.linspace(xs.min(), xs.max(), grid_points)
    grid = np.asarray(grid, dtype=np.float64).reshape(-1)

    with torch.no_grad():
        prior = model.prior(task)
        eps = RngStream(seed, "dump").normal(num_samples, prior.mean.shape[-1])
        pred = model.decode(grid[:, None], reparam_sample(prior, eps))
        mean = pred.mean.mean(dim=0)[:, 0].numpy()
        std = pred.std.mean(dim=0)[:, 0].numpy()

    frame = pd.DataFrame({
        "x": np.concatenate([grid, task.x_ctx[:, 0]]),
        "mean": np.concatenate([mean, task.y_ctx[:, 0]]),
        "std": np.concatenate([std, np.zeros(task.num_context)]),
        "is_context": np.concatenate([np.zeros(len(grid), dtype=int),
                                      np.ones(task.num_context, dtype=int)]),
    }, columns=list(DUMP_COLUMNS))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, encoding="utf-8")
    logger.info(f"Wrote {len(frame)} prediction rows to {path}")
    return frame


def per_point_ceiling(decoder_std_floor: float = 0.1) -> float:
    """Best attainable per-point log-likelihood: log N(0 | 0, floor^2)."""
    return -0.5 * math.log(2.0 * math.pi) - math.log(decoder_std_floor)
