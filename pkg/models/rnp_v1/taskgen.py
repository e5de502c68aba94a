"""
Meta-learning task generation and ingestion.

Produces context/target tasks from GP prior draws (RBF, Matern-5/2,
Periodic), from Lotka-Volterra simulations (predator series) and from the
real Hare-Lynx record, plus the context-corruption transform used by the
noisy-context protocol. Every generated task is a pure function of
(dataset spec, seed, split, task index).
"""

import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.linalg
from pydantic import BaseModel, ConfigDict, Field, model_validator

from models.rnp_v1 import __version__
from models.rnp_v1.errors import (ContractError, DomainError, GenerationError,
                                  IngestionError, SimulationError)
from models.rnp_v1.numkit import RngStream

logger = logging.getLogger(__name__)

JITTER_ESCALATIONS = 3


@dataclass(frozen=True, eq=False)
class Task:
    """One meta-learning instance: M context points and N target points."""

    x_ctx: np.ndarray
    y_ctx: np.ndarray
    x_tgt: np.ndarray
    y_tgt: np.ndarray

    def __post_init__(self):
        for name in ("x_ctx", "y_ctx", "x_tgt", "y_tgt"):
            value = np.asarray(getattr(self, name), dtype=np.float64)
            if value.ndim != 2:
                raise DomainError(f"{name} must be 2-D, got shape {value.shape}")
            if not np.all(np.isfinite(value)):
                raise DomainError(f"{name} contains non-finite values")
            object.__setattr__(self, name, value)
        if self.x_ctx.shape[0] < 1 or self.x_tgt.shape[0] < 1:
            raise DomainError("a task needs at least one context and one target point")
        if self.x_ctx.shape[0] != self.y_ctx.shape[0] or self.x_tgt.shape[0] != self.y_tgt.shape[0]:
            raise DomainError("input and output point counts differ")
        if self.x_ctx.shape[1] != self.x_tgt.shape[1] or self.y_ctx.shape[1] != self.y_tgt.shape[1]:
            raise DomainError("context and target dimensions differ")

    @property
    def num_context(self) -> int:
        return self.x_ctx.shape[0]

    @property
    def num_target(self) -> int:
        return self.x_tgt.shape[0]

    @property
    def y_dim(self) -> int:
        return self.y_ctx.shape[1]

    def context_as_target(self) -> "Task":
        """The task whose targets are its own context points."""
        return Task(self.x_ctx, self.y_ctx, self.x_ctx, self.y_ctx)

    def with_context_outputs(self, y_ctx: np.ndarray) -> "Task":
        return Task(self.x_ctx, y_ctx, self.x_tgt, self.y_tgt)

    def to_record(self) -> Dict[str, list]:
        return {name: getattr(self, name).tolist() for name in ("x_ctx", "y_ctx", "x_tgt", "y_tgt")}

    @classmethod
    def from_record(cls, record: Dict[str, list]) -> "Task":
        return cls(*(np.asarray(record[name], dtype=np.float64)
                     for name in ("x_ctx", "y_ctx", "x_tgt", "y_tgt")))


# --- Gaussian-process tasks ----------------------------------------------------------

class KernelFamily(str, Enum):
    RBF = "rbf"
    MATERN52 = "matern52"
    PERIODIC = "periodic"


class KernelSpec(BaseModel):
    """Stationary kernel with output scale s, lengthscale l and (Periodic) period p."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    family: KernelFamily = KernelFamily.RBF
    output_scale: float = Field(1.0, gt=0)
    lengthscale: float = Field(1.0, gt=0)
    period: float = Field(1.0, gt=0)
    jitter: float = Field(1e-8, ge=0)


def _check_kernel(spec: KernelSpec):
    values = (spec.output_scale, spec.lengthscale, spec.period)
    if not all(math.isfinite(v) and v > 0 for v in values) or not spec.jitter >= 0:
        raise DomainError(f"invalid kernel spec: {spec!r}")


def kernel_matrix(spec: KernelSpec, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """Gram matrix k(xa_i, xb_j) for 1-D inputs."""
    _check_kernel(spec)
    xa = np.asarray(xa, dtype=np.float64).reshape(-1)
    xb = np.asarray(xb, dtype=np.float64).reshape(-1)
    r = np.abs(xa[:, None] - xb[None, :])
    s2, ell = spec.output_scale ** 2, spec.lengthscale

    if spec.family == KernelFamily.RBF:
        return s2 * np.exp(-r ** 2 / (2.0 * ell ** 2))
    if spec.family == KernelFamily.MATERN52:
        scaled = math.sqrt(5.0) * r / ell
        return s2 * (1.0 + scaled + 5.0 * r ** 2 / (3.0 * ell ** 2)) * np.exp(-scaled)
    if spec.family == KernelFamily.PERIODIC:
        return s2 * np.exp(-2.0 * np.sin(math.pi * r / spec.period) ** 2 / ell ** 2)
    raise DomainError(f"unknown kernel family {spec.family}")


def kernel_eval(spec: KernelSpec, x: float, x2: float) -> float:
    return float(kernel_matrix(spec, np.array([x]), np.array([x2]))[0, 0])


def _cholesky_with_jitter(gram: np.ndarray, jitter: float) -> np.ndarray:
    n = gram.shape[0]
    start = jitter if jitter > 0 else 1e-10
    schedule = [jitter] + [start * 10 ** k for k in range(1, JITTER_ESCALATIONS + 1)]
    for attempt, jit in enumerate(schedule):
        try:
            return scipy.linalg.cholesky(gram + jit * np.eye(n), lower=True)
        except np.linalg.LinAlgError:
            logger.debug(f"Cholesky failed with jitter {jit:.1e} (attempt {attempt + 1})")
    raise GenerationError(f"Cholesky failed after {JITTER_ESCALATIONS} jitter escalations")


def sample_gp_values(spec: KernelSpec, x: np.ndarray, rng: RngStream,
                     n_samples: int = 1) -> np.ndarray:
    """Joint zero-mean GP draws at inputs `x`, shape (len(x), n_samples)."""
    gram = kernel_matrix(spec, x, x)
    gram = 0.5 * (gram + gram.T)
    chol = _cholesky_with_jitter(gram, spec.jitter)
    eps = rng.generator.standard_normal((gram.shape[0], n_samples))
    return chol @ eps


class TaskSplit(BaseModel):
    """Context/target size rule: M ~ U(lo, hi), N ~ U(target_min, max(target_min, total - M))."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    context_range: Tuple[int, int] = (3, 50)
    target_min: int = Field(3, ge=1)
    total_points: int = Field(50, ge=2)
    x_range: Tuple[float, float] = (-2.0, 2.0)

    @model_validator(mode="after")
    def _check_ranges(self):
        lo, hi = self.context_range
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid context range {self.context_range}")
        if self.x_range[1] <= self.x_range[0]:
            raise ValueError(f"invalid x range {self.x_range}")
        return self

    def draw_sizes(self, rng: RngStream) -> Tuple[int, int]:
        m = rng.integers(*self.context_range)
        n = rng.integers(self.target_min, max(self.target_min, self.total_points - m))
        return m, n

    @classmethod
    def fixed(cls, num_context: int, num_target: int, **kwargs) -> "TaskSplit":
        return cls(context_range=(num_context, num_context), target_min=num_target,
                   total_points=num_context + num_target, **kwargs)


GP_SPLIT = TaskSplit()
LV_SPLIT = TaskSplit(context_range=(15, 100), target_min=15, total_points=100)


def sample_gp_task(spec: KernelSpec, rng: RngStream, split: TaskSplit = GP_SPLIT) -> Task:
    """Draw M+N uniform inputs, one joint GP sample, and split it into context/target."""
    m, n = split.draw_sizes(rng)
    x = rng.uniform(split.x_range[0], split.x_range[1], m + n)
    y = sample_gp_values(spec, x, rng)[:, 0]
    return Task(x[:m, None], y[:m, None], x[m:, None], y[m:, None])


class GPHyperPrior(BaseModel):
    """Per-task kernel hyperparameter ranges (uniform)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    lengthscale_range: Tuple[float, float] = (0.1, 0.6)
    scale_range: Tuple[float, float] = (0.1, 1.0)
    periodic_lengthscale_range: Tuple[float, float] = (0.6, 1.0)
    period_range: Tuple[float, float] = (0.3, 0.5)
    jitter: float = Field(1e-8, ge=0)


def draw_kernel_spec(family: KernelFamily, prior: GPHyperPrior, rng: RngStream) -> KernelSpec:
    scale = rng.uniform(*prior.scale_range)
    if family == KernelFamily.PERIODIC:
        return KernelSpec(family=family, output_scale=scale,
                          lengthscale=rng.uniform(*prior.periodic_lengthscale_range),
                          period=rng.uniform(*prior.period_range), jitter=prior.jitter)
    return KernelSpec(family=family, output_scale=scale,
                      lengthscale=rng.uniform(*prior.lengthscale_range), jitter=prior.jitter)


# --- Lotka-Volterra tasks ------------------------------------------------------------

class LVConfig(BaseModel):
    """dx/dt = t1 x - t2 x y, dy/dt = -t3 y + t4 x y, integrated with classic RK4."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    theta1: float = Field(1.0, gt=0)
    theta2: float = Field(0.01, gt=0)
    theta3: float = Field(0.5, gt=0)
    theta4: float = Field(0.01, gt=0)
    x0: float = Field(50.0, gt=0)
    y0: float = Field(100.0, gt=0)
    horizon: float = Field(25.0, gt=0)
    grid_size: int = Field(256, ge=2)
    dt: float = Field(0.01, gt=0)

    @model_validator(mode="after")
    def _check_step(self):
        if self.dt > self.horizon / self.grid_size:
            raise ValueError(f"dt={self.dt} exceeds horizon/grid_size={self.horizon / self.grid_size}")
        return self


def lv_derivatives(cfg: LVConfig, prey: float, predator: float) -> Tuple[float, float]:
    return (cfg.theta1 * prey - cfg.theta2 * prey * predator,
            -cfg.theta3 * predator + cfg.theta4 * prey * predator)


def lv_conserved_quantity(cfg: LVConfig, prey, predator):
    """V = t4 x - t3 ln x + t2 y - t1 ln y, constant along exact trajectories."""
    prey, predator = np.asarray(prey), np.asarray(predator)
    return (cfg.theta4 * prey - cfg.theta3 * np.log(prey)
            + cfg.theta2 * predator - cfg.theta1 * np.log(predator))


def simulate_lv(cfg: LVConfig) -> np.ndarray:
    """RK4 trajectory sampled on `grid_size` equally spaced times in [0, horizon].

    Each sampling interval is split into the fewest equal substeps no longer
    than `dt`. Returns columns (time, prey, predator).
    """
    times = np.linspace(0.0, cfg.horizon, cfg.grid_size)
    spacing = cfg.horizon / (cfg.grid_size - 1)
    substeps = max(1, math.ceil(spacing / cfg.dt - 1e-12))
    h = spacing / substeps

    out = np.empty((cfg.grid_size, 3))
    x, y = float(cfg.x0), float(cfg.y0)
    out[0] = (0.0, x, y)
    for i in range(1, cfg.grid_size):
        for _ in range(substeps):
            k1x, k1y = lv_derivatives(cfg, x, y)
            k2x, k2y = lv_derivatives(cfg, x + 0.5 * h * k1x, y + 0.5 * h * k1y)
            k3x, k3y = lv_derivatives(cfg, x + 0.5 * h * k2x, y + 0.5 * h * k2y)
            k4x, k4y = lv_derivatives(cfg, x + h * k3x, y + h * k3y)
            x += h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
            y += h / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y)
            if not (x > 0 and y > 0):
                raise SimulationError(f"non-positive population ({x:.4g}, {y:.4g}) "
                                      f"before t={times[i]:.4f}")
        out[i] = (times[i], x, y)
    return out


def draw_lv_config(base: LVConfig, init_range: Tuple[float, float], rng: RngStream) -> LVConfig:
    return base.model_copy(update={"x0": rng.uniform(*init_range), "y0": rng.uniform(*init_range)})


def zscore(values: np.ndarray) -> np.ndarray:
    """(v - mean) / std with the population standard deviation."""
    values = np.asarray(values, dtype=np.float64)
    std = values.std()
    if not std > 0:
        raise DomainError("zero variance, cannot z-score")
    return (values - values.mean()) / std


def draw_lv_indices(grid_size: int, rng: RngStream,
                    split: TaskSplit = LV_SPLIT) -> Tuple[np.ndarray, np.ndarray]:
    """Disjoint sorted context and target indices into a trajectory grid."""
    m, n = split.draw_sizes(rng)
    if m + n > grid_size:
        raise GenerationError(f"M+N={m + n} exceeds the trajectory grid of {grid_size}")
    chosen = rng.permutation(grid_size)[:m + n]
    return np.sort(chosen[:m]), np.sort(chosen[m:])


def make_lv_task(traj: np.ndarray, rng: RngStream, split: TaskSplit = LV_SPLIT) -> Task:
    """Subsample a trajectory; x = z-scored time, y = z-scored predator."""
    if traj.shape[0] < 200:
        raise ContractError(f"trajectory has {traj.shape[0]} points, need at least 200")
    ctx, tgt = draw_lv_indices(traj.shape[0], rng, split)
    x = zscore(traj[:, 0])[:, None]
    y = zscore(traj[:, 2])[:, None]
    return Task(x[ctx], y[ctx], x[tgt], y[tgt])


# --- Context corruption --------------------------------------------------------------

class CorruptionSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    beta: float = Field(0.0, ge=0.0, le=1.0)


def corrupt_context(task: Task, spec: CorruptionSpec, rng: RngStream) -> Task:
    """Replace y_ctx by (1 - beta) y + beta eps with eps ~ N(0, 1); targets stay clean."""
    if not 0.0 <= spec.beta <= 1.0:
        raise DomainError(f"beta must lie in [0, 1], got {spec.beta}")
    eps = rng.generator.standard_normal(task.y_ctx.shape)
    return task.with_context_outputs((1.0 - spec.beta) * task.y_ctx + spec.beta * eps)


# --- Hare-Lynx ingestion -------------------------------------------------------------

HARE_LYNX_COLUMNS = ("year", "hare", "lynx")


class HareLynxSplitMode(str, Enum):
    RANDOM = "random"
    PREFIX = "prefix"


class HareLynxSplit(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    mode: HareLynxSplitMode = HareLynxSplitMode.RANDOM
    context_fraction: float = Field(0.5, gt=0.0, lt=1.0)


def load_hare_lynx(path, split: HareLynxSplit = HareLynxSplit(),
                   rng: Optional[RngStream] = None) -> Task:
    """Read a `year,hare,lynx` CSV into one task (x = z-scored year, y = z-scored lynx)."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"Hare-Lynx file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise IngestionError(f"{path}: {e}") from e

    missing = [c for c in HARE_LYNX_COLUMNS if c not in frame.columns]
    if missing:
        raise IngestionError(f"{path}: missing columns {missing}")
    if len(frame) < 2:
        raise IngestionError(f"{path}: need at least 2 rows, found {len(frame)}")

    numeric = {}
    for column in HARE_LYNX_COLUMNS:
        values = pd.to_numeric(frame[column].str.strip(), errors="coerce")
        values = values.to_numpy(dtype=np.float64, na_value=np.nan)
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            row = int(bad[0]) + 2  # header is line 1
            raise IngestionError(f"{path}: row {row}: non-numeric {column!r} value")
        numeric[column] = values

    try:
        x, y = zscore(numeric["year"]), zscore(numeric["lynx"])
    except DomainError as e:
        raise IngestionError(f"{path}: {e}") from e

    n = len(x)
    m = min(n - 1, max(1, int(round(split.context_fraction * n))))
    if split.mode == HareLynxSplitMode.PREFIX:
        order = np.arange(n)
    else:
        order = (rng or RngStream(0, "hare-lynx")).permutation(n)
    ctx, tgt = np.sort(order[:m]), np.sort(order[m:])
    logger.info(f"Loaded {n} Hare-Lynx points from {path} ({m} context / {n - m} target)")
    return Task(x[ctx, None], y[ctx, None], x[tgt, None], y[tgt, None])


# --- Datasets ------------------------------------------------------------------------

class DatasetKind(str, Enum):
    GP = "gp"
    LV = "lv"


class DatasetSpec(BaseModel):
    """Flat description of a synthetic task distribution and its split sizes."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: DatasetKind = DatasetKind.GP
    kernel: KernelFamily = KernelFamily.RBF
    n_train: int = Field(10000, ge=1)
    n_val: int = Field(64, ge=1)
    n_test: int = Field(1000, ge=1)
    context_min: Optional[int] = None
    context_max: Optional[int] = None
    target_min: Optional[int] = None
    total_points: Optional[int] = None
    lengthscale_min: float = 0.1
    lengthscale_max: float = 0.6
    scale_min: float = 0.1
    scale_max: float = 1.0
    periodic_lengthscale_min: float = 0.6
    periodic_lengthscale_max: float = 1.0
    period_min: float = 0.3
    period_max: float = 0.5
    jitter: float = Field(1e-8, ge=0)
    lv_theta1: float = 1.0
    lv_theta2: float = 0.01
    lv_theta3: float = 0.5
    lv_theta4: float = 0.01
    lv_horizon: float = 25.0
    lv_grid_size: int = 256
    lv_dt: float = 0.01
    lv_init_min: float = 50.0
    lv_init_max: float = 150.0
    noise_beta: float = Field(0.0, ge=0.0, le=1.0)

    @property
    def label(self) -> str:
        return f"gp-{self.kernel.value}" if self.kind == DatasetKind.GP else "lotka_volterra"

    def task_split(self) -> TaskSplit:
        base = GP_SPLIT if self.kind == DatasetKind.GP else LV_SPLIT
        lo = self.context_min if self.context_min is not None else base.context_range[0]
        hi = self.context_max if self.context_max is not None else base.context_range[1]
        return TaskSplit(
            context_range=(lo, hi),
            target_min=self.target_min if self.target_min is not None else base.target_min,
            total_points=self.total_points if self.total_points is not None else base.total_points,
        )

    def hyperprior(self) -> GPHyperPrior:
        return GPHyperPrior(
            lengthscale_range=(self.lengthscale_min, self.lengthscale_max),
            scale_range=(self.scale_min, self.scale_max),
            periodic_lengthscale_range=(self.periodic_lengthscale_min, self.periodic_lengthscale_max),
            period_range=(self.period_min, self.period_max),
            jitter=self.jitter,
        )

    def lv_config(self) -> LVConfig:
        return LVConfig(theta1=self.lv_theta1, theta2=self.lv_theta2, theta3=self.lv_theta3,
                        theta4=self.lv_theta4, horizon=self.lv_horizon,
                        grid_size=self.lv_grid_size, dt=self.lv_dt)

    def split_size(self, split: str) -> int:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]


CORRUPTED_SPLITS = ("train", "val")


def generate_task(spec: DatasetSpec, seed: int, split: str, index: int,
                  task_split: Optional[TaskSplit] = None) -> Task:
    """The `index`-th task of a dataset split; pure in (spec, seed, split, index).

    With `noise_beta > 0` the train and val contexts are corrupted; test tasks
    stay clean and are corrupted by the evaluation protocol instead.
    """
    rng = RngStream(seed, f"{spec.kind.value}-{split}", (index,))
    task = _clean_task(spec, rng, split, index, task_split or spec.task_split())
    if spec.noise_beta > 0 and split in CORRUPTED_SPLITS:
        task = corrupt_context(task, CorruptionSpec(beta=spec.noise_beta), rng.child("corrupt"))
    return task


def _clean_task(spec: DatasetSpec, rng: RngStream, split: str, index: int,
                task_split: TaskSplit) -> Task:
    if spec.kind == DatasetKind.GP:
        kspec = draw_kernel_spec(spec.kernel, spec.hyperprior(), rng.child("kernel"))
        return sample_gp_task(kspec, rng.child("draw"), task_split)

    base = spec.lv_config()
    for attempt in range(3):
        cfg = draw_lv_config(base, (spec.lv_init_min, spec.lv_init_max), rng.child("init", attempt))
        try:
            traj = simulate_lv(cfg)
        except SimulationError as e:
            logger.warning(f"LV task {split}/{index} attempt {attempt}: {e}")
            continue
        return make_lv_task(traj, rng.child("subsample"), task_split)
    raise GenerationError(f"LV task {split}/{index}: simulation failed three times")


class TaskSource:
    """Lazily generated (and memoised) tasks of one dataset split, or a fixed task list."""

    def __init__(self, spec: Optional[DatasetSpec] = None, seed: int = 0, split: str = "train",
                 tasks: Optional[Sequence[Task]] = None, task_split: Optional[TaskSplit] = None):
        if spec is None and tasks is None:
            raise ContractError("TaskSource needs a dataset spec or a task list")
        self.spec = spec
        self.seed = seed
        self.split = split
        self.task_split = task_split
        self._cache: Dict[int, Task] = dict(enumerate(tasks)) if tasks is not None else {}
        self._size = len(tasks) if tasks is not None else spec.split_size(split)

    def __len__(self) -> int:
        return self._size

    def __getitem__(self, index: int) -> Task:
        if not 0 <= index < self._size:
            raise IndexError(index)
        if index not in self._cache:
            self._cache[index] = generate_task(self.spec, self.seed, self.split, index,
                                               self.task_split)
        return self._cache[index]

    def take(self, count: Optional[int] = None) -> List[Task]:
        return [self[i] for i in range(min(count or self._size, self._size))]


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".manifest.json")


def write_task_cache(tasks: Iterable[Task], path, manifest: Dict) -> Path:
    """Write tasks as JSON lines plus a `<stem>.manifest.json` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for task in tasks:
            f.write(json.dumps(task.to_record()) + "\n")
            count += 1
    meta = dict(manifest, n_tasks=count, code_version=__version__)
    with open(manifest_path(path), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    logger.info(f"Wrote {count} tasks to {path}")
    return path


def read_task_cache(path) -> Tuple[List[Task], Dict]:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"task cache not found: {path}")
    tasks = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                tasks.append(Task.from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError, DomainError) as e:
                raise IngestionError(f"{path}: line {line_no}: {e}") from e
    meta_file = manifest_path(path)
    manifest = json.loads(meta_file.read_text(encoding="utf-8")) if meta_file.exists() else {}
    return tasks, manifest
