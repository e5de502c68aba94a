"""
Training objectives and Gaussian divergences.

Losses are negated objectives, so every function here is minimised:

    VI             -[ mean_k log p(Y_T|X_T,z_k) - KL(q(z|C,T) || q(z|C)) ],  z_k ~ q(z|C,T)
    ML expected    -mean_k log p(Y_T|X_T,z_k),                              z_k ~ q(z|C)
    ML marginal    -log mean_k p(Y_T|X_T,z_k),                              z_k ~ q(z|C)
    RNP-VI         -1/(1-a) log mean_k w_k^(1-a),  w_k = p(Y_T|X_T,z_k) q(z_k|C) / q(z_k|C,T)
    RNP-ML (task)  1/(a-1) log mean_n m_n^(1-a),   m_n = mean_k p(y_n|x_n,z_k), z_k ~ q(z|C)

All weight arithmetic stays in the log domain.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import torch
from pydantic import BaseModel, ConfigDict, Field

from models.rnp_v1.errors import ContractError, DomainError
from models.rnp_v1.model import DiagGaussian, NeuralProcess, reparam_sample
from models.rnp_v1.numkit import RngStream, as_tensor, backward, log_mean_exp, log_sum_exp
from models.rnp_v1.taskgen import Task

logger = logging.getLogger(__name__)

TRAIN_SAMPLES = 32
EVAL_SAMPLES = 50


class ObjectiveKind(str, Enum):
    VI = "vi"
    ML_EXPECTED = "ml_expected"
    ML_MARGINAL = "ml_marginal"
    RNP_VI = "rnp_vi"
    RNP_ML_TASK = "rnp_ml_task"
    RNP_ML_LITERAL = "rnp_ml_literal"


RENYI_KINDS = frozenset({ObjectiveKind.RNP_VI, ObjectiveKind.RNP_ML_TASK,
                         ObjectiveKind.RNP_ML_LITERAL})


class ObjectiveSpec(BaseModel):
    """Loss selection; alpha within `alpha_eps` of 1 routes Renyi kinds to their exact limit."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: ObjectiveKind = ObjectiveKind.RNP_VI
    alpha: float = Field(0.7, ge=0.0)
    num_samples: int = Field(TRAIN_SAMPLES, ge=1)
    alpha_eps: float = Field(1e-3, gt=0.0)

    def label_alpha(self, alpha: Optional[float] = None) -> float:
        """The alpha recorded in metrics rows: NaN for kinds that take no alpha."""
        if self.kind not in RENYI_KINDS:
            return float("nan")
        return self.alpha if alpha is None else alpha


class MLVariant(str, Enum):
    EXPECTED = "expected"
    MARGINAL = "marginal"


class RNPMLForm(str, Enum):
    TASK = "task"
    LITERAL = "literal"


# --- Closed-form divergences ---------------------------------------------------------

def _check_dims(q: DiagGaussian, p: DiagGaussian):
    if q.mean.shape != p.mean.shape or q.std.shape != p.std.shape:
        raise ContractError(f"dimension mismatch: {tuple(q.mean.shape)} vs {tuple(p.mean.shape)}")


def kl_diag(q: DiagGaussian, p: DiagGaussian) -> torch.Tensor:
    """KL(q || p) between diagonal Gaussians, summed over dimensions."""
    _check_dims(q, p)
    var_q, var_p = q.std ** 2, p.std ** 2
    terms = (torch.log(p.std / q.std) + (var_q + (q.mean - p.mean) ** 2) / (2.0 * var_p) - 0.5)
    return terms.sum(-1)


def renyi_diag(q: DiagGaussian, p: DiagGaussian, alpha: float) -> torch.Tensor:
    """D_alpha(q || p) between diagonal Gaussians, summed over dimensions.

    Needs the mixed variance alpha*var_p + (1-alpha)*var_q > 0 in every
    dimension; this can fail for alpha > 1.
    """
    _check_dims(q, p)
    if alpha == 1.0:
        return kl_diag(q, p)
    var_q, var_p = q.std ** 2, p.std ** 2
    var_mix = alpha * var_p + (1.0 - alpha) * var_q
    bad = torch.nonzero(var_mix.detach().reshape(-1) <= 0)
    if bad.numel():
        raise DomainError(f"Renyi divergence undefined for alpha={alpha}: "
                          f"mixed variance non-positive in dimension {int(bad[0])}")
    mean_term = alpha * (q.mean - p.mean) ** 2 / (2.0 * var_mix)
    log_term = (torch.log(var_mix) - (1.0 - alpha) * torch.log(var_q)
                - alpha * torch.log(var_p)) / (2.0 * (1.0 - alpha))
    return (mean_term + log_term).sum(-1)


# --- Importance weights --------------------------------------------------------------

def renyi_bound(log_w: torch.Tensor, alpha: float, alpha_eps: float = 1e-3) -> torch.Tensor:
    """B(alpha) = 1/(1-alpha) log mean_k w_k^(1-alpha); mean_k log w_k near alpha = 1."""
    if alpha < 0:
        raise DomainError(f"alpha must be >= 0, got {alpha}")
    if abs(alpha - 1.0) < alpha_eps:
        return log_w.mean()
    return (log_sum_exp((1.0 - alpha) * log_w) - math.log(log_w.shape[-1])) / (1.0 - alpha)


@dataclass(frozen=True)
class LogWeights:
    """log w_k for K latent samples."""

    values: torch.Tensor

    def normalized(self, alpha: float) -> torch.Tensor:
        """Self-normalised w_k^(1-alpha) / sum_j w_j^(1-alpha)."""
        return torch.softmax((1.0 - alpha) * self.values, dim=-1)

    def bound(self, alpha: float, alpha_eps: float = 1e-3) -> torch.Tensor:
        return renyi_bound(self.values, alpha, alpha_eps)


def _draw(dist: DiagGaussian, num_samples: int, rng: RngStream) -> torch.Tensor:
    if num_samples < 1:
        raise DomainError(f"need at least one latent sample, got {num_samples}")
    return reparam_sample(dist, rng.normal(num_samples, dist.mean.shape[-1]))


def _paths(model: NeuralProcess, task: Task, share_prior: bool) -> Tuple[DiagGaussian, DiagGaussian]:
    prior = model.prior(task)
    return prior, prior if share_prior else model.posterior(task)


def importance_log_weights(model: NeuralProcess, task: Task, z_samples: torch.Tensor,
                           prior: Optional[DiagGaussian] = None,
                           posterior: Optional[DiagGaussian] = None,
                           share_prior: bool = False) -> LogWeights:
    """log w_k = log p(Y_T|X_T,z_k) + log q(z_k|C) - log q(z_k|C,T).

    `share_prior` feeds the prior path in place of the posterior, making the
    density ratio exactly one.
    """
    prior = prior if prior is not None else model.prior(task)
    if share_prior:
        posterior = prior
    elif posterior is None:
        posterior = model.posterior(task)
    log_lik = model.decode(task.x_tgt, z_samples).joint_log_likelihood(as_tensor(task.y_tgt))
    log_ratio = prior.log_prob(z_samples) - posterior.log_prob(z_samples)
    return LogWeights(log_lik + log_ratio)


# --- Losses --------------------------------------------------------------------------

def loss_vi(model: NeuralProcess, task: Task, num_samples: int, rng: RngStream,
            share_prior: bool = False) -> torch.Tensor:
    prior, posterior = _paths(model, task, share_prior)
    z = _draw(posterior, num_samples, rng)
    log_lik = model.decode(task.x_tgt, z).joint_log_likelihood(as_tensor(task.y_tgt))
    return -(log_lik.mean() - kl_diag(posterior, prior))


def loss_rnp_vi(model: NeuralProcess, task: Task, alpha: float, num_samples: int,
                rng: RngStream, alpha_eps: float = 1e-3, share_prior: bool = False) -> torch.Tensor:
    """-B(alpha) over K posterior samples; alpha near 1 gives -mean_k log w_k."""
    if alpha < 0:
        raise DomainError(f"alpha must be >= 0, got {alpha}")
    prior, posterior = _paths(model, task, share_prior)
    z = _draw(posterior, num_samples, rng)
    log_w = importance_log_weights(model, task, z, prior, posterior, share_prior)
    return -log_w.bound(alpha, alpha_eps)


def loss_ml(model: NeuralProcess, task: Task, num_samples: int, rng: RngStream,
            variant: MLVariant = MLVariant.MARGINAL) -> torch.Tensor:
    prior = model.prior(task)
    z = _draw(prior, num_samples, rng)
    log_lik = model.decode(task.x_tgt, z).joint_log_likelihood(as_tensor(task.y_tgt))
    if variant == MLVariant.EXPECTED:
        return -log_lik.mean()
    return -log_mean_exp(log_lik)


def per_point_log_marginal(model: NeuralProcess, task: Task, z: torch.Tensor) -> torch.Tensor:
    """log m_n = log mean_k p(y_n | x_n, z_k) for every target point, shape (N,)."""
    point_ll = model.decode(task.x_tgt, z).point_log_likelihood(as_tensor(task.y_tgt))
    return log_mean_exp(point_ll, dim=0)


def loss_rnp_ml(model: NeuralProcess, task: Task, alpha: float, num_samples: int,
                rng: RngStream, form: RNPMLForm = RNPMLForm.TASK,
                alpha_eps: float = 1e-3) -> torch.Tensor:
    """Renyi maximum-likelihood loss over per-point marginal estimates.

    TASK keeps the log outside the point sum, so its gradient reweights points
    by m_n^(1-alpha) / sum m^(1-alpha). LITERAL puts it inside, where the
    (1-alpha) power cancels the prefactor and the value is -mean_n log m_n for
    every alpha.
    """
    if alpha < 0:
        raise DomainError(f"alpha must be >= 0, got {alpha}")
    prior = model.prior(task)
    log_m = per_point_log_marginal(model, task, _draw(prior, num_samples, rng))
    n = log_m.shape[0]

    if abs(alpha - 1.0) < alpha_eps:
        return -log_m.mean()
    if form == RNPMLForm.LITERAL:
        return ((1.0 - alpha) * log_m).sum() / ((alpha - 1.0) * n)
    return (log_sum_exp((1.0 - alpha) * log_m) - math.log(n)) / (alpha - 1.0)


def compute_loss(model: NeuralProcess, task: Task, spec: ObjectiveSpec, rng: RngStream,
                 alpha: Optional[float] = None) -> torch.Tensor:
    """Dispatch on `spec.kind`; `alpha` overrides `spec.alpha` (schedules)."""
    alpha = spec.alpha if alpha is None else alpha
    k = spec.num_samples
    if spec.kind == ObjectiveKind.VI:
        return loss_vi(model, task, k, rng)
    if spec.kind == ObjectiveKind.ML_EXPECTED:
        return loss_ml(model, task, k, rng, MLVariant.EXPECTED)
    if spec.kind == ObjectiveKind.ML_MARGINAL:
        return loss_ml(model, task, k, rng, MLVariant.MARGINAL)
    if spec.kind == ObjectiveKind.RNP_VI:
        return loss_rnp_vi(model, task, alpha, k, rng, spec.alpha_eps)
    if spec.kind == ObjectiveKind.RNP_ML_TASK:
        return loss_rnp_ml(model, task, alpha, k, rng, RNPMLForm.TASK, spec.alpha_eps)
    return loss_rnp_ml(model, task, alpha, k, rng, RNPMLForm.LITERAL, spec.alpha_eps)


def batch_loss(model: NeuralProcess, tasks: Sequence[Task], spec: ObjectiveSpec,
               rng: RngStream, alpha: Optional[float] = None) -> torch.Tensor:
    """Mean loss over a task minibatch, summed in task order."""
    total = None
    for i, task in enumerate(tasks):
        loss = compute_loss(model, task, spec, rng.child("task", i), alpha)
        total = loss if total is None else total + loss
    return total / len(tasks)


def explicit_rnp_vi_gradient(model: NeuralProcess, task: Task, alpha: float, num_samples: int,
                             rng: RngStream, params: Optional[Sequence[torch.Tensor]] = None,
                             alpha_eps: float = 1e-3) -> List[torch.Tensor]:
    """Loss gradient as -sum_k [w_k^(1-a) / sum_j w_j^(1-a)] grad log w_k.

    Each grad log w_k is taken separately and combined with detached
    self-normalised weights, independently of autograd through the bound.
    """
    params = list(params if params is not None else model.parameters())
    prior, posterior = model.prior(task), model.posterior(task)
    z = _draw(posterior, num_samples, rng)
    log_w = importance_log_weights(model, task, z, prior, posterior)
    if abs(alpha - 1.0) < alpha_eps:
        weights = torch.full_like(log_w.values, 1.0 / num_samples)
    else:
        weights = log_w.normalized(alpha).detach()

    total = [torch.zeros_like(p) for p in params]
    for k in range(num_samples):
        for acc, g in zip(total, backward(log_w.values[k], params)):
            acc.sub_(weights[k] * g)
    return total


def log_weight_range(model: NeuralProcess, task: Task, num_samples: int,
                     rng: RngStream) -> Tuple[float, float]:
    """(min, max) of the importance log-weights, for diagnostics."""
    with torch.no_grad():
        prior, posterior = model.prior(task), model.posterior(task)
        log_w = importance_log_weights(model, task, _draw(posterior, num_samples, rng),
                                       prior, posterior).values
    return float(log_w.min()), float(log_w.max())
