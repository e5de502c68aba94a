"""
Numerical toolkit shared by every RNPx module.

Tensors are float64 torch tensors and the autograd graph recorded by torch
plays the role of the tape: `backward` replays it for a scalar output and
returns exact zeros for parameters the output does not reach. All
randomness flows through `RngStream`, a counter-based generator keyed by
(seed, purpose, index...), so draws never depend on call interleaving.
"""

import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from models.rnp_v1.errors import ContractError, DomainError

logger = logging.getLogger(__name__)

DTYPE = torch.float64
LOG_2PI = math.log(2.0 * math.pi)

ArrayLike = Union[torch.Tensor, np.ndarray, Sequence[float], float]


def as_tensor(data: ArrayLike) -> torch.Tensor:
    """Return `data` as a float64 tensor, sharing memory when possible."""
    if isinstance(data, torch.Tensor):
        return data if data.dtype == DTYPE else data.to(DTYPE)
    if isinstance(data, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(data, dtype=np.float64))
    return torch.as_tensor(data, dtype=DTYPE)


def log_sum_exp(v: ArrayLike, dim: int = -1) -> torch.Tensor:
    """Stable log(sum(exp(v))) along `dim` (max-shifted by torch)."""
    v = as_tensor(v)
    if v.numel() == 0:
        raise DomainError("log_sum_exp of an empty vector")
    if v.dim() == 0:
        return v.clone()
    return torch.logsumexp(v, dim=dim)


def log_mean_exp(v: ArrayLike, dim: int = -1) -> torch.Tensor:
    """log((1/n) sum(exp(v))) along `dim`."""
    v = as_tensor(v)
    n = v.shape[dim] if v.dim() > 0 else 1
    return log_sum_exp(v, dim=dim) - math.log(n)


def gaussian_log_pdf(y: ArrayLike, mu: ArrayLike, sigma: ArrayLike) -> torch.Tensor:
    """Elementwise log N(y | mu, sigma^2). Callers sum over dimensions."""
    y, mu, sigma = as_tensor(y), as_tensor(mu), as_tensor(sigma)
    if bool(torch.any(sigma.detach() <= 0)):
        raise DomainError("gaussian_log_pdf requires sigma > 0")
    return -0.5 * LOG_2PI - torch.log(sigma) - (y - mu) ** 2 / (2.0 * sigma ** 2)


def backward(output: torch.Tensor, params: Sequence[torch.Tensor]) -> List[torch.Tensor]:
    """Gradients of a scalar `output` w.r.t. each of `params`.

    Parameters the output does not depend on get an exact zero gradient.
    The graph is retained so several gradient paths can share one forward.
    """
    if output.numel() != 1:
        raise ContractError(f"backward needs a scalar output, got shape {tuple(output.shape)}")
    params = list(params)
    grads = torch.autograd.grad(output.reshape(()), params, retain_graph=True, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


@dataclass
class FiniteDiffResult:
    """Outcome of a central-difference gradient check."""

    max_rel_error: float
    worst_index: Optional[int] = None
    failed_index: Optional[int] = None
    analytic: List[torch.Tensor] = field(default_factory=list, repr=False)

    def passed(self, tol: float) -> bool:
        return self.failed_index is None and self.max_rel_error < tol


def finite_diff_check(f: Callable[[Sequence[torch.Tensor]], torch.Tensor],
                      params: Sequence[torch.Tensor], eps: float) -> FiniteDiffResult:
    """Compare autograd against central differences coordinate by coordinate.

    `f` maps a list of tensors (shaped like `params`) to a scalar tensor.
    Returns max_c |analytic_c - numeric_c| / max(1, |numeric_c|); a non-finite
    value of f at a perturbed point is reported through `failed_index`
    (the flattened coordinate across all params).
    """
    if eps <= 0:
        raise DomainError("finite_diff_check needs eps > 0")

    leaves = [as_tensor(p).detach().clone().requires_grad_(True) for p in params]
    analytic = backward(f(leaves), leaves)

    base = [leaf.detach().clone() for leaf in leaves]
    max_err, worst = 0.0, None
    offset = 0
    with torch.no_grad():
        for which, (value, grad) in enumerate(zip(base, analytic)):
            flat_grad = grad.reshape(-1)
            for i in range(value.numel()):
                coord = offset + i
                shifted = [b.clone() for b in base]
                shifted[which].view(-1)[i] += eps
                f_plus = float(f(shifted))
                shifted[which].view(-1)[i] -= 2.0 * eps
                f_minus = float(f(shifted))
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    logger.debug(f"non-finite objective at perturbed coordinate {coord}")
                    return FiniteDiffResult(math.inf, coord, coord, analytic)
                numeric = (f_plus - f_minus) / (2.0 * eps)
                err = abs(float(flat_grad[i]) - numeric) / max(1.0, abs(numeric))
                if err > max_err or worst is None:
                    max_err, worst = err, coord
            offset += value.numel()
    return FiniteDiffResult(max_err, worst, None, analytic)


def _purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


@dataclass
class RngStream:
    """Keyed random stream: identical (seed, purpose, index) gives identical draws.

    Backed by numpy's Philox counter-based generator; the key is folded into
    the SeedSequence spawn key, so streams for different tasks or samples
    are independent and reproducible under any scheduling.
    """

    seed: int
    purpose: str = "root"
    index: Tuple[int, ...] = ()
    _generator: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.index = tuple(int(i) for i in self.index)
        seq = np.random.SeedSequence(
            entropy=int(self.seed) & 0xFFFFFFFFFFFFFFFF,
            spawn_key=(_purpose_key(self.purpose),) + self.index,
        )
        self._generator = np.random.Generator(np.random.Philox(seq))

    def child(self, purpose: str, *index: int) -> "RngStream":
        """Independent sub-stream keyed by an extra purpose tag and indices."""
        return RngStream(self.seed, f"{self.purpose}/{purpose}", self.index + tuple(index))

    @property
    def generator(self) -> np.random.Generator:
        return self._generator

    def normal(self, *shape: int) -> torch.Tensor:
        """Standard-normal draws as a float64 tensor."""
        return torch.from_numpy(self._generator.standard_normal(shape))

    def uniform(self, low: float, high: float, size=None):
        return self._generator.uniform(low, high, size)

    def integers(self, low: int, high: int) -> int:
        """Uniform integer on the closed interval [low, high]."""
        return int(self._generator.integers(low, high, endpoint=True))

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)
