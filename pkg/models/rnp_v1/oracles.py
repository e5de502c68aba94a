"""
Analytic ground truth for the divergence code.

Covers the posterior-variance ratio rho_alpha of a factorised Renyi fit to
a correlated bivariate Gaussian, a gradient-descent fit that has to
reproduce it, the multivariate closed-form Renyi divergence, and 1-D
quadrature references for the diagonal KL/Renyi formulas.
"""

import logging
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import scipy.integrate
import torch
from pydantic import BaseModel, ConfigDict, model_validator

from models.rnp_v1.errors import DomainError
from models.rnp_v1.numkit import DTYPE, RngStream, as_tensor

logger = logging.getLogger(__name__)

FIT_STEPS = 20000
FIT_STEP_SIZE = 1e-2
FIT_GRAD_TOL = 1e-6


class Cov2(BaseModel):
    """Symmetric positive-definite 2x2 covariance [[s11, s12], [s12, s22]]."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    s11: float
    s12: float
    s22: float

    @model_validator(mode="after")
    def _positive_definite(self):
        if not (self.s11 > 0 and self.s22 > 0 and self.s11 * self.s22 - self.s12 ** 2 > 0):
            raise ValueError(f"covariance is not positive definite: {self!r}")
        return self

    @property
    def correlation_sq(self) -> float:
        return self.s12 ** 2 / (self.s11 * self.s22)

    def matrix(self) -> np.ndarray:
        return np.array([[self.s11, self.s12], [self.s12, self.s22]])

    def precision_diagonal(self) -> Tuple[float, float]:
        """Diagonal of the inverse covariance (the KL mean-field precisions)."""
        det = self.s11 * self.s22 - self.s12 ** 2
        return self.s22 / det, self.s11 / det


def _rho(r2: float, alpha: float) -> float:
    if alpha == 0.0:
        return 1.0 - r2
    disc = 1.0 - 4.0 * alpha * (1.0 - alpha) * r2
    if disc < 0:
        raise DomainError(f"negative discriminant {disc} for alpha={alpha}, r^2={r2}")
    return ((2.0 * alpha - 1.0) + math.sqrt(disc)) / (2.0 * alpha)


def rho_alpha(cov: Cov2, alpha: float) -> float:
    """rho = [(2a - 1) + sqrt(1 - 4a(1 - a) r^2)] / (2a), r^2 = s12^2 / (s11 s22), a in (0, 1]."""
    if not alpha > 0:
        raise DomainError(f"rho_alpha needs alpha > 0, got {alpha}")
    if alpha > 1:
        raise DomainError(f"rho_alpha needs alpha <= 1, got {alpha}")
    return _rho(cov.correlation_sq, alpha)


def renyi_factorized_variances(cov: Cov2, alpha: float) -> Tuple[float, float]:
    """Variances of the factorised Gaussian minimising D_alpha(q || N(0, cov)).

    The stationary point is v_i = s_ii * rho evaluated at 1 - alpha; at
    alpha = 1 this is the KL mean-field answer 1 / (cov^-1)_ii.
    """
    if not 0 < alpha <= 1:
        raise DomainError(f"alpha must lie in (0, 1], got {alpha}")
    ratio = _rho(cov.correlation_sq, 1.0 - alpha)
    return cov.s11 * ratio, cov.s22 * ratio


def renyi_gaussian(mean_q, cov_q, mean_p, cov_p, alpha: float) -> torch.Tensor:
    """D_alpha(N(mean_q, cov_q) || N(mean_p, cov_p)) for full covariances.

    With S = alpha cov_p + (1 - alpha) cov_q:
        alpha/2 d' S^-1 d - 1/(2(alpha - 1)) ln(|S| / (|cov_q|^(1-alpha) |cov_p|^alpha))
    and the KL closed form at alpha = 1.
    """
    mean_q, cov_q = as_tensor(mean_q), as_tensor(cov_q)
    mean_p, cov_p = as_tensor(mean_p), as_tensor(cov_p)
    diff = mean_q - mean_p
    _, logdet_q = torch.linalg.slogdet(cov_q)
    _, logdet_p = torch.linalg.slogdet(cov_p)

    if alpha == 1.0:
        dim = diff.shape[-1]
        trace = torch.trace(torch.linalg.solve(cov_p, cov_q))
        maha = diff @ torch.linalg.solve(cov_p, diff)
        return 0.5 * (trace + maha - dim + logdet_p - logdet_q)

    mixed = alpha * cov_p + (1.0 - alpha) * cov_q
    sign, logdet_mixed = torch.linalg.slogdet(mixed)
    if float(sign) <= 0:
        raise DomainError(f"mixed covariance is not positive definite for alpha={alpha}")
    maha = diff @ torch.linalg.solve(mixed, diff)
    log_ratio = logdet_mixed - (1.0 - alpha) * logdet_q - alpha * logdet_p
    return 0.5 * alpha * maha - log_ratio / (2.0 * (alpha - 1.0))


@dataclass(frozen=True)
class FitResult:
    """Outcome of a factorised Renyi fit to N(0, cov)."""

    mean: np.ndarray
    variances: np.ndarray
    divergence: float
    steps: int
    grad_norm: float
    converged: bool

    @property
    def precisions(self) -> np.ndarray:
        return 1.0 / self.variances

    def precision_ratio(self, cov: Cov2) -> np.ndarray:
        """Fitted precision times the marginal variance, per coordinate."""
        return self.precisions * np.array([cov.s11, cov.s22])


def fit_renyi_factorized(cov: Cov2, alpha: float, steps: int = FIT_STEPS,
                         step_size: float = FIT_STEP_SIZE, seed: int = 0) -> FitResult:
    """Gradient descent on (mu, log sigma) of a factorised Gaussian against D_alpha(q || N(0, cov))."""
    if not 0 < alpha < 1:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    rng = RngStream(seed, "renyi-fit")
    target_cov = as_tensor(cov.matrix())
    target_mean = torch.zeros(2, dtype=DTYPE)

    mean = (0.1 * rng.normal(2)).requires_grad_(True)
    log_std = (0.5 * torch.log(torch.diagonal(target_cov)) + 0.1 * rng.normal(2)).requires_grad_(True)
    optimizer = torch.optim.SGD([mean, log_std], lr=step_size)

    grad_norm, step = math.inf, 0
    for step in range(1, steps + 1):
        optimizer.zero_grad()
        loss = renyi_gaussian(mean, torch.diag(torch.exp(2.0 * log_std)), target_mean, target_cov, alpha)
        loss.backward()
        grad_norm = float(torch.sqrt(mean.grad.pow(2).sum() + log_std.grad.pow(2).sum()))
        if grad_norm < FIT_GRAD_TOL:
            break
        optimizer.step()

    with torch.no_grad():
        variances = torch.exp(2.0 * log_std)
        divergence = float(renyi_gaussian(mean, torch.diag(variances), target_mean, target_cov, alpha))
    converged = grad_norm < FIT_GRAD_TOL
    if not converged:
        logger.warning(f"Renyi fit (alpha={alpha}) did not converge after {steps} steps: "
                       f"gradient norm {grad_norm:.3e}")
    return FitResult(mean.detach().numpy().copy(), variances.numpy().copy(), divergence,
                     step, grad_norm, converged)


# --- Quadrature references -----------------------------------------------------------

def _log_normal(z: float, mu: float, sigma: float) -> float:
    return -0.5 * math.log(2.0 * math.pi) - math.log(sigma) - (z - mu) ** 2 / (2.0 * sigma ** 2)


def _bounds(mu_q, sigma_q, mu_p, sigma_p) -> Tuple[float, float]:
    width = 30.0 * max(sigma_q, sigma_p)
    return min(mu_q, mu_p) - width, max(mu_q, mu_p) + width


def kl_quadrature(mu_q: float, sigma_q: float, mu_p: float, sigma_p: float) -> float:
    """KL(q || p) for 1-D Gaussians by adaptive quadrature of q (ln q - ln p)."""
    lo, hi = _bounds(mu_q, sigma_q, mu_p, sigma_p)

    def integrand(z):
        log_q = _log_normal(z, mu_q, sigma_q)
        return math.exp(log_q) * (log_q - _log_normal(z, mu_p, sigma_p))

    value, _ = scipy.integrate.quad(integrand, lo, hi, points=[mu_q, mu_p],
                                    epsabs=1e-13, epsrel=1e-12, limit=400)
    return value


def renyi_quadrature(mu_q: float, sigma_q: float, mu_p: float, sigma_p: float,
                     alpha: float) -> float:
    """1/(alpha - 1) ln integral q^alpha p^(1 - alpha) for 1-D Gaussians."""
    lo, hi = _bounds(mu_q, sigma_q, mu_p, sigma_p)

    def integrand(z):
        return math.exp(alpha * _log_normal(z, mu_q, sigma_q)
                        + (1.0 - alpha) * _log_normal(z, mu_p, sigma_p))

    value, _ = scipy.integrate.quad(integrand, lo, hi, points=[mu_q, mu_p],
                                    epsabs=1e-14, epsrel=1e-12, limit=400)
    return math.log(value) / (alpha - 1.0)
