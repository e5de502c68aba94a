#!/usr/bin/env python3
"""
Self-check suites for RNPx.

The gradient suite checks the Renyi bound against its own theory: power-mean
monotonicity in alpha, the ML/VI end points, the explicit self-normalised
gradient, and central finite differences. The oracle suite checks the
closed-form divergences against quadrature and the factorised Renyi fit
against its analytic optimum.
"""

import argparse
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
from torch.func import functional_call

sys.path.insert(0, str(Path(__file__).parent.parent))

from models.rnp_v1.errors import CheckFailure, RNPError
from models.rnp_v1.model import DiagGaussian, ModelConfig, NeuralProcess, build_model
from models.rnp_v1.numkit import RngStream, as_tensor, backward, finite_diff_check, log_mean_exp
from models.rnp_v1.objectives import (MLVariant, explicit_rnp_vi_gradient,
                                      importance_log_weights, kl_diag, loss_ml, loss_rnp_vi,
                                      renyi_bound, renyi_diag)
from models.rnp_v1.oracles import (Cov2, fit_renyi_factorized, kl_quadrature, renyi_factorized_variances,
                                   renyi_quadrature, rho_alpha)
from models.rnp_v1.taskgen import DatasetSpec, Task, TaskSplit, generate_task
from models.rnp_v1.train import single_threaded

logger = logging.getLogger(__name__)

MONOTONICITY_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.999, 1.5, 2.0)
GRADIENT_ALPHAS = (0.0, 0.3, 0.7, 1.5)
IDENTITY_TOL = 1e-8
FD_TOL = 1e-4
FD_EPS = 1e-6

CheckFn = Callable[[], Tuple[bool, str]]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


@dataclass
class SuiteReport:
    results: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def first_failure(self) -> Optional[CheckResult]:
        return next((r for r in self.results if not r.passed), None)

    def raise_on_failure(self):
        failure = self.first_failure
        if failure is not None:
            raise CheckFailure(failure.name, failure.detail)


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """max |a - b| / max(1, |b|), elementwise."""
    return float(((a - b).abs() / b.abs().clamp(min=1.0)).max())


def tiny_model(seed: int, activation: str = "relu", scale: float = 1.0) -> NeuralProcess:
    """A small NP; `scale` shrinks every initial weight."""
    model = build_model(ModelConfig(hidden=8, layers=1, z_dim=2, activation=activation), seed)
    if scale != 1.0:
        with torch.no_grad():
            for param in model.parameters():
                param.mul_(scale)
    return model


def small_task(seed: int, index: int, num_context: int = 3, num_target: int = 2) -> Task:
    return generate_task(DatasetSpec(), seed, "check", index,
                         TaskSplit.fixed(num_context, num_target))


class _LossModule(nn.Module):
    """Lets functional_call swap the wrapped model's parameters for a loss closure."""

    def __init__(self, model: NeuralProcess, loss_fn: Callable[[NeuralProcess], torch.Tensor]):
        super().__init__()
        self.model = model
        self.loss_fn = loss_fn

    def forward(self):
        return self.loss_fn(self.model)


class SelfCheck:
    """Runs named checks, logging each outcome; a raised RNPError counts as a failure."""

    name = "self-check"

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.report = SuiteReport()

    def checks(self) -> List[Tuple[str, CheckFn]]:
        raise NotImplementedError

    def run_check(self, name: str, check: CheckFn) -> bool:
        logger.info(f"Running check: {name}")
        try:
            passed, detail = check()
        except RNPError as e:
            passed, detail = False, f"{type(e).__name__}: {e}"
        self.report.results.append(CheckResult(name, passed, detail))
        if passed:
            logger.info(f"PASS {name}: {detail}")
        else:
            logger.error(f"FAIL {name}: {detail}")
        return passed

    def run(self) -> SuiteReport:
        with single_threaded():
            for name, check in self.checks():
                self.run_check(name, check)
        passed = sum(r.passed for r in self.report.results)
        logger.info(f"{self.name}: {passed}/{len(self.report.results)} checks passed")
        return self.report


class GradientSuite(SelfCheck):
    name = "gradcheck"

    def __init__(self, seed: int = 0, n_tasks: int = 20, num_samples: int = 4, tol: float = FD_TOL):
        super().__init__(seed)
        self.n_tasks = n_tasks
        self.num_samples = num_samples
        self.tol = tol
        self.max_fd_error = 0.0

    def checks(self):
        return [
            ("bound-monotonicity", self.check_monotonicity),
            ("objective-unification", self.check_unification),
            ("explicit-gradient", self.check_explicit_gradient),
            ("finite-difference", self.check_finite_difference),
        ]

    def check_monotonicity(self) -> Tuple[bool, str]:
        rng = RngStream(self.seed, "check-weights")
        worst = -math.inf
        for i in range(100):
            log_w = 3.0 * rng.child("vector", i).normal(32)
            bounds = [float(renyi_bound(log_w, a)) for a in MONOTONICITY_GRID]
            worst = max(worst, max(b - a for a, b in zip(bounds, bounds[1:])))
        return worst <= 1e-10, f"largest increase along the alpha grid {worst:.3e}"

    def check_unification(self) -> Tuple[bool, str]:
        k = 16
        worst_limit, worst_chain = 0.0, -math.inf
        for i in range(100):
            model = tiny_model(self.seed + i, scale=0.3)
            task = small_task(self.seed, i)
            key = RngStream(self.seed, "check-unify", (i,))

            prior, posterior = model.prior(task), model.posterior(task)
            z = posterior.mean + posterior.std * key.child("z").normal(k, 2)
            log_w = importance_log_weights(model, task, z, prior, posterior).values
            if float(renyi_bound(log_w, 0.0)) != float(log_mean_exp(log_w)):
                return False, f"instance {i}: B(0) differs from the log-marginal estimate"
            worst_limit = max(worst_limit, abs(float(renyi_bound(log_w, 0.999)) - float(log_w.mean())))

            ml = float(loss_ml(model, task, k, key.child("crn"), MLVariant.MARGINAL))
            mid = float(loss_rnp_vi(model, task, 0.5, k, key.child("crn"), share_prior=True))
            limit = float(loss_rnp_vi(model, task, 1.0, k, key.child("crn"), share_prior=True))
            rnp0 = float(loss_rnp_vi(model, task, 0.0, k, key.child("crn"), share_prior=True))
            if ml != rnp0:
                return False, f"instance {i}: ML marginal {ml} != RNP-VI(alpha=0) {rnp0}"
            worst_chain = max(worst_chain, ml - mid, mid - limit)

        ok = worst_limit < 1e-3 and worst_chain <= 1e-12
        return ok, f"|B(0.999) - mean log w| <= {worst_limit:.3e}, chain violation {worst_chain:.3e}"

    def check_explicit_gradient(self) -> Tuple[bool, str]:
        worst = 0.0
        for i in range(self.n_tasks):
            model = tiny_model(self.seed + i)
            task = small_task(self.seed, i)
            alpha = GRADIENT_ALPHAS[i % len(GRADIENT_ALPHAS)]
            key = RngStream(self.seed, "check-identity", (i,))
            params = list(model.parameters())

            loss = loss_rnp_vi(model, task, alpha, self.num_samples, key)
            autodiff = backward(loss, params)
            explicit = explicit_rnp_vi_gradient(model, task, alpha, self.num_samples,
                                                RngStream(self.seed, "check-identity", (i,)), params)
            worst = max(worst, max(rel_error(a, e) for a, e in zip(autodiff, explicit)))
        return worst < IDENTITY_TOL, f"max relative error {worst:.3e}"

    def check_finite_difference(self) -> Tuple[bool, str]:
        worst = 0.0
        for i in range(self.n_tasks):
            model = tiny_model(self.seed + i, activation="tanh")
            task = small_task(self.seed, i)
            alpha = GRADIENT_ALPHAS[i % len(GRADIENT_ALPHAS)]
            wrapper = _LossModule(model, lambda m, i=i, alpha=alpha: loss_rnp_vi(
                m, task, alpha, self.num_samples, RngStream(self.seed, "check-fd", (i,))))
            names = [f"model.{name}" for name, _ in model.named_parameters()]

            def objective(tensors):
                return functional_call(wrapper, dict(zip(names, tensors)), ())

            result = finite_diff_check(objective, [p.detach() for p in model.parameters()], FD_EPS)
            if result.failed_index is not None:
                return False, f"task {i}: non-finite objective at coordinate {result.failed_index}"
            worst = max(worst, result.max_rel_error)
        self.max_fd_error = worst
        return worst < self.tol, f"max relative error {worst:.3e}"


class OracleSuite(SelfCheck):
    name = "oracle"

    def checks(self):
        return [
            ("rho-values", self.check_rho_values),
            ("rho-monotone", self.check_rho_monotone),
            ("divergence-quadrature", self.check_divergence_quadrature),
            ("factorized-fit", self.check_factorized_fit),
        ]

    def _random_covs(self, count: int) -> List[Cov2]:
        rng = RngStream(self.seed, "check-covs")
        covs = []
        for _ in range(count):
            s11, s22 = rng.uniform(0.2, 3.0), rng.uniform(0.2, 3.0)
            r = rng.uniform(-0.95, 0.95)
            covs.append(Cov2(s11=s11, s12=r * math.sqrt(s11 * s22), s22=s22))
        return covs

    def check_rho_values(self) -> Tuple[bool, str]:
        covs = self._random_covs(10)
        at_one = max(abs(rho_alpha(c, 1.0) - 1.0) for c in covs)
        uncorrelated = max(abs(rho_alpha(Cov2(s11=2.0, s12=0.0, s22=0.5), a) - 1.0)
                           for a in (0.1, 0.5, 0.9, 1.0))
        known = abs(rho_alpha(Cov2(s11=1.0, s12=0.6, s22=1.0), 0.5) - 0.8)
        worst = max(at_one, uncorrelated, known)
        return worst < 1e-12, f"max deviation from closed-form values {worst:.3e}"

    def check_rho_monotone(self) -> Tuple[bool, str]:
        grid = np.round(np.arange(1, 101) * 0.01, 10)
        worst_drop, out_of_range = 0.0, 0
        for cov in self._random_covs(100):
            values = np.array([rho_alpha(cov, a) for a in grid])
            worst_drop = max(worst_drop, float(np.max(values[:-1] - values[1:])))
            out_of_range += int(np.sum((values <= 0) | (values > 1.0 + 1e-12)))
        ok = worst_drop <= 1e-12 and out_of_range == 0
        return ok, f"largest decrease {worst_drop:.3e}, values outside (0, 1]: {out_of_range}"

    def check_divergence_quadrature(self) -> Tuple[bool, str]:
        rng = RngStream(self.seed, "check-pairs")
        worst_kl = worst_renyi = worst_limit = 0.0
        for _ in range(100):
            mq, mp = rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)
            sq, sp = rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)
            alpha = rng.uniform(0.1, 0.9)
            q = DiagGaussian(as_tensor([mq]), as_tensor([sq]))
            p = DiagGaussian(as_tensor([mp]), as_tensor([sp]))
            kl = float(kl_diag(q, p))
            worst_kl = max(worst_kl, abs(kl - kl_quadrature(mq, sq, mp, sp)))
            worst_renyi = max(worst_renyi, abs(float(renyi_diag(q, p, alpha))
                                               - renyi_quadrature(mq, sq, mp, sp, alpha)))
            worst_limit = max(worst_limit, abs(float(renyi_diag(q, p, 0.999)) - kl))
        ok = worst_kl < 1e-6 and worst_renyi < 1e-6 and worst_limit < 1e-3
        return ok, (f"KL {worst_kl:.3e}, Renyi {worst_renyi:.3e}, "
                    f"alpha=0.999 vs KL {worst_limit:.3e}")

    def check_factorized_fit(self) -> Tuple[bool, str]:
        correlated = Cov2(s11=1.0, s12=0.6, s22=1.0)
        worst, ratios = 0.0, []
        for alpha in (0.2, 0.5, 0.8):
            fit = fit_renyi_factorized(correlated, alpha, seed=self.seed)
            if not fit.converged:
                return False, f"alpha={alpha}: fit stopped with gradient norm {fit.grad_norm:.3e}"
            expected = np.array(renyi_factorized_variances(correlated, alpha))
            worst = max(worst, float(np.max(np.abs(fit.variances / expected - 1.0))))
            ratios.append(float(fit.precision_ratio(correlated)[0]))
        if any(b < a for a, b in zip(ratios, ratios[1:])):
            return False, f"precision ratios not non-decreasing in alpha: {ratios}"

        independent = Cov2(s11=1.5, s12=0.0, s22=0.5)
        fit = fit_renyi_factorized(independent, 0.5, seed=self.seed)
        worst = max(worst, float(np.max(np.abs(fit.variances / np.array([1.5, 0.5]) - 1.0))))

        fit = fit_renyi_factorized(correlated, 0.999, seed=self.seed)
        kl_precisions = np.array(correlated.precision_diagonal())
        worst = max(worst, float(np.max(np.abs(fit.precisions / kl_precisions - 1.0))))
        return worst < 0.01, f"max relative variance error {worst:.3e}, precision ratios {ratios}"


def run_gradient_suite(seed: int = 0, n_tasks: int = 20, tol: float = FD_TOL) -> Tuple[SuiteReport, float]:
    suite = GradientSuite(seed, n_tasks=n_tasks, tol=tol)
    return suite.run(), suite.max_fd_error


def run_oracle_suite(seed: int = 0) -> SuiteReport:
    return OracleSuite(seed).run()


def main():
    parser = argparse.ArgumentParser(description="Run the RNPx self-check suites")
    parser.add_argument("--suite", choices=["gradcheck", "oracle", "all"], default="all")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
    reports = []
    if args.suite in ("gradcheck", "all"):
        reports.append(run_gradient_suite(args.seed)[0])
    if args.suite in ("oracle", "all"):
        reports.append(run_oracle_suite(args.seed))
    sys.exit(0 if all(r.passed for r in reports) else 1)


if __name__ == '__main__':
    main()
