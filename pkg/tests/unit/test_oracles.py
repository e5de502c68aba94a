"""
Unit tests for the analytic divergence oracles
"""

import math
import unittest
import sys
from pathlib import Path

import numpy as np
import torch
from pydantic import ValidationError

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from tests import RNPxTestCase
from models.rnp_v1.errors import DomainError
from models.rnp_v1.model import DiagGaussian
from models.rnp_v1.numkit import as_tensor
from models.rnp_v1.objectives import kl_diag, renyi_diag
from models.rnp_v1.oracles import (Cov2, fit_renyi_factorized, kl_quadrature, renyi_factorized_variances,
                                   renyi_gaussian, rho_alpha)


class TestRho(RNPxTestCase):
    """Variance ratio of the factorised Renyi optimum"""

    def setUp(self):
        super().setUp()
        self.cov = Cov2(s11=1.0, s12=0.6, s22=1.0)

    def test_known_values(self):
        self.assertAlmostEqual(rho_alpha(self.cov, 0.5), 0.8, places=12)
        self.assertAlmostEqual(rho_alpha(self.cov, 1.0), 1.0, places=12)

    def test_uncorrelated_is_one(self):
        cov = Cov2(s11=2.0, s12=0.0, s22=0.3)
        for alpha in (0.05, 0.5, 1.0):
            self.assertAlmostEqual(rho_alpha(cov, alpha), 1.0, places=12)

    def test_monotone_in_alpha(self):
        values = [rho_alpha(self.cov, a) for a in np.linspace(0.01, 1.0, 100)]
        self.assertTrue(all(b >= a - 1e-12 for a, b in zip(values, values[1:])))
        self.assertTrue(all(0 < v <= 1.0 + 1e-12 for v in values))

    def test_alpha_out_of_range(self):
        for alpha in (0.0, -0.5, 1.2):
            with self.assertRaises(DomainError):
                rho_alpha(self.cov, alpha)

    def test_kl_end_matches_mean_field(self):
        """At alpha = 1 the factorised variances are the inverse precision diagonal"""
        variances = renyi_factorized_variances(self.cov, 1.0)
        expected = [1.0 / p for p in self.cov.precision_diagonal()]
        np.testing.assert_allclose(variances, expected, rtol=1e-12)

    def test_not_positive_definite(self):
        with self.assertRaises(ValidationError):
            Cov2(s11=1.0, s12=1.0, s22=1.0)


class TestGaussianDivergence(RNPxTestCase):
    """Full-covariance closed form against the diagonal one and quadrature"""

    def test_diagonal_case_matches_renyi_diag(self):
        mq, sq = [0.2, -0.4], [0.9, 1.3]
        mp, sp = [0.0, 0.5], [1.1, 0.7]
        q, p = DiagGaussian(as_tensor(mq), as_tensor(sq)), DiagGaussian(as_tensor(mp), as_tensor(sp))
        cov_q, cov_p = torch.diag(as_tensor(sq) ** 2), torch.diag(as_tensor(sp) ** 2)
        for alpha in (0.3, 0.7):
            self.assertAlmostEqual(float(renyi_gaussian(mq, cov_q, mp, cov_p, alpha)),
                                   float(renyi_diag(q, p, alpha)), places=10)
        self.assertAlmostEqual(float(renyi_gaussian(mq, cov_q, mp, cov_p, 1.0)),
                               float(kl_diag(q, p)), places=10)

    def test_kl_quadrature(self):
        q, p = DiagGaussian(as_tensor([0.4]), as_tensor([0.6])), DiagGaussian(as_tensor([-0.3]), as_tensor([1.7]))
        self.assertAlmostEqual(kl_quadrature(0.4, 0.6, -0.3, 1.7), float(kl_diag(q, p)), places=7)

    def test_identical_distributions(self):
        cov = torch.tensor([[1.0, 0.3], [0.3, 2.0]], dtype=torch.float64)
        value = float(renyi_gaussian([0.0, 0.0], cov, [0.0, 0.0], cov, 0.5))
        self.assertAlmostEqual(value, 0.0, places=12)


class TestFactorizedFit(RNPxTestCase):
    """Gradient-descent fit against the analytic optimum"""

    def setUp(self):
        super().setUp()
        self.cov = Cov2(s11=1.0, s12=0.6, s22=1.0)

    def test_fit_matches_closed_form(self):
        ratios = []
        for alpha in (0.2, 0.5, 0.8):
            fit = fit_renyi_factorized(self.cov, alpha, seed=0)
            self.assertTrue(fit.converged, f"alpha={alpha}")
            expected = np.array(renyi_factorized_variances(self.cov, alpha))
            np.testing.assert_allclose(fit.variances, expected, rtol=0.01)
            self.assertLess(float(np.max(np.abs(fit.mean))), 1e-3)
            ratios.append(float(fit.precision_ratio(self.cov)[0]))
        self.assertLessEqual(ratios[0], ratios[1])
        self.assertLessEqual(ratios[1], ratios[2])

    def test_independent_target_is_recovered(self):
        cov = Cov2(s11=1.5, s12=0.0, s22=0.5)
        fit = fit_renyi_factorized(cov, 0.5, seed=1)
        np.testing.assert_allclose(fit.variances, [1.5, 0.5], rtol=0.01)
        self.assertLess(fit.divergence, 1e-6)

    def test_fit_is_deterministic(self):
        first = fit_renyi_factorized(self.cov, 0.5, seed=3)
        second = fit_renyi_factorized(self.cov, 0.5, seed=3)
        np.testing.assert_array_equal(first.variances, second.variances)
        np.testing.assert_array_equal(first.mean, second.mean)

    def test_alpha_range(self):
        with self.assertRaises(DomainError):
            fit_renyi_factorized(self.cov, 1.0)
        with self.assertRaises(DomainError):
            renyi_factorized_variances(self.cov, 0.0)


if __name__ == '__main__':
    unittest.main()
