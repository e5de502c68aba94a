"""
Unit tests for the gradient and oracle self-check suites
"""

import time
import unittest
import sys
from pathlib import Path
from unittest.mock import patch

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from tests import RNPxTestCase
from models.rnp_v1.errors import CheckFailure, NumericError
from scripts.self_check import (FD_TOL, GradientSuite, OracleSuite, SuiteReport, CheckResult,
                                run_gradient_suite, run_oracle_suite)


class TestGradientSuite(RNPxTestCase):
    """Bound monotonicity, objective unification and gradient checks"""

    def test_full_suite_passes_quickly(self):
        start = time.perf_counter()
        report, max_error = run_gradient_suite(seed=0, n_tasks=20)
        elapsed = time.perf_counter() - start
        self.assertTrue(report.passed, report.first_failure)
        self.assertEqual([r.name for r in report.results],
                         ['bound-monotonicity', 'objective-unification', 'explicit-gradient',
                          'finite-difference'])
        self.assertLess(max_error, FD_TOL)
        self.assertLess(elapsed, 30.0)

    def test_zero_tolerance_fails_finite_difference_only(self):
        report, _ = run_gradient_suite(seed=0, n_tasks=2, tol=0.0)
        self.assertFalse(report.passed)
        self.assertEqual(report.first_failure.name, 'finite-difference')
        with self.assertRaises(CheckFailure):
            report.raise_on_failure()

    def test_raised_error_counts_as_failure(self):
        suite = GradientSuite(seed=0, n_tasks=2)
        with patch.object(suite, 'check_monotonicity', side_effect=NumericError('NaN bound')):
            report = suite.run()
        self.assertFalse(report.results[0].passed)
        self.assertIn('NumericError', report.results[0].detail)


class TestOracleSuite(RNPxTestCase):
    """Closed-form factorized Gaussian checks"""

    def test_full_suite_passes(self):
        report = run_oracle_suite(seed=0)
        self.assertTrue(report.passed, report.first_failure)
        self.assertEqual(len(report.results), 4)

    def test_suite_names(self):
        self.assertEqual([name for name, _ in OracleSuite().checks()],
                         ['rho-values', 'rho-monotone', 'divergence-quadrature', 'factorized-fit'])


class TestSuiteReport(unittest.TestCase):
    """Report aggregation"""

    def test_empty_report_passes(self):
        report = SuiteReport()
        self.assertTrue(report.passed)
        self.assertIsNone(report.first_failure)
        report.raise_on_failure()

    def test_first_failure_is_reported(self):
        report = SuiteReport([CheckResult('a', True, ''), CheckResult('b', False, 'bad'),
                              CheckResult('c', False, 'worse')])
        self.assertEqual(report.first_failure.name, 'b')


if __name__ == '__main__':
    unittest.main()
