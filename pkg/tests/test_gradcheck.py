#!/usr/bin/env python3
"""
Finite-difference harness, plus the full analytic-gradient suite at the
toy sizes the grad-check command uses.
"""

import os
import sys
import logging
import unittest

import numpy as np

# Add src to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from core.gradcheck import (
    CheckResult,
    check_gradient,
    loss_checks,
    model_checks,
    primitive_checks,
    relative_error,
    summarize,
)

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


class TestHarness(unittest.TestCase):

    def test_relative_error_floor(self):
        self.assertAlmostEqual(float(relative_error(1e-4, 0.0)), 1e-2)
        self.assertAlmostEqual(float(relative_error(2.0, 1.0)), 0.5)

    def test_quadratic_passes(self):
        x = np.array([0.3, -1.2, 2.5])
        result = check_gradient("quadratic", lambda: float(np.sum(x ** 2)), x, 2 * x)
        self.assertTrue(result.passed)
        self.assertEqual((result.n_checked, result.n_rejected), (3, 0))
        self.assertIn("ok", str(result))

    def test_wrong_gradient_fails(self):
        x = np.array([0.3, -1.2, 2.5])
        result = check_gradient("wrong", lambda: float(np.sum(x ** 2)), x, 3 * x)
        self.assertFalse(result.passed)
        self.assertEqual(result.n_failed, 3)
        self.assertIn("FAILED", str(result))

    def test_kink_is_rejected(self):
        x = np.array([0.0, 1.5])
        result = check_gradient("abs", lambda: float(np.sum(np.abs(x))), x, np.array([1.0, 1.0]))
        self.assertTrue(result.passed)
        self.assertEqual(result.n_rejected, 1)

    def test_kinks_cannot_hide_a_wrong_gradient(self):
        # every coordinate sits on the kink, so one-sided agreement alone would pass
        x = np.zeros(200)
        result = check_gradient("abs-everywhere", lambda: float(np.sum(np.abs(x))), x, np.ones(200))
        self.assertEqual(result.n_failed, 0)
        self.assertEqual(result.n_rejected, 200)
        self.assertEqual(result.max_rejected, 2)
        self.assertFalse(result.passed)
        self.assertIn("FAILED", str(result))

    def test_rejection_allowance(self):
        self.assertTrue(CheckResult("small", 3, 1, 0, 0.0).passed)
        self.assertTrue(CheckResult("large", 1000, 10, 0, 0.0).passed)
        self.assertFalse(CheckResult("large", 1000, 11, 0, 0.0).passed)

    def test_input_restored(self):
        x = np.array([0.25, 0.5])
        check_gradient("restore", lambda: float(np.sum(x ** 3)), x, 3 * x ** 2)
        np.testing.assert_array_equal(x, [0.25, 0.5])

    def test_summarize(self):
        results = [CheckResult("a", 10, 1, 0, 1e-6), CheckResult("b", 5, 0, 2, 0.3)]
        self.assertEqual(summarize(results), {"checks": 2, "failed": 1, "coordinates": 15, "rejected": 1})


class TestSuite(unittest.TestCase):
    """The analytic gradients themselves"""

    def assert_all_pass(self, results):
        self.assertTrue(results)
        for result in results:
            logger.info(str(result))
            self.assertTrue(result.passed, str(result))
            self.assertLessEqual(result.n_rejected, result.max_rejected, result.name)
            self.assertGreater(result.n_checked, 0)

    def test_losses(self):
        results = loss_checks(seed=0)
        self.assert_all_pass(results)
        names = [r.name for r in results]
        self.assertIn("loss/dml", names)
        self.assertIn("loss/overall[chamfer]/iter2", names)

    def test_primitives(self):
        self.assert_all_pass(primitive_checks(seed=0))

    def test_model(self):
        results = model_checks(seed=0)
        self.assert_all_pass(results)
        self.assertEqual(results[-1].name, "model/grid")
        self.assertEqual(results[-1].n_checked, 16 * 16 * 4)


if __name__ == '__main__':
    unittest.main()
