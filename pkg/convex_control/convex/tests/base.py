# =================================================================
# convex/tests/base.py - Shared fixtures for the toolkit tests
# =================================================================

import shutil
import tempfile

import numpy as np
from django.test import SimpleTestCase

from convex.icnn import IcnnModel
from convex.numeric import seeded_stream


def abs_model() -> IcnnModel:
    """|u| = v + 2 ReLU(u) on the expanded input [u; v], v = −u."""
    return IcnnModel(
        1,
        weights=[np.array([[1.0, 0.0]]), np.array([[2.0]])],
        passthrough=[np.array([[0.0, 1.0]])],
        biases=[np.zeros(1), np.zeros(1)],
    )


# EXPLANATION: Base Test Class for Common Setup
class ConvexTestCase(SimpleTestCase):
    """
    Numeric assertions and a per-test random stream; no database is involved
    """

    def setUp(self):
        self.rng = seeded_stream(1234, 0)

    def assertAllClose(self, actual, expected, atol=1e-12, rtol=0.0, msg=None):
        """Helper method wrapping numpy's tolerance check with a readable failure"""
        np.testing.assert_allclose(np.asarray(actual), np.asarray(expected), atol=atol, rtol=rtol, err_msg=msg or '')


class TempDirTestCase(ConvexTestCase):
    """
    Gives every test its own scratch directory for command outputs
    """

    def setUp(self):
        super().setUp()
        self.tmp = tempfile.mkdtemp(prefix='convex-test-')
        self.addCleanup(shutil.rmtree, self.tmp, ignore_errors=True)
