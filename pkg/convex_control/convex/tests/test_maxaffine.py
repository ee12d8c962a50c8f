# =================================================================
# convex/tests/test_maxaffine.py - Max-affine functions and ICNN constructions
# =================================================================

import numpy as np

from convex.exceptions import EmptyData, InvalidParameter, UnsupportedArchitecture
from convex.icnn import IcnnModel, init_icnn, negative_weights, relu_count
from convex.maxaffine import MaxAffine, compile_to_icnn, deduplicate, enumerate_pieces, fit_cpl, maxaffine_eval
from convex.verification import random_target, theorem1, theorem2

from .base import ConvexTestCase


def abs_single_layer():
    """One hidden layer, zero passthrough: |u| = ReLU(u) + ReLU(−u)."""
    return IcnnModel(
        1,
        weights=[np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[1.0, 1.0]])],
        passthrough=[np.zeros((1, 2))],
        biases=[np.zeros(2), np.zeros(1)],
    )


# EXPLANATION: Test evaluation of max-affine functions
class MaxAffineTestCase(ConvexTestCase):

    def test_evaluate(self):
        m = MaxAffine.from_pieces([([1.0], 0.0), ([-1.0], 0.0)])
        self.assertEqual(maxaffine_eval(m, [3.0]), 3.0)
        self.assertEqual(m.evaluate([-2.0]), 2.0)
        self.assertAllClose(m.evaluate(np.array([[1.5], [-0.5]])), [1.5, 0.5])

    def test_ties_pick_the_first_piece(self):
        m = MaxAffine.from_pieces([([1.0], 0.0), ([-1.0], 0.0)])
        self.assertEqual(m.argmax([0.0]), 0)

    def test_needs_a_piece(self):
        with self.assertRaises(EmptyData):
            MaxAffine.from_pieces([])


# EXPLANATION: Test compiling a max-affine function into an exact ICNN
class CompileTestCase(ConvexTestCase):

    def test_random_function_is_reproduced(self):
        """EXPLANATION: K = 8 pieces in 3 dimensions, compared on 100k points"""
        m = random_target('maxaffine', pieces=8, dim=3, seed=4)
        model = compile_to_icnn(m)
        self.assertEqual(relu_count(model), 7)
        self.assertEqual(negative_weights(model), [])
        report = theorem1(m, samples=100_000, seed=4)
        self.assertTrue(report.passed, report)
        self.assertLessEqual(report.max_violation, 1e-9)

    def test_single_piece_is_affine(self):
        m = MaxAffine.from_pieces([([2.0, -1.0], 0.5)])
        model = compile_to_icnn(m)
        self.assertEqual(model.depth, 1)
        self.assertEqual(relu_count(model), 0)
        x = self.rng.uniform(-3, 3, (50, 2))
        self.assertAllClose(model.forward(x)[:, 0], m.evaluate(x), atol=1e-12)

    def test_two_pieces(self):
        m = MaxAffine.from_pieces([([1.0], 0.0), ([-1.0], 0.0)])
        model = compile_to_icnn(m)
        self.assertEqual(relu_count(model), 1)
        self.assertAllClose(model.forward(np.array([[3.0], [-2.0], [0.0]]))[:, 0], [3.0, 2.0, 0.0])


# EXPLANATION: Test enumerating the affine pieces of a one-hidden-layer ICNN
class EnumerateTestCase(ConvexTestCase):

    def test_abs_pieces(self):
        """EXPLANATION: Piece j turns unit i off when bit i of j is set"""
        m = enumerate_pieces(abs_single_layer())
        self.assertEqual(m.n_pieces, 4)
        self.assertAllClose(m.slopes[:, 0], [0.0, -1.0, 1.0, 0.0])
        self.assertAllClose(m.intercepts, np.zeros(4))
        self.assertAllClose(m.evaluate(np.array([[2.0], [-3.0]])), [2.0, 3.0])

    def test_deduplicate_keeps_first_occurrence(self):
        m = deduplicate(enumerate_pieces(abs_single_layer()))
        self.assertEqual(m.n_pieces, 3)
        self.assertAllClose(m.slopes[:, 0], [0.0, -1.0, 1.0])

    def test_random_network_is_reproduced(self):
        report = theorem2(random_target('icnn', pieces=6, dim=3, seed=2), samples=10_000, seed=2)
        self.assertTrue(report.passed, report)

    def test_deeper_network_is_rejected(self):
        with self.assertRaises(UnsupportedArchitecture):
            enumerate_pieces(init_icnn(2, [3, 3]))

    def test_passthrough_is_rejected(self):
        with self.assertRaises(UnsupportedArchitecture):
            enumerate_pieces(init_icnn(2, [3]))


# EXPLANATION: Test the convex piecewise-linear least-squares fit
class FitTestCase(ConvexTestCase):

    def test_recovers_abs(self):
        x = self.rng.uniform(-2, 2, (200, 1))
        m = fit_cpl(x, np.abs(x[:, 0]), k=2, seed=0)
        self.assertLessEqual(m.n_pieces, 2)
        self.assertLess(float(np.sqrt(np.mean((m.evaluate(x) - np.abs(x[:, 0])) ** 2))), 1e-6)

    def test_single_piece_is_least_squares(self):
        x = self.rng.uniform(-2, 2, (50, 3))
        y = x @ np.array([0.5, -1.0, 2.0]) + 0.25
        m = fit_cpl(x, y, k=1)
        self.assertEqual(m.n_pieces, 1)
        self.assertLess(float(np.sqrt(np.mean((m.evaluate(x) - y) ** 2))), 1e-10)

    def test_more_pieces_fit_a_network_no_worse(self):
        """EXPLANATION: 64 pieces against 4 on a width-8 random ICNN target"""
        target = random_target('icnn', 8, 2, seed=5)
        x = self.rng.uniform(-1, 1, (600, 2))
        y = target.forward(x)[:, 0]

        def fit_rmse(m):
            return float(np.sqrt(np.mean((m.evaluate(x) - y) ** 2)))

        coarse = fit_cpl(x, y, k=4, seed=0)
        fine = fit_cpl(x, y, k=64, seed=0)
        refined = fit_cpl(x, y, k=64, seed=0, warm_start=coarse)
        self.assertLessEqual(fit_rmse(fine), fit_rmse(coarse))
        self.assertLessEqual(fit_rmse(refined), fit_rmse(coarse))

    def test_collapsed_cells_are_reseeded(self):
        """EXPLANATION: An affine target empties all but one cell; re-seeding keeps k pieces alive"""
        x = self.rng.uniform(-1, 1, (60, 1))
        m = fit_cpl(x, 3.0 * x[:, 0] - 1.0, k=3, restarts=1)
        self.assertEqual(m.n_pieces, 3)
        self.assertLess(float(np.sqrt(np.mean((m.evaluate(x) - (3.0 * x[:, 0] - 1.0)) ** 2))), 1e-10)

    def test_warm_start_must_fit_the_budget(self):
        x = self.rng.uniform(-1, 1, (20, 1))
        with self.assertRaises(InvalidParameter):
            fit_cpl(x, np.abs(x[:, 0]), k=1, warm_start=MaxAffine([[1.0], [-1.0]], [0.0, 0.0]))

    def test_more_pieces_than_points(self):
        with self.assertRaises(InvalidParameter):
            fit_cpl(np.zeros((3, 1)), np.zeros(3), k=4)

    def test_empty_data(self):
        with self.assertRaises(EmptyData):
            fit_cpl(np.zeros((0, 1)), np.zeros(0), k=1)

    def test_deterministic(self):
        x = self.rng.uniform(-1, 1, (100, 2))
        y = (x ** 2).sum(axis=1)
        a = fit_cpl(x, y, k=4, seed=3)
        b = fit_cpl(x, y, k=4, seed=3)
        self.assertTrue(np.array_equal(a.slopes, b.slopes))
        self.assertTrue(np.array_equal(a.intercepts, b.intercepts))
