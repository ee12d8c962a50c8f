# =================================================================
# convex/tests/test_icnn.py - Input-convex feedforward networks
# =================================================================

import numpy as np
from django.test import tag

from convex.exceptions import DimensionMismatch, EmptyData
from convex.icnn import (
    IcnnModel, TrainingConfig, classification_accuracy, classify_circles, expand, icnn_forward, icnn_grad_input,
    icnn_grad_params, init_icnn, mse_loss_and_grads, negative_weights, project_nonnegative, relu_count, rmse,
    train_icnn,
)
from convex.numeric import finite_difference_gradient, relative_error, seeded_stream
from convex.plants import circles_dataset
from convex.verification import convexity

from .base import ConvexTestCase, abs_model


def random_model(input_dim=3, widths=(8, 8), state_dim=0, seed=0):
    model = init_icnn(input_dim, widths, 1, state_dim, seeded_stream(seed, 0))
    rng = seeded_stream(seed, 1)
    for b in model.biases:
        b[:] = rng.gaussian(0.0, 0.5, b.shape)
    return model


def zero_model(input_dim=2, widths=(4,)):
    model = init_icnn(input_dim, widths)
    for value in model.params().values():
        value[...] = 0.0
    return model


# EXPLANATION: Test the forward pass
class ForwardTestCase(ConvexTestCase):

    def test_hand_built_abs(self):
        """EXPLANATION: |u| = v + 2 ReLU(u) evaluates to 3 at u=3 and 2 at u=-2"""
        model = abs_model()
        self.assertAllClose(icnn_forward(model, [3.0]), [3.0])
        self.assertAllClose(icnn_forward(model, np.array([[3.0], [-2.0]]))[:, 0], [3.0, 2.0])
        self.assertEqual(relu_count(model), 1)

    def test_zero_model_outputs_zero(self):
        model = zero_model()
        self.assertAllClose(model.forward(self.rng.uniform(-5, 5, (20, 2))), np.zeros((20, 1)))

    def test_expanded_input(self):
        self.assertAllClose(expand(np.array([1.0, 2.0, -3.0]), state_dim=1), [1.0, 2.0, -3.0, -2.0, 3.0])

    def test_wrong_input_width(self):
        with self.assertRaises(DimensionMismatch):
            abs_model().forward([1.0, 2.0])

    def test_random_model_is_midpoint_convex(self):
        report = convexity(random_model(), samples=10_000, seed=3)
        self.assertTrue(report.passed, report)
        self.assertLessEqual(report.max_violation, 1e-8)

    def test_monotone_in_state_block(self):
        """EXPLANATION: Raising a state input never lowers the output"""
        model = random_model(input_dim=2, state_dim=2)
        x = self.rng.uniform(-2, 2, (500, 4))
        bumped = x.copy()
        bumped[:, :2] += self.rng.uniform(0, 1, (500, 2))
        self.assertTrue(np.all(model.forward(bumped) >= model.forward(x) - 1e-12))


# EXPLANATION: Test input and parameter gradients
class GradientTestCase(ConvexTestCase):

    def test_abs_gradient(self):
        model = abs_model()
        self.assertAllClose(icnn_grad_input(model, [3.0]), [1.0])
        self.assertAllClose(icnn_grad_input(model, [-2.0]), [-1.0])

    def test_zero_model_gradient(self):
        self.assertAllClose(icnn_grad_input(zero_model(), [0.3, -0.7]), [0.0, 0.0])

    def test_input_gradient_matches_finite_differences(self):
        model = random_model(state_dim=1)
        for _ in range(20):
            x = self.rng.uniform(-2, 2, model.raw_dim)
            fd = finite_difference_gradient(lambda z: float(model.forward(z)[0]), x, relative=True)
            self.assertLess(relative_error(model.grad_input(x), fd, floor=1e-6), 1e-4)

    def test_parameter_gradients_match_finite_differences(self):
        """EXPLANATION: 2-layer width-4 model, every parameter entry against central differences"""
        model = random_model(input_dim=2, widths=(4, 4))
        inputs = self.rng.uniform(-2, 2, (6, 2))
        targets = self.rng.gaussian(0, 1, (6, 1))
        grads = icnn_grad_params(model, inputs, targets)
        for name, value in model.params().items():
            def loss(v, value=value):
                original = value.copy()
                value[...] = v
                out = mse_loss_and_grads(model, inputs, targets)[0]
                value[...] = original
                return out
            fd = finite_difference_gradient(loss, value.copy())
            self.assertLess(relative_error(grads[name], fd, floor=1e-6), 1e-4, name)

    def test_zero_model_zero_target_has_zero_gradients(self):
        grads = icnn_grad_params(zero_model(), np.array([[0.5, -0.5]]), np.zeros((1, 1)))
        for name, g in grads.items():
            self.assertAllClose(g, np.zeros_like(g), msg=name)

    def test_duplicated_sample_gives_same_gradient(self):
        """EXPLANATION: The loss is a mean, so repeating the batch does not change it"""
        model = random_model()
        x = self.rng.uniform(-1, 1, (1, 3))
        t = np.array([[0.3]])
        once = icnn_grad_params(model, x, t)
        twice = icnn_grad_params(model, np.vstack([x, x]), np.vstack([t, t]))
        for name in once:
            self.assertAllClose(twice[name], once[name], atol=1e-14, rtol=1e-12, msg=name)


# EXPLANATION: Test the nonnegativity projection
class ProjectionTestCase(ConvexTestCase):

    def test_negative_weight_is_clamped(self):
        model = abs_model()
        model.weights[1][0, 0] = -0.5
        self.assertEqual(negative_weights(model), [('W2', (0, 0), -0.5)])
        projected = project_nonnegative(model)
        self.assertEqual(projected.weights[1][0, 0], 0.0)
        self.assertEqual(negative_weights(projected), [])

    def test_projection_is_idempotent(self):
        model = random_model()
        once = project_nonnegative(model)
        twice = project_nonnegative(once)
        for name, value in once.params().items():
            self.assertTrue(np.array_equal(value, model.params()[name]))
            self.assertTrue(np.array_equal(twice.params()[name], value))

    def test_biases_are_not_projected(self):
        model = abs_model()
        model.biases[0][0] = -1.0
        self.assertEqual(project_nonnegative(model).biases[0][0], -1.0)


# EXPLANATION: Test training against analytic targets
class TrainingTestCase(ConvexTestCase):

    def test_training_keeps_weights_nonnegative(self):
        x = self.rng.uniform(-2, 2, (200, 2))
        y = -np.abs(x).sum(axis=1)
        model, history = train_icnn(x, y, TrainingConfig(widths=(8,), epochs=20, lr=0.05, batch_size=50))
        self.assertEqual(negative_weights(model), [])
        self.assertEqual(len(history), 20)

    def test_training_is_deterministic(self):
        x = self.rng.uniform(-2, 2, (100, 1))
        config = TrainingConfig(widths=(4,), epochs=5, batch_size=16, seed=9)
        a, _ = train_icnn(x, np.abs(x), config)
        b, _ = train_icnn(x, np.abs(x), config)
        for name, value in a.params().items():
            self.assertTrue(np.array_equal(value, b.params()[name]))

    @tag('slow')
    def test_fits_abs(self):
        x = self.rng.uniform(-2, 2, (2000, 1))
        model, _ = train_icnn(x, np.abs(x), TrainingConfig(widths=(16,), epochs=200, lr=0.01, batch_size=100))
        self.assertLess(rmse(model, x, np.abs(x)), 0.02)

    @tag('slow')
    def test_fits_max_of_three_planes(self):
        x = self.rng.uniform(-2, 2, (2000, 2))
        y = np.maximum.reduce([x[:, 0] + x[:, 1], -x[:, 0], 0.5 * x[:, 1] - 1.0])
        model, _ = train_icnn(x, y, TrainingConfig(widths=(32,), epochs=500, lr=0.01, batch_size=100))
        self.assertLess(rmse(model, x, y), 0.05)

    @tag('slow')
    def test_fits_constant_zero(self):
        """EXPLANATION: Projection drives the passthrough to exactly zero, leaving the bias to fit 0"""
        x = self.rng.uniform(-2, 2, (500, 2))
        model, _ = train_icnn(x, np.zeros(500), TrainingConfig(widths=(8,), epochs=400, lr=0.005, batch_size=100))
        self.assertLess(rmse(model, x, np.zeros(500)), 1e-3)

    def test_trained_model_passes_convexity_on_many_pairs(self):
        x = self.rng.uniform(-2, 2, (300, 2))
        y = np.abs(x[:, 0]) + np.maximum(x[:, 1], 0.0)
        model, _ = train_icnn(x, y, TrainingConfig(widths=(8, 8), epochs=20, lr=0.01, batch_size=50))
        report = convexity(model, samples=100_000, seed=11)
        self.assertTrue(report.passed, report)
        self.assertLess(report.max_violation, 1e-8)

    def test_empty_batch(self):
        model = random_model(input_dim=2)
        for inputs, targets in ((np.zeros((0, 2)), np.zeros((0, 1))), (np.zeros(0), np.zeros(0))):
            with self.assertRaises(EmptyData):
                mse_loss_and_grads(model, inputs, targets)
        with self.assertRaises(EmptyData):
            train_icnn(np.zeros((0, 2)), np.zeros(0), TrainingConfig(epochs=1))

    @tag('slow')
    def test_circles_classifier(self):
        points, labels = circles_dataset(100, seed=0)
        config = TrainingConfig(widths=(200, 200), epochs=1000, lr=1e-3, batch_size=100)
        model, _ = classify_circles(points, labels, config)
        self.assertGreaterEqual(classification_accuracy(model, points, labels), 0.95)
        self.assertIsInstance(model, IcnnModel)
