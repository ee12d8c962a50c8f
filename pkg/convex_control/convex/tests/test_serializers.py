# =================================================================
# convex/tests/test_serializers.py - Model documents
# =================================================================

import json
from dataclasses import asdict

import numpy as np
from rest_framework.exceptions import ValidationError

from convex.icnn import init_icnn
from convex.icrnn import init_icrnn
from convex.maxaffine import MaxAffine
from convex.serializers import (
    IcnnSerializer, MaxAffineSerializer, VerificationReportSerializer, dump_model, load_model,
)
from convex.sysid import NormalizationSpec
from convex.verification import convexity

from .base import ConvexTestCase, abs_model


def same_parameters(a, b):
    return all(np.array_equal(value, b.params()[name]) for name, value in a.params().items())


# EXPLANATION: Test the ICNN document
class IcnnDocumentTestCase(ConvexTestCase):

    def test_abs_document(self):
        """EXPLANATION: Field names and nesting as written to model.json"""
        data = dump_model(abs_model())
        self.assertEqual(data['type'], 'icnn')
        self.assertEqual(data['d'], 1)
        self.assertEqual(data['widths'], [1])
        self.assertEqual(data['W'], [[[1.0, 0.0]], [[2.0]]])
        self.assertEqual(data['D'], [[[0.0, 1.0]]])
        self.assertEqual(data['relu_count'], 1)
        self.assertNotIn('normalization', data)

    def test_reload_is_bit_exact(self):
        model = init_icnn(3, [5, 4], 2, 1, self.rng)
        model.normalization = NormalizationSpec.fit(self.rng.uniform(-3, 3, (20, 4)), self.rng.uniform(0, 1, (20, 2)))
        text = json.dumps(dump_model(model), sort_keys=True)
        loaded = load_model(json.loads(text))
        self.assertTrue(same_parameters(model, loaded))
        self.assertTrue(np.array_equal(loaded.normalization.input_high, model.normalization.input_high))
        self.assertEqual(json.dumps(dump_model(loaded), sort_keys=True), text)

    def test_widths_must_match_weights(self):
        data = dump_model(abs_model())
        data['widths'] = [2]
        serializer = IcnnSerializer(data=data)
        self.assertFalse(serializer.is_valid())

    def test_shape_errors_become_validation_errors(self):
        data = dump_model(abs_model())
        data['D'] = [[[0.0, 1.0, 2.0]]]
        with self.assertRaises(ValidationError):
            load_model(data)

    def test_non_finite_weights(self):
        data = dump_model(abs_model())
        data['b'] = [[float('nan')], [0.0]]
        with self.assertRaises(ValidationError):
            load_model(data)

    def test_negative_weights_load_but_fail_the_audit(self):
        """EXPLANATION: A corrupted file still loads; the convexity suite reports it"""
        data = dump_model(abs_model())
        data['W'][1] = [[-2.0]]
        report = convexity(load_model(data), samples=1000)
        self.assertFalse(report.passed)
        self.assertEqual(report.negative_weights[0]['name'], 'W2')


# EXPLANATION: Test the ICRNN and max-affine documents
class OtherDocumentTestCase(ConvexTestCase):

    def test_icrnn_reload(self):
        model = init_icrnn(2, 1, 4, 1, window=5, rng=self.rng)
        data = dump_model(model)
        self.assertEqual(data['type'], 'icrnn')
        self.assertEqual(data['n_w'], 5)
        self.assertEqual(data['dims'], {'state_dim': 2, 'action_dim': 1, 'hidden': 4, 'output': 1})
        loaded = load_model(json.loads(json.dumps(data)))
        self.assertTrue(same_parameters(model, loaded))
        self.assertEqual(loaded.window, 5)

    def test_maxaffine_document(self):
        data = {'type': 'maxaffine', 'd': 1, 'pieces': [[[1.0], 0.0], [[-1.0], 0.5]]}
        m = load_model(data)
        self.assertIsInstance(m, MaxAffine)
        self.assertEqual(m.evaluate([-1.0]), 1.5)
        self.assertEqual(dump_model(m), data)

    def test_maxaffine_dimension_must_match(self):
        serializer = MaxAffineSerializer(data={'type': 'maxaffine', 'd': 2, 'pieces': [[[1.0], 0.0]]})
        self.assertFalse(serializer.is_valid())

    def test_unknown_type(self):
        with self.assertRaises(ValidationError):
            load_model({'type': 'lstm'})
        with self.assertRaises(ValidationError):
            load_model([1, 2, 3])

    def test_report_document(self):
        report = convexity(abs_model(), samples=100)
        data = VerificationReportSerializer(asdict(report)).data
        self.assertTrue(data['passed'])
        self.assertEqual(data['negative_weights'], [])
