from rest_framework import serializers
import numpy as np

from .exceptions import ConvexControlError
from .icnn import IcnnModel, relu_count
from .icrnn import IcrnnModel
from .maxaffine import MaxAffine
from .sysid import NormalizationSpec


# EXPLANATION: Arrays travel as nested lists of floats
# json writes Python floats with their shortest round-trip repr, so a
# dump/load cycle reproduces every weight bit for bit.
class ArrayField(serializers.Field):
    default_error_messages = {
        'not_numeric': 'Expected a nested list of numbers.',
        'ndim': 'Expected a {ndim}-dimensional array, got {got} dimensions.',
        'non_finite': 'Arrays must not contain NaN or infinity.',
    }

    def __init__(self, ndim=None, **kwargs):
        self.ndim = ndim
        super().__init__(**kwargs)

    def to_representation(self, value):
        return np.asarray(value, dtype=np.float64).tolist()

    def to_internal_value(self, data):
        try:
            arr = np.asarray(data, dtype=np.float64)
        except (TypeError, ValueError):
            self.fail('not_numeric')
        if self.ndim is not None and arr.ndim != self.ndim:
            self.fail('ndim', ndim=self.ndim, got=arr.ndim)
        if not np.all(np.isfinite(arr)):
            self.fail('non_finite')
        return arr


class NormalizationSerializer(serializers.Serializer):
    input_low = ArrayField(ndim=1)
    input_high = ArrayField(ndim=1)
    output_low = ArrayField(ndim=1)
    output_high = ArrayField(ndim=1)

    def validate(self, attrs):
        try:
            attrs['spec'] = NormalizationSpec(**attrs)
        except ConvexControlError as exc:
            raise serializers.ValidationError(exc.messages)
        return attrs


def _with_normalization(data, normalization):
    if normalization is not None:
        data['normalization'] = NormalizationSerializer(normalization).data
    return data


class IcnnSerializer(serializers.Serializer):
    type = serializers.ChoiceField(choices=['icnn'], source='kind')
    d = serializers.IntegerField(source='input_dim', min_value=1)
    state_dim = serializers.IntegerField(min_value=0, default=0)
    widths = serializers.ListField(child=serializers.IntegerField(min_value=1))
    W = serializers.ListField(child=ArrayField(ndim=2), source='weights', allow_empty=False)
    D = serializers.ListField(child=ArrayField(ndim=2), source='passthrough')
    b = serializers.ListField(child=ArrayField(ndim=1), source='biases', allow_empty=False)
    normalization = NormalizationSerializer(required=False, allow_null=True, write_only=True)
    relu_count = serializers.SerializerMethodField()

    def get_relu_count(self, obj):
        return relu_count(obj)

    def to_representation(self, instance):
        return _with_normalization(super().to_representation(instance), instance.normalization)

    def validate(self, attrs):
        if list(attrs['widths']) != [w.shape[0] for w in attrs['weights'][:-1]]:
            raise serializers.ValidationError('widths do not match the layer weights')
        norm = attrs.pop('normalization', None)
        try:
            attrs['model'] = IcnnModel(
                attrs['input_dim'], attrs['weights'], attrs['passthrough'], attrs['biases'],
                state_dim=attrs['state_dim'], normalization=norm['spec'] if norm else None,
            )
        except ConvexControlError as exc:
            raise serializers.ValidationError(exc.messages)
        return attrs


class IcrnnDimsSerializer(serializers.Serializer):
    state_dim = serializers.IntegerField(min_value=0)
    action_dim = serializers.IntegerField(read_only=True)
    hidden = serializers.IntegerField(source='hidden_dim', read_only=True)
    output = serializers.IntegerField(source='output_dim', read_only=True)


class IcrnnBiasSerializer(serializers.Serializer):
    hidden = ArrayField(ndim=1, source='b_h')
    output = ArrayField(ndim=1, source='b_y')


class IcrnnSerializer(serializers.Serializer):
    type = serializers.ChoiceField(choices=['icrnn'], source='kind')
    dims = IcrnnDimsSerializer(source='*')
    U = ArrayField(ndim=2)
    W = ArrayField(ndim=2)
    V = ArrayField(ndim=2)
    D1 = ArrayField(ndim=2)
    D2 = ArrayField(ndim=2)
    D3 = ArrayField(ndim=2)
    biases = IcrnnBiasSerializer(source='*')
    n_w = serializers.IntegerField(source='window', min_value=0)
    normalization = NormalizationSerializer(required=False, allow_null=True, write_only=True)

    def to_representation(self, instance):
        return _with_normalization(super().to_representation(instance), instance.normalization)

    def validate(self, attrs):
        norm = attrs.pop('normalization', None)
        try:
            attrs['model'] = IcrnnModel(
                U=attrs['U'], W=attrs['W'], V=attrs['V'], D1=attrs['D1'], D2=attrs['D2'], D3=attrs['D3'],
                b_h=attrs['b_h'], b_y=attrs['b_y'], state_dim=attrs['state_dim'], window=attrs['window'],
                normalization=norm['spec'] if norm else None,
            )
        except ConvexControlError as exc:
            raise serializers.ValidationError(exc.messages)
        return attrs


class PiecesField(serializers.Field):
    """``[[a...], b]`` per piece, read from and written to a MaxAffine's slopes and intercepts."""

    def to_representation(self, value):
        return [[a.tolist(), float(b)] for a, b in zip(value.slopes, value.intercepts)]

    def to_internal_value(self, data):
        if not isinstance(data, list) or not data:
            raise serializers.ValidationError('pieces must be a nonempty list of [slope, intercept] pairs')
        try:
            slopes = np.asarray([piece[0] for piece in data], dtype=np.float64)
            intercepts = np.asarray([piece[1] for piece in data], dtype=np.float64)
        except (TypeError, ValueError, IndexError):
            raise serializers.ValidationError('each piece must be [[a_1, ..., a_d], b]')
        if slopes.ndim != 2 or not np.all(np.isfinite(slopes)) or not np.all(np.isfinite(intercepts)):
            raise serializers.ValidationError('piece coefficients must be finite with one slope per input')
        return {'slopes': slopes, 'intercepts': intercepts}


class MaxAffineSerializer(serializers.Serializer):
    type = serializers.ChoiceField(choices=['maxaffine'], source='kind')
    d = serializers.IntegerField(source='input_dim', min_value=1)
    pieces = PiecesField(source='*')

    def validate(self, attrs):
        if attrs['slopes'].shape[1] != attrs['input_dim']:
            raise serializers.ValidationError(f"pieces have {attrs['slopes'].shape[1]} slopes, d is {attrs['input_dim']}")
        attrs['model'] = MaxAffine(attrs['slopes'], attrs['intercepts'])
        return attrs


class RunManifestSerializer(serializers.Serializer):
    command = serializers.CharField()
    config = serializers.JSONField()
    seed = serializers.IntegerField()
    version = serializers.CharField()
    inputs = serializers.ListField(child=serializers.CharField(), default=list)
    outputs = serializers.ListField(child=serializers.CharField(), default=list)
    wall_clock = serializers.FloatField(min_value=0.0)


class NegativeWeightSerializer(serializers.Serializer):
    name = serializers.CharField()
    index = serializers.ListField(child=serializers.IntegerField())
    value = serializers.FloatField()


class VerificationReportSerializer(serializers.Serializer):
    suite = serializers.CharField()
    passed = serializers.BooleanField()
    max_violation = serializers.FloatField()
    samples = serializers.IntegerField()
    offending = serializers.JSONField(allow_null=True)
    negative_weights = NegativeWeightSerializer(many=True)
    details = serializers.JSONField()


MODEL_SERIALIZERS = {
    'icnn': IcnnSerializer,
    'icrnn': IcrnnSerializer,
    'maxaffine': MaxAffineSerializer,
}


def dump_model(model) -> dict:
    return MODEL_SERIALIZERS[model.kind](model).data


def load_model(data):
    """Validate a model document and build the model it describes."""
    if not isinstance(data, dict) or data.get('type') not in MODEL_SERIALIZERS:
        raise serializers.ValidationError({'type': [f'expected one of {sorted(MODEL_SERIALIZERS)}']})
    serializer = MODEL_SERIALIZERS[data['type']](data=data)
    serializer.is_valid(raise_exception=True)
    return serializer.validated_data['model']
