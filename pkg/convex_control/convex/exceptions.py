# =================================================================
# convex/exceptions.py - Error taxonomy for the toolkit
# =================================================================

from django.core.exceptions import ValidationError


# EXPLANATION: Every toolkit error is a ValidationError
# Callers can catch the specific subclass, or ValidationError to catch them
# all; management commands map them onto exit codes.
class ConvexControlError(ValidationError):
    default_code = 'invalid'

    def __init__(self, message, code=None, params=None):
        super().__init__(message, code=code or self.default_code, params=params)

    def __str__(self):
        return '; '.join(self.messages)


class DimensionMismatch(ConvexControlError):
    default_code = 'dimension_mismatch'


class NonFiniteValue(ConvexControlError):
    default_code = 'non_finite'


class EmptyData(ConvexControlError):
    default_code = 'empty'


class InvalidParameter(ConvexControlError):
    default_code = 'invalid_parameter'


# EXPLANATION: Raised when an operation only applies to one network form
# (e.g. piece enumeration needs one hidden layer and zero passthrough).
class UnsupportedArchitecture(ConvexControlError):
    default_code = 'unsupported_architecture'


class InfeasibleProblem(ConvexControlError):
    default_code = 'infeasible'


class SolverDivergence(ConvexControlError):
    default_code = 'divergence'


class SingularRegression(ConvexControlError):
    default_code = 'singular'


class ArtifactError(ConvexControlError):
    default_code = 'artifact'


class RolloutError(ConvexControlError):
    default_code = 'rollout'

    def __init__(self, message, index, code=None):
        self.index = index
        super().__init__(f'rollout {index}: {message}', code=code)
