class SlscanError(Exception):
    """Base class for every error raised by slscan. `code` is stable and is what the command line reports."""
    code = 'error'


class _InputError(SlscanError, ValueError):
    code = 'invalid-input'


class _NumericalError(SlscanError, RuntimeError):
    code = 'numerical-failure'


# geometry

class BehindCamera(_InputError):
    code = 'behind-camera'


class NoConvergence(_NumericalError):
    code = 'no-convergence'


# codec

class OutOfRange(_InputError):
    code = 'out-of-range'


class MalformedCode(_InputError):
    code = 'malformed-code'


class ClippingError(_InputError):
    code = 'clipping'


class StackMismatch(_InputError):
    code = 'stack-mismatch'


# calibration

class Degenerate(_NumericalError):
    code = 'degenerate'


class DegenerateMotion(_NumericalError):
    code = 'degenerate-motion'


class NoImprovement(SlscanError, UserWarning):
    code = 'no-improvement'


class InsufficientSupport(_NumericalError):
    code = 'insufficient-support'

    def __init__(self, corner_index, support):
        super(InsufficientSupport, self).__init__("Corner {} has only {} valid decoded pixels in its window."
                                                  .format(corner_index, support))
        self.corner_index = corner_index
        self.support = support


class InconsistentViews(_NumericalError):
    code = 'inconsistent-views'


# triangulation

class DegenerateRays(_NumericalError):
    code = 'degenerate-rays'


class CheiralityWarning(SlscanError, UserWarning):
    code = 'cheirality'


class MissingAxis(_InputError):
    code = 'missing-axis'


# registration

class DegenerateConfiguration(_NumericalError):
    code = 'degenerate-configuration'


class TooFewPoints(_InputError):
    code = 'too-few-points'


class MissingNormals(_InputError):
    code = 'missing-normals'


class MissingProvenance(_InputError):
    code = 'missing-provenance'


class MissingRig(_InputError):
    code = 'missing-rig'


class EmptyPairs(_InputError):
    code = 'empty-pairs'


class NoCorrespondences(_NumericalError):
    code = 'no-correspondences'

    def __init__(self, iteration):
        super(NoCorrespondences, self).__init__("ICP found no correspondences at iteration {}.".format(iteration))
        self.iteration = iteration


class StepFailed(_NumericalError):
    code = 'step-failed'

    def __init__(self, index, cause):
        super(StepFailed, self).__init__("Registration of cloud {} onto cloud {} failed: {}"
                                         .format(index + 1, index, cause))
        self.index = index
        self.cause = cause


# io

class MalformedHeader(_InputError):
    code = 'malformed-header'


class TruncatedBody(_InputError):
    code = 'truncated-body'


class UnsupportedMaxval(_InputError):
    code = 'unsupported-maxval'


class CountMismatch(_InputError):
    code = 'count-mismatch'


class SchemaViolation(_InputError):
    code = 'schema-violation'

    def __init__(self, path, message):
        super(SchemaViolation, self).__init__("{}: {}".format(path, message))
        self.path = path
