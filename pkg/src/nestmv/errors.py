"""Exception hierarchy.

Every error raised by the package derives from :class:`NestMVError`. The
``exit_code`` attribute is what the command-line front end returns when the
error escapes a command: 2 usage, 3 I/O or file format, 4 numeric or
precondition, 5 divergence.
"""


class NestMVError(Exception):
    exit_code = 4


class UsageError(NestMVError):
    exit_code = 2


# numeric / precondition (exit 4)

class NonFinite(NestMVError, ValueError):
    pass


class ZeroRow(NestMVError, ValueError):
    pass


class OutOfRange(NestMVError, ValueError):
    pass


class NotIncreasing(NestMVError, ValueError):
    pass


class LastGroupMismatch(NestMVError, ValueError):
    pass


class DimensionMismatch(NestMVError, ValueError):
    pass


class BudgetExceedsVectors(NestMVError, ValueError):
    pass


class EmptyIndex(NestMVError, ValueError):
    pass


class KTooLarge(NestMVError, ValueError):
    pass


class DuplicateDocId(NestMVError, ValueError):
    pass


class InconsistentDimension(NestMVError, ValueError):
    pass


class NonPositiveTemperature(NestMVError, ValueError):
    pass


class TieNearMax(NestMVError, ValueError):
    """A MaxSim maximum is within the tie tolerance of the runner-up.

    Finite differences are not valid across such a point, so the caller
    should resample the configuration.
    """


class UnknownQuery(NestMVError, KeyError):
    pass


class EmptyInput(NestMVError, ValueError):
    pass


class TooFewTokens(NestMVError, ValueError):
    pass


class Divergence(NestMVError, FloatingPointError):
    exit_code = 5


# file formats (exit 3)

class FormatError(NestMVError, ValueError):
    exit_code = 3


class BadMagic(FormatError):
    pass


class VersionUnsupported(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class ChecksumMismatch(FormatError):
    pass
