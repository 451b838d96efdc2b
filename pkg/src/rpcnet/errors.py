"""Exception hierarchy shared by every rpcnet module.

The CLI maps :class:`InputError` subclasses to exit code 1 and
:class:`NumericalError` subclasses to exit code 2.
"""


class RpcNetError(Exception):
    pass


class InputError(RpcNetError, ValueError):
    """Bad input data or arguments."""


class ContractError(InputError):
    """A caller broke a shape or count contract."""


class ConfigError(InputError):
    pass


class DegeneratePoseError(InputError):
    """Not enough non-collinear palm markers to fix the wrist rotation."""


class InputTooShortError(InputError):
    pass


class AlignmentError(InputError):
    """EMG and marker streams do not cover the same time span."""


class ContainerError(InputError):
    pass


class CorruptContainerError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


class ChannelCountError(ContainerError):
    pass


class DurationMismatchError(ContainerError):
    pass


class NumericalError(RpcNetError, ArithmeticError):
    pass


class TrainingDivergedError(NumericalError):
    pass


class UndefinedStatisticError(NumericalError):
    """A statistic is undefined for the given data (zero variance, no usable pairs)."""


class DataQualityWarning(UserWarning):
    pass
