"""Exception hierarchy shared by the library and the command line."""


class SnnQuantError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class ConfigurationError(SnnQuantError, ValueError):
    """Shapes, formats or config fields that do not fit together."""

    exit_code = 2


class InputError(SnnQuantError, ValueError):
    """A caller-supplied value is outside its documented domain."""

    exit_code = 2


class DataError(SnnQuantError, ValueError):
    exit_code = 3


class FormatError(DataError):
    """Malformed SEVT container (bad magic, version or truncated body)."""


class NumericalError(SnnQuantError, ArithmeticError):
    exit_code = 4


class StateCorruptionError(NumericalError):
    """Non-finite neuron state met during a simulation step."""


class InfeasibleBudgetError(SnnQuantError):
    exit_code = 5
