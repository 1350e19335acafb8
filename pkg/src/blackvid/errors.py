"""Exception hierarchy shared across the toolkit, with CLI exit codes."""


class BlackvidError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigError(BlackvidError):
    """Invalid configuration, hyper-parameter, or model/shape wiring."""

    exit_code = 2


class DimensionError(ConfigError):
    """Operands with incompatible shapes."""


class DataError(BlackvidError):
    """Bad or missing input data (manifests, feature files, predictions)."""

    exit_code = 3


class FormatError(DataError):
    """Malformed binary or text file."""


class NumericalError(BlackvidError):
    """Non-finite value encountered during optimization."""

    exit_code = 4
