"""Exception hierarchy shared by every module and the CLI."""


class RatError(Exception):
    """Base class; the CLI prints ``<ClassName>: <message>`` on one line."""


class DimensionError(RatError, ValueError):
    pass


class ContractError(RatError, ValueError):
    pass


class ConfigError(RatError, ValueError):
    pass


class FormatError(RatError, ValueError):
    pass


class NumericError(RatError, ArithmeticError):
    pass
