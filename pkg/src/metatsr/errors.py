"""Exception hierarchy; the CLI maps each family to an exit code."""


class MetaTSRError(Exception):
    exit_code = 1


class ConfigError(MetaTSRError, ValueError):
    exit_code = 1


class DataError(MetaTSRError, ValueError):
    exit_code = 2


class NumericalError(MetaTSRError, ArithmeticError):
    exit_code = 3
