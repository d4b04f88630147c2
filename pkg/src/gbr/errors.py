"""Exception hierarchy; each class carries the CLI exit code for its failure class."""


class GBRError(Exception):
    exit_code = 1
    hint = ""


class ConfigError(GBRError, ValueError):
    exit_code = 2
    hint = "check the config file and command-line flags"


class LoadError(GBRError, OSError):
    exit_code = 3
    hint = "check that the scene directory follows the view_###/ layout"


class NumericalError(GBRError, ArithmeticError):
    exit_code = 4
    hint = "inputs may be degenerate; inspect the stage report"


class EmptyResultError(GBRError):
    exit_code = 5
    hint = "try lowering the confidence thresholds"
