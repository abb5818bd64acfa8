"""Exception hierarchy shared by the solver modules and the CLI."""


class SwitchLQError(Exception):
    """Base class for all library errors."""


class ConfigError(SwitchLQError):
    """Malformed input data (maps to CLI exit code 1)."""


class GeneratorError(ConfigError):
    pass


class NonSquare(GeneratorError):
    pass


class RowSumViolation(GeneratorError):
    pass


class NegativeRate(GeneratorError):
    pass


class DimensionMismatch(ConfigError):
    pass


class SolverInfeasible(SwitchLQError):
    """A solver could not produce an admissible answer (CLI exit code 2)."""


class GainSingular(SolverInfeasible):
    pass


class NotStabilizable(SolverInfeasible):
    pass


class NotStabilizing(SolverInfeasible):
    pass


class Stalled(SolverInfeasible):
    pass


class SingularOperator(SolverInfeasible):
    pass


class EigenFailure(SolverInfeasible):
    pass


class StepRejected(SolverInfeasible):
    pass


class GridTooCoarse(SolverInfeasible):
    pass


class BlowUp(SolverInfeasible):
    pass


class ZeroRateWarning(UserWarning):
    """An off-diagonal generator rate is exactly zero."""
