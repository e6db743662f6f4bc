class AdqSimError(Exception):
    """Base class for every error raised by adqsim."""


class ContractViolation(AdqSimError, ValueError):
    """An argument broke an operation's precondition."""


class InvalidGeometryError(ContractViolation):
    pass


class DegenerateGeometryError(ContractViolation):
    pass


class MalformedTraceError(ContractViolation):
    pass


class ConfigurationError(AdqSimError, ValueError):
    pass


class SolverInstabilityError(AdqSimError, RuntimeError):
    """The position solver produced non-finite coordinates."""

    def __init__(self, substep, message=None):
        self.substep = substep
        super().__init__(message or f"solver diverged at substep {substep}")


class EpisodeInitError(AdqSimError, RuntimeError):
    pass


class UndefinedTestError(AdqSimError, ValueError):
    pass


class TrainingAborted(AdqSimError, RuntimeError):
    pass
