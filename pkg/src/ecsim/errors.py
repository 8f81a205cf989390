"""Exception types shared across the package."""


class EcsimError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(EcsimError):
    """A physical or numerical parameter is outside its valid range."""


class MeshConsistencyError(EcsimError):
    """Mesh construction produced an inconsistent topology or geometry."""


class SolverError(EcsimError):
    """A linear solve failed (singular matrix, bad residual, ...)."""


class IterationLimitError(SolverError):
    """An iterative solver hit its iteration cap.

    Carries the last relative residual so callers can report how far the
    solve got.
    """

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class StepRejectedError(EcsimError):
    """A time step violated a stability constraint (e.g. CFL > 1)."""


class ConfigError(EcsimError):
    """Bad configuration file or inconsistent run parameters."""


class RunAborted(EcsimError):
    """A simulation aborted mid-run; wraps the original module error."""

    def __init__(self, message, step=None, config_hash=None, checkpoint=None):
        super().__init__(message)
        self.step = step
        self.config_hash = config_hash
        self.checkpoint = checkpoint
