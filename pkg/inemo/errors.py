"""Error hierarchy. Each error carries the exit code the CLI maps it to."""


class InemoError(Exception):
    exit_code = 1


class InvalidArgumentError(InemoError, ValueError):
    pass


class EmptyRenderError(InemoError):
    pass


class AlreadyAllocatedError(InemoError):
    pass


class AllocationError(InemoError):
    pass


class NotFoundError(InemoError, LookupError):
    exit_code = 2


class NoClassesError(InemoError):
    pass


class GenerationError(InemoError):
    pass


class FrozenExtractorError(InemoError, TypeError):
    pass


class TrainingDivergedError(InemoError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


class CheckpointMismatchError(InemoError):
    exit_code = 4
