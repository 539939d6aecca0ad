"""Exception hierarchy shared by the library and the CLI.

Every class carries the process exit code the CLI maps it to.
"""
import typing as t


class SoundcutError(Exception):
    exit_code: int = 1


class ValidationError(SoundcutError, ValueError):
    pass


class ConfigError(ValidationError):
    pass


class InputArityError(ValidationError):
    pass


class InvalidCutError(ValidationError):
    """Raised with the name of the violated cut clause: `partition`,
    `inputs-in-S` or `output-in-T`.
    """

    def __init__(self, clause: str, detail: str = ""):
        self.clause = clause
        message = f"invalid cut, violated clause '{clause}'"
        if detail:
            message += f": {detail}"
        super().__init__(message)


class IncompleteExplanationError(ValidationError):
    def __init__(self, missing: t.Iterable[str]):
        self.missing = tuple(sorted(missing))
        super().__init__(
            f"explanation is missing boundary vertices {list(self.missing)}"
        )


class InvalidSelectionError(ValidationError):
    pass


class TreeValidationError(ValidationError):
    pass


class PreconditionError(ValidationError):
    pass


class UndefinedAucError(ValidationError):
    pass


class SplitError(ValidationError):
    pass


class NumericError(SoundcutError, ArithmeticError):
    def __init__(
        self,
        message: str,
        vertex: t.Optional[str] = None,
        path_t: t.Optional[float] = None,
    ):
        self.vertex = vertex
        self.path_t = path_t
        super().__init__(message)


class TrainingError(SoundcutError):
    pass


class StalenessError(SoundcutError):
    pass


class FormatError(SoundcutError):
    exit_code = 2


class ImplementationDefect(SoundcutError, AssertionError):
    pass
