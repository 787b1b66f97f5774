"""Exception hierarchy shared by the workbench.

Each class maps onto one CLI exit code so the command layer can translate
failures without inspecting messages.
"""


class HoneyModelError(Exception):
    exit_code = 3


class ShapeError(HoneyModelError, ValueError):
    exit_code = 2


class InputError(HoneyModelError, ValueError):
    exit_code = 2


class FormatError(HoneyModelError, ValueError):
    """Malformed file; ``offset`` is the byte position where parsing failed."""

    exit_code = 2

    def __init__(self, message, offset=None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.offset = offset
        self.path = path


class ConfigError(HoneyModelError, ValueError):
    exit_code = 1


class UndefinedSimilarityError(HoneyModelError, ArithmeticError):
    exit_code = 2
