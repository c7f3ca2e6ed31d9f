"""
Exceptions raised by ttaforge. Everything derives from TTAForgeError so the command line can report package errors
distinctly from programming errors.
"""


class TTAForgeError(Exception):
    pass


class ShapeError(TTAForgeError, ValueError):
    """Array or prompt shapes do not fit the backend."""


class DegenerateBox(TTAForgeError, ValueError):
    """A box has less than one pixel of area inside its image."""


class NonFiniteLoss(TTAForgeError):
    """The student loss evaluated to NaN/Inf; the prompts have diverged."""


class NoMemory(TTAForgeError):
    """The instance memory holds nothing to sample from."""


class ConfigError(TTAForgeError, ValueError):
    def __init__(self, key: str, message: str):
        super(ConfigError, self).__init__(f"{key}: {message}")
        self.key = key


class DatasetError(TTAForgeError):
    def __init__(self, path, message: str, line: int = None, field: str = None):
        where = str(path)
        if line is not None:
            where += f":{line}"
        if field is not None:
            where += f" [{field}]"
        super(DatasetError, self).__init__(f"{where}: {message}")
        self.path = path
        self.line = line
        self.field = field


class ContainerError(TTAForgeError):
    """Malformed binary weight/prompt container."""
