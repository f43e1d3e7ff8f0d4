"""Exception hierarchy shared by every module."""


class IQTError(Exception):
    pass


class ShapeError(IQTError, ValueError):
    pass


class ContractError(IQTError, ValueError):
    pass


class ConfigError(IQTError, ValueError):
    pass


class MetricError(IQTError, ValueError):
    pass


class FormatError(IQTError, ValueError):
    """Malformed on-disk data. ``offset`` is the byte offset (or line number) of the fault."""

    def __init__(self, message, offset=None, path=None, unit="byte offset"):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"{unit} {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
