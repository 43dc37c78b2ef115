"""Exception types raised across the package."""


class FCNError(Exception):
    """Base class for every error raised by fcnlab."""


class ShapeError(FCNError, ValueError):
    pass


class InvalidParameterError(FCNError, ValueError):
    pass


class InvalidLabelError(FCNError, ValueError):
    pass


class AlignmentError(FCNError, ValueError):
    """Two streams cannot be brought into exact pixel-center alignment."""


class StateError(FCNError, RuntimeError):
    pass


class GraphError(FCNError, ValueError):
    """Malformed graph, or a failure inside a named node."""

    def __init__(self, message, node=None):
        super().__init__(message if node is None else f"node {node!r}: {message}")
        self.node = node


class ParseError(FCNError, ValueError):
    def __init__(self, message, offset=None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        prefix = (", ".join(where) + ": ") if where else ""
        super().__init__(prefix + message)
        self.offset = offset
        self.path = path


class GenerationError(FCNError, RuntimeError):
    pass


class DivergenceError(FCNError, RuntimeError):
    pass


class CalibrationError(FCNError, ValueError):
    pass


class UndefinedMetricError(FCNError, ValueError):
    pass
