"""Exception hierarchy shared by every xmodal module.

The CLI maps these onto exit codes (see ``cli.EXIT_CODES``).
"""
from typing import Optional


class XmodalError(Exception):
    """Base class for all errors raised by xmodal."""

    kind = 'error'


class ShapeError(XmodalError, ValueError):
    kind = 'shape'


class ContractError(XmodalError, RuntimeError):
    kind = 'contract'


class ConfigError(XmodalError, ValueError):
    """Invalid configuration or dataset-spec field; ``field`` names the offending key."""

    kind = 'config'

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        if field:
            message = f'{field}: {message}'
        super().__init__(message)


class FormatError(XmodalError, ValueError):
    """A persisted file could not be decoded. ``offset`` is the byte position of the failure."""

    kind = 'format'

    def __init__(self, message: str, offset: Optional[int] = None, path: Optional[str] = None):
        self.offset = offset
        self.path = path
        where = []
        if path:
            where.append(str(path))
        if offset is not None:
            where.append(f'offset {offset}')
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class NumericError(XmodalError, ArithmeticError):
    """A non-finite value appeared in a loss."""

    kind = 'numeric'

    def __init__(self, message: str, epoch: Optional[int] = None, batch: Optional[int] = None, phase: Optional[str] = None):
        self.epoch = epoch
        self.batch = batch
        self.phase = phase
        if epoch is not None:
            message = f'{message} at {phase or "train"} epoch {epoch}, batch {batch}'
        super().__init__(message)
