"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for engine failures."""


class EngineClosedError(EngineError):
    """Operation attempted on a closed engine."""


class CorruptionError(EngineError):
    """On-disk state is inconsistent beyond safe recovery."""


class UnreadableFileError(CorruptionError):
    """A table file failed checksum or format verification."""


class IoQueueFullError(EngineError):
    """Too many I/O requests in flight; caller must drain completions."""


class IoBackendBusyError(EngineError):
    """Backend switch attempted while requests are in flight."""
