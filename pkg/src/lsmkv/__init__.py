"""lsmkv: an embeddable LSM-tree key-value store whose compactions submit
file writes and fsyncs asynchronously, tracking generation dependencies so
deferred durability never risks compacted data."""

from .engine import Engine, open_engine
from .errors import (
    CorruptionError,
    EngineClosedError,
    EngineError,
    IoQueueFullError,
    UnreadableFileError,
)
from .model import EngineConfig

__all__ = [
    "Engine",
    "EngineConfig",
    "open_engine",
    "EngineError",
    "EngineClosedError",
    "CorruptionError",
    "UnreadableFileError",
    "IoQueueFullError",
]

__version__ = "0.1.0"
