"""Binary columnar event files with cluster-granular, byte-accounted reads."""

from .format import (
    Dtype,
    ColumnSchema,
    ClusterInfo,
    ChunkRef,
    FormatError,
    write_dataset,
)
from .dataset import (
    ColumnBatch,
    DatasetHandle,
    ReadAccount,
    TransportError,
    VectorData,
    open_dataset,
    read_range,
    server_totals,
)
from .server import DataServer, serve

__all__ = [
    "ChunkRef",
    "ClusterInfo",
    "ColumnBatch",
    "ColumnSchema",
    "DataServer",
    "DatasetHandle",
    "Dtype",
    "FormatError",
    "ReadAccount",
    "TransportError",
    "VectorData",
    "open_dataset",
    "read_range",
    "serve",
    "server_totals",
    "write_dataset",
]
