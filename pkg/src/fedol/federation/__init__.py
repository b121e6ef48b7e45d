"""Client/coordinator realization of the federated rounds."""

from .client import FederatedClient, checkpoint_path
from .coordinator import (
    ClientFailure,
    Coordinator,
    FeedError,
    Method,
    RemotePool,
    StragglerError,
    fit_summary_bytes,
    make_clients,
    run_stream,
)
from .messages import PROTOCOL_VERSION, HandshakeError, ProtocolError
from .transport import Transport, TransportKind

__all__ = [
    "PROTOCOL_VERSION",
    "ClientFailure",
    "Coordinator",
    "FederatedClient",
    "FeedError",
    "HandshakeError",
    "Method",
    "ProtocolError",
    "RemotePool",
    "StragglerError",
    "Transport",
    "TransportKind",
    "checkpoint_path",
    "fit_summary_bytes",
    "make_clients",
    "run_stream",
]
