"""Federated round protocol, transports and training loops."""
from .runtime import (
    ClientState,
    DPConfig,
    RoundError,
    Server,
    TrainingConfig,
    client_hidden_estimate,
    run_baseline,
    run_round,
    run_training,
    server_aggregate_hidden,
)
from .transport import InProcTransport, SocketTransport, TransportError, make_transport
from .wire import FrameError, MessageKind, RoundMessage, decode_message, encode_message

__all__ = [
    "ClientState", "DPConfig", "RoundError", "Server", "TrainingConfig",
    "client_hidden_estimate", "run_baseline", "run_round", "run_training",
    "server_aggregate_hidden", "InProcTransport", "SocketTransport", "TransportError",
    "make_transport", "FrameError", "MessageKind", "RoundMessage", "decode_message",
    "encode_message",
]
