"""Wire protocol, simulated links, client channels and the step server."""

from .codec import Message, MessageType, ProtocolError, StepRequest, StepResult, TaskKind, decode, encode
from .simnet import ETHERNET, WIFI, NetworkProfile, SimulatedLink, get_profile, simulated_send

__all__ = [
    "ETHERNET",
    "WIFI",
    "Message",
    "MessageType",
    "NetworkProfile",
    "ProtocolError",
    "SimulatedLink",
    "StepRequest",
    "StepResult",
    "TaskKind",
    "decode",
    "encode",
    "get_profile",
    "simulated_send",
]
