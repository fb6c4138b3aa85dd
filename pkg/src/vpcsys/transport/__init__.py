"""One wire format over datagram, raw-frame and in-process channels."""

from __future__ import annotations

import enum

from .errors import BindFailure, EndpointClosed, LinkLayerUnavailable, TransportError, UnknownPeer
from .inproc import EventLoop, FaultPlan, InProcessEndpoint, InProcessNetwork, LatencyModel
from .sockets import (
    DatagramEndpoint,
    EndpointConfig,
    PeerAddress,
    RawFrameEndpoint,
    raw_frames_available,
)
from .wire import HEADER_LEN, MAX_PAYLOAD, DecodeError, EncodeError, WireMessage, decode, encode


class ChannelKind(enum.Enum):
    DATAGRAM = "udp"
    RAW_FRAME = "l2"
    IN_PROCESS = "inproc"


def open_endpoint(kind: ChannelKind, local: int, config: EndpointConfig):
    """Open an endpoint with send(dest, msg) and receive(timeout_ns)."""
    kind = ChannelKind(kind)
    if kind is ChannelKind.IN_PROCESS:
        if config.network is None:
            raise ValueError("in-process endpoints need config.network")
        return config.network.open(local)
    if kind is ChannelKind.DATAGRAM:
        return DatagramEndpoint(local, config)
    return RawFrameEndpoint(local, config)


__all__ = [
    "BindFailure",
    "ChannelKind",
    "DatagramEndpoint",
    "DecodeError",
    "EncodeError",
    "EndpointClosed",
    "EndpointConfig",
    "EventLoop",
    "FaultPlan",
    "HEADER_LEN",
    "InProcessEndpoint",
    "InProcessNetwork",
    "LatencyModel",
    "LinkLayerUnavailable",
    "MAX_PAYLOAD",
    "PeerAddress",
    "RawFrameEndpoint",
    "TransportError",
    "UnknownPeer",
    "WireMessage",
    "decode",
    "encode",
    "open_endpoint",
    "raw_frames_available",
]
