from ..domain import VpcError


class TransportError(VpcError):
    pass


class UnknownPeer(TransportError, KeyError):
    def __init__(self, node: int) -> None:
        super().__init__(f"unknown peer NodeId {node}")
        self.node = node

    def __str__(self) -> str:
        return self.args[0]


class EndpointClosed(TransportError):
    def __init__(self, node: int) -> None:
        super().__init__(f"endpoint {node} closed")


class BindFailure(TransportError):
    pass


class LinkLayerUnavailable(TransportError):
    """Raw-frame access is not granted on this host."""
