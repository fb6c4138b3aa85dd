"""Registry service: the VPF registry behind Management-layer messages.

An AssignVpf carrying descriptors stores them; a 12-byte AssignVpf
(workflow_id, vpf_id, version) is a lookup answered with the descriptor.
"""

from __future__ import annotations

import logging

from . import protocol as p
from .domain import MsgType
from .runtime import Actor
from .transport.wire import WireMessage
from .vpf import DescriptorDecodeError, RegistryConflict, VpfNotFound, VpfRegistry

log = logging.getLogger(__name__)


class RegistryService(Actor):
    def __init__(self, node_id: int, registry: VpfRegistry) -> None:
        self.node_id = node_id
        self.registry = registry

    def _reply(self, dest: int, t: MsgType, body: bytes, seq: int) -> None:
        self.send(dest, p.make(t, self.node_id, body, seq=seq, timestamp_ns=self.now()))

    def _status(self, dest: int, wf: int, detail: str, seq: int) -> None:
        self._reply(dest, MsgType.WORKFLOW_STATUS, p.WorkflowStatusPayload(wf, 0, detail).encode(), seq)

    def on_message(self, msg: WireMessage, sender: int) -> None:
        if msg.msg_type != MsgType.ASSIGN_VPF:
            return
        if p.VpfLookup.matches(msg.payload):
            q = p.VpfLookup.decode(msg.payload)
            try:
                desc = self.registry.get(q.vpf_id, q.version)
            except VpfNotFound:
                self._status(sender, q.workflow_id, f"not-found:{q.vpf_id}", msg.seq)
                return
            self._reply(sender, MsgType.ASSIGN_VPF, p.AssignVpfPayload(q.workflow_id, (desc,)).encode(), msg.seq)
            return
        try:
            a = p.AssignVpfPayload.decode(msg.payload)
        except (DescriptorDecodeError, p.PayloadError) as exc:
            log.warning("registry: bad AssignVpf from %d: %s", sender, exc)
            self._status(sender, 0, "malformed", msg.seq)
            return
        for d in a.descriptors:
            try:
                self.registry.put(d)
            except (RegistryConflict, ValueError) as exc:
                self._status(sender, a.workflow_id, f"conflict:{d.vpf_id}", msg.seq)
                log.warning("registry: %s", exc)
                return
        self._status(sender, a.workflow_id, f"stored:{len(a.descriptors)}", msg.seq)
