"""Virtual process functions: the built-in transfer functions and the
append-only registry that stores them by (vpf_id, version)."""

from __future__ import annotations

import enum
import os
import struct
import threading
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

from .domain import VpcError

LATEST = 0


class VpfMode(enum.IntEnum):
    CYCLIC = 0
    ACYCLIC = 1


class VpfKind(enum.IntEnum):
    INVERT = 0
    IDENTITY = 1
    RISING_EDGE_COUNTER = 2


class DomainViolation(VpcError, ValueError):
    def __init__(self, value: int) -> None:
        super().__init__(f"domain violation: input {value!r} not in {{0, 1}}")


class UnknownVpfKind(VpcError, ValueError):
    pass


class RegistryConflict(VpcError):
    pass


class VpfNotFound(VpcError, KeyError):
    def __str__(self) -> str:
        return self.args[0]


class DescriptorDecodeError(VpcError, ValueError):
    pass


@dataclass(frozen=True)
class VpfDescriptor:
    vpf_id: int
    version: int
    kind: Union[VpfKind, int]
    mode: VpfMode = VpfMode.CYCLIC
    params: Tuple[Tuple[str, str], ...] = ()

    @classmethod
    def make(
        cls,
        vpf_id: int,
        version: int,
        kind: Union[VpfKind, int],
        mode: VpfMode = VpfMode.CYCLIC,
        params: Optional[Mapping[str, str]] = None,
    ) -> "VpfDescriptor":
        return cls(vpf_id, version, kind, mode, tuple(sorted((params or {}).items())))

    @property
    def key(self) -> Tuple[int, int]:
        return (self.vpf_id, self.version)

    def param_dict(self) -> Dict[str, str]:
        return dict(self.params)


@dataclass(frozen=True)
class VpfState:
    counter: int = 0
    last_input: int = 0


def apply_vpf(desc: VpfDescriptor, state: VpfState, value: int) -> Tuple[int, VpfState]:
    if value not in (0, 1):
        raise DomainViolation(value)
    kind = desc.kind
    if kind == VpfKind.INVERT:
        return 1 - value, VpfState(state.counter, value)
    if kind == VpfKind.IDENTITY:
        return value, VpfState(state.counter, value)
    if kind == VpfKind.RISING_EDGE_COUNTER:
        counter = state.counter + (1 if state.last_input == 0 and value == 1 else 0)
        return value, VpfState(counter, value)
    raise UnknownVpfKind(f"unknown VPF kind {int(kind)}")


def run_chain(
    chain: Iterable[Tuple[VpfDescriptor, VpfState]], value: int
) -> Tuple[int, List[VpfState]]:
    """Feed value through the VPFs in order; returns final output and new states."""
    states = []
    for desc, state in chain:
        value, state = apply_vpf(desc, state, value)
        states.append(state)
    return value, states


# -- wire encoding -------------------------------------------------------

_HEAD = struct.Struct(">IIBBB")


def _pack_str(s: str) -> bytes:
    b = s.encode()
    return struct.pack(">H", len(b)) + b


def encode_descriptor(desc: VpfDescriptor) -> bytes:
    out = [_HEAD.pack(desc.vpf_id, desc.version, int(desc.mode), int(desc.kind), len(desc.params))]
    for k, v in desc.params:
        out.append(_pack_str(k))
        out.append(_pack_str(v))
    return b"".join(out)


def decode_descriptor(data: bytes, offset: int = 0) -> Tuple[VpfDescriptor, int]:
    """Decode one descriptor starting at offset; returns it and the end offset."""
    try:
        vpf_id, version, mode, kind, nparams = _HEAD.unpack_from(data, offset)
        pos = offset + _HEAD.size
        params = []
        for _ in range(nparams):
            items = []
            for _ in range(2):
                (n,) = struct.unpack_from(">H", data, pos)
                pos += 2
                if pos + n > len(data):
                    raise DescriptorDecodeError("truncated parameter string")
                items.append(bytes(data[pos : pos + n]).decode())
                pos += n
            params.append((items[0], items[1]))
    except struct.error as exc:
        raise DescriptorDecodeError(f"truncated descriptor: {exc}") from exc
    try:
        kind = VpfKind(kind)
    except ValueError:
        pass  # kept as int; apply_vpf rejects it
    try:
        mode = VpfMode(mode)
    except ValueError as exc:
        raise DescriptorDecodeError(f"bad mode {mode}") from exc
    return VpfDescriptor(vpf_id, version, kind, mode, tuple(params)), pos


# -- registry --------------------------------------------------------------


class VpfRegistry:
    """Append-only store; an optional record file makes it survive restarts."""

    def __init__(self, path: Optional[Union[str, os.PathLike]] = None) -> None:
        self.path = path
        self._lock = threading.Lock()
        self._store: Dict[Tuple[int, int], VpfDescriptor] = {}
        if path is not None and os.path.exists(path):
            with open(path, "rb") as fh:
                data = fh.read()
            pos = 0
            while pos + 4 <= len(data):
                (n,) = struct.unpack_from(">I", data, pos)
                if pos + 4 + n > len(data):
                    break  # torn tail write
                desc, _ = decode_descriptor(data[pos + 4 : pos + 4 + n])
                self._store[desc.key] = desc
                pos += 4 + n

    def put(self, desc: VpfDescriptor) -> Tuple[int, int]:
        if desc.version == LATEST:
            raise ValueError("version 0 is reserved for 'latest'")
        with self._lock:
            existing = self._store.get(desc.key)
            if existing is not None:
                if existing != desc:
                    raise RegistryConflict(
                        f"VPF {desc.vpf_id} version {desc.version} already stored with different content"
                    )
                return desc.key
            if self.path is not None:
                rec = encode_descriptor(desc)
                with open(self.path, "ab") as fh:
                    fh.write(struct.pack(">I", len(rec)) + rec)
                    fh.flush()
                    os.fsync(fh.fileno())
            self._store[desc.key] = desc
            return desc.key

    def get(self, vpf_id: int, version: int = LATEST) -> VpfDescriptor:
        if version == LATEST:
            versions = self.versions(vpf_id)
            if not versions:
                raise VpfNotFound(f"VPF {vpf_id} not found")
            version = versions[-1]
        try:
            return self._store[(vpf_id, version)]
        except KeyError:
            raise VpfNotFound(f"VPF {vpf_id} version {version} not found") from None

    def versions(self, vpf_id: int) -> List[int]:
        return sorted(v for (i, v) in list(self._store) if i == vpf_id)

    def __contains__(self, key: Tuple[int, int]) -> bool:
        return key in self._store

    def __len__(self) -> int:
        return len(self._store)
