import threading

import pytest
from hypothesis import given, strategies as st

from vpcsys.vpf import (
    LATEST,
    DescriptorDecodeError,
    DomainViolation,
    RegistryConflict,
    UnknownVpfKind,
    VpfDescriptor,
    VpfKind,
    VpfNotFound,
    VpfRegistry,
    VpfState,
    apply_vpf,
    decode_descriptor,
    encode_descriptor,
    run_chain,
)

INVERT = VpfDescriptor.make(1, 1, VpfKind.INVERT)
IDENTITY = VpfDescriptor.make(1, 2, VpfKind.IDENTITY)
COUNTER = VpfDescriptor.make(2, 1, VpfKind.RISING_EDGE_COUNTER)
bits = st.lists(st.integers(0, 1), max_size=50)


def test_invert_and_identity():
    assert apply_vpf(INVERT, VpfState(), 0)[0] == 1
    assert apply_vpf(IDENTITY, VpfState(), 1)[0] == 1


def test_rising_edge_counter():
    state = VpfState()
    for v in (0, 1, 1, 0, 1):
        _, state = apply_vpf(COUNTER, state, v)
    assert state.counter == 2


def test_domain_violation():
    with pytest.raises(DomainViolation):
        apply_vpf(INVERT, VpfState(), 2)


def test_unknown_kind():
    with pytest.raises(UnknownVpfKind):
        apply_vpf(VpfDescriptor(9, 1, 42), VpfState(), 0)


@given(bits)
def test_invert_twice_is_identity(inputs):
    chain = [(INVERT, VpfState()), (INVERT, VpfState())]
    for v in inputs:
        out, states = run_chain(chain, v)
        assert out == apply_vpf(IDENTITY, VpfState(), v)[0] == v
        chain = [(d, s) for (d, _), s in zip(chain, states)]


@given(bits)
def test_counter_matches_edge_count(inputs):
    state = VpfState()
    for v in inputs:
        _, state = apply_vpf(COUNTER, state, v)
    prev = [0] + inputs[:-1]
    assert state.counter == sum(1 for a, b in zip(prev, inputs) if a == 0 and b == 1)


descriptors = st.builds(
    VpfDescriptor.make,
    st.integers(0, 2**32 - 1),
    st.integers(1, 2**32 - 1),
    st.sampled_from(list(VpfKind)),
    params=st.dictionaries(st.text(max_size=10), st.text(max_size=10), max_size=3),
)


@given(descriptors)
def test_descriptor_round_trip(desc):
    data = encode_descriptor(desc)
    assert decode_descriptor(data) == (desc, len(data))


def test_descriptor_truncated():
    data = encode_descriptor(VpfDescriptor.make(1, 1, VpfKind.INVERT, params={"k": "v"}))
    with pytest.raises(DescriptorDecodeError):
        decode_descriptor(data[:-1])


def test_registry_put_get():
    reg = VpfRegistry()
    reg.put(INVERT)
    assert reg.get(1, 1) == INVERT


def test_registry_conflict():
    reg = VpfRegistry()
    reg.put(INVERT)
    reg.put(INVERT)  # identical content is idempotent
    with pytest.raises(RegistryConflict):
        reg.put(VpfDescriptor.make(1, 1, VpfKind.IDENTITY))


def test_registry_versions_and_latest():
    reg = VpfRegistry()
    reg.put(INVERT)
    reg.put(IDENTITY)
    assert reg.versions(1) == [1, 2]
    assert reg.get(1, 1) == INVERT and reg.get(1, 2) == IDENTITY
    assert reg.get(1, LATEST) == IDENTITY


def test_registry_not_found():
    with pytest.raises(VpfNotFound):
        VpfRegistry().get(99, 1)
    with pytest.raises(VpfNotFound):
        VpfRegistry().get(99)


def test_version_zero_reserved():
    with pytest.raises(ValueError):
        VpfRegistry().put(VpfDescriptor.make(1, 0, VpfKind.INVERT))


def test_registry_survives_restart(tmp_path):
    path = tmp_path / "vpf.db"
    reg = VpfRegistry(path)
    reg.put(INVERT)
    reg.put(IDENTITY)
    with open(path, "ab") as fh:
        fh.write(b"\x00\x00\x00\x40partial")  # torn tail write
    again = VpfRegistry(path)
    assert again.get(1, 1) == INVERT and again.versions(1) == [1, 2]


def test_concurrent_gets_identical():
    reg = VpfRegistry()
    reg.put(INVERT)
    seen = []
    threads = [threading.Thread(target=lambda: seen.append(encode_descriptor(reg.get(1, 1)))) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(set(seen)) == 1


@given(st.lists(st.tuples(st.integers(1, 3), st.integers(1, 3), st.sampled_from(list(VpfKind)))))
def test_registry_is_append_only(ops):
    reg = VpfRegistry()
    first = {}
    for vid, ver, kind in ops:
        desc = VpfDescriptor.make(vid, ver, kind)
        try:
            reg.put(desc)
        except RegistryConflict:
            assert first[(vid, ver)] != desc
        first.setdefault((vid, ver), desc)
        for key, d in first.items():
            assert reg.get(*key) == d
    assert len(reg) == len(first)
