import pytest
from hypothesis import given, strategies as st

from vpcsys import protocol as p
from vpcsys.domain import MessageLayer, MsgType
from vpcsys.vpf import VpfDescriptor, VpfKind

u32 = st.integers(0, 2**32 - 1)
u8 = st.integers(0, 255)
text = st.text(max_size=20)


def test_state_sync_layout():
    body = p.StateSyncPayload(42, (p.VpfSnapshot(1, 1, 3, 1),)).encode()
    # seq u32 | count u8 | vpf_id u32, version u32, counter u64, last_input u8
    assert body == bytes.fromhex("0000002a" "01" "00000001" "00000001" "0000000000000003" "01")


def test_handover_cmd_layout():
    assert p.HandoverCmdPayload(200, 7).encode() == bytes.fromhex("000000c8" "00000007")


def test_make_uses_default_layer():
    assert p.make(MsgType.SENSOR_INPUT, 1, b"\x00").layer == MessageLayer.DATA
    assert p.make(MsgType.HANDOVER_CMD, 1).layer == MessageLayer.CONTROL
    assert p.make(MsgType.DEPLOY_VPC, 1).layer == MessageLayer.MANAGEMENT


def test_read_bit_rejects_wrong_length():
    with pytest.raises(p.PayloadError):
        p.read_bit(p.make(MsgType.SENSOR_INPUT, 1, b""))
    assert p.read_bit(p.make(MsgType.SENSOR_INPUT, 1, b"\x01")) == 1


def test_state_sync_length_mismatch():
    body = p.StateSyncPayload(1, (p.VpfSnapshot(1, 1, 0, 0),)).encode()
    with pytest.raises(p.PayloadError):
        p.StateSyncPayload.decode(body[:-1])


def test_capability_reply_both_forms():
    reg = p.IrRegisterPayload(10, p.IrCapabilities(site="hall-B", supports_raw_frame=False))
    assert p.decode_capability_reply(p.encode_capability_reply(reg, 10)) == (True, reg, 10)
    assert p.decode_capability_reply(p.encode_capability_reply(None, 42)) == (False, None, 42)


def test_workflow_status_event():
    assert p.WorkflowStatusPayload(0, 0, "takeover:101").event() == ("takeover", 101)
    assert p.WorkflowStatusPayload(0, 0, "released").event() == ("released", None)


def test_lookup_is_distinguishable_from_assignment():
    lookup = p.VpfLookup(3, 1, 2).encode()
    assign = p.AssignVpfPayload(3, (VpfDescriptor.make(1, 2, VpfKind.IDENTITY),)).encode()
    assert p.VpfLookup.matches(lookup)
    assert not p.VpfLookup.matches(assign)


snapshots = st.builds(p.VpfSnapshot, u32, u32, st.integers(0, 2**64 - 1), st.integers(0, 1))
descriptors = st.builds(
    VpfDescriptor.make,
    u32,
    st.integers(1, 2**32 - 1),
    st.sampled_from(list(VpfKind)),
    params=st.dictionaries(text, text, max_size=3),
)

payloads = st.one_of(
    st.builds(p.StateSyncPayload, u32, st.lists(snapshots, max_size=5).map(tuple)),
    st.builds(p.SyncAckPayload, u32, st.sampled_from([p.SYNC_CONSISTENT, p.SYNC_ADOPTED, p.SYNC_AHEAD])),
    st.builds(p.HandoverCmdPayload, u32, u32),
    st.builds(p.HandoverAckPayload, u32, st.sampled_from([p.ACK_OK, p.ACK_REJECTED]), u32),
    st.builds(
        p.DeployVpcPayload,
        u32,
        u32,
        st.integers(0, 3),
        st.lists(st.tuples(u32, u32), max_size=4).map(tuple),
        st.lists(u32, max_size=3).map(tuple),
        st.integers(1, 65535),
        st.integers(1, 65535),
        st.integers(1, 2**32 - 1),
    ),
    st.builds(p.AssignVpfPayload, u32, st.lists(descriptors, max_size=3).map(tuple)),
    st.builds(p.VpfLookup, u32, u32, u32),
    st.builds(p.ReleaseClusterPayload, u32, u32),
    st.builds(p.ReconfigureRequestPayload, u32, u32, u32),
    st.builds(p.RedeployRequestPayload, u32, text),
    st.builds(p.WorkflowStatusPayload, u32, u8, text),
    st.builds(p.IrRegisterPayload, u32, st.builds(p.IrCapabilities, u32, u32, st.booleans(), text)),
)


@given(payloads)
def test_payload_round_trip(payload):
    assert type(payload).decode(payload.encode()) == payload


@given(st.integers(0, 2**64 - 1))
def test_probe_round_trip(t1):
    assert p.decode_probe(p.encode_probe(t1)) == t1
    assert p.decode_probe_reply(p.encode_probe_reply(t1, 5, 6)) == (t1, 5, 6)
