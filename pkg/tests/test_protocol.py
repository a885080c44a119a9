import io
import zlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmssd.swarm.protocol import (
    PROTOCOL_VERSION,
    ChecksumError,
    GetModel,
    ModelAnnouncement,
    ProtocolError,
    StateMessage,
    decode,
    encode,
    read_message,
)

u32 = st.integers(0, 2**32 - 1)
states = st.builds(StateMessage, u32, u32, u32, u32)
gets = st.builds(GetModel, st.none() | u32)
models = st.builds(ModelAnnouncement, u32, st.binary(max_size=2000))
messages = states | gets | models


def test_state_wire_format():
    assert encode(StateMessage(2, 17, 4, 9)) == b"STATE 1 2 17 4 9\n"
    assert decode(b"STATE 1 2 17 4 9\n") == StateMessage(2, 17, 4, 9)


def test_get_model_wire_format():
    assert encode(GetModel()) == b"GET MODEL\n"
    assert encode(GetModel(3)) == b"GET MODEL 3\n"


def test_model_wire_format():
    data = encode(ModelAnnouncement(5, b"abc"))
    assert data == b"MODEL 5 3 %d\nabc" % zlib.crc32(b"abc")


@settings(max_examples=300)
@given(messages)
def test_round_trip(msg):
    data = encode(msg)
    assert decode(data) == msg
    assert read_message(io.BytesIO(data)) == msg


@settings(max_examples=50)
@given(st.lists(messages, min_size=1, max_size=10))
def test_stream_of_messages(msgs):
    stream = io.BytesIO(b"".join(encode(m) for m in msgs))
    assert [read_message(stream) for _ in msgs] == msgs
    with pytest.raises(EOFError):
        read_message(stream)


@pytest.mark.parametrize("data", [
    b"",
    b"STATE 1 2 3 4 5",            # no newline
    b"STATE 1 2 3 4\n",            # missing field
    b"STATE 1 2 3 4 5 6\n",
    b"STATE 1 2 03 4 5\n",         # leading zero
    b"STATE 1 -2 3 4 5\n",
    b"STATE 1 2 3 4 5 \n",
    b"STATE 1  2 3 4 5\n",
    b"STATE 9 2 3 4 5\n",          # unsupported version
    b"STATE 1 2 3 4 5\nextra",
    b"state 1 2 3 4 5\n",
    b"GET\n",
    b"GET MODELS\n",
    b"GET MODEL x\n",
    b"MODEL 1 5 0\nabc",           # short payload
    b"MODEL 1 2\nab",
    b"HELLO\n",
    b"STATE " + b"1" * 300 + b" 2 3 4 5\n",
])
def test_rejects_malformed(data):
    with pytest.raises(ProtocolError):
        decode(data)


def test_checksum_mismatch():
    data = bytearray(encode(ModelAnnouncement(1, b"payload")))
    data[-1] ^= 0xFF
    with pytest.raises(ChecksumError):
        decode(bytes(data))
    ann = decode(bytes(data), verify=False)
    assert not ann.valid


def test_read_message_truncated_payload():
    with pytest.raises(ProtocolError):
        read_message(io.BytesIO(b"MODEL 1 10 0\nabc"))


@pytest.mark.parametrize("msg", [StateMessage(-1, 0, 0, 0), StateMessage(True, 0, 0, 0),
                                 GetModel(-3)])
def test_encode_rejects_bad_fields(msg):
    with pytest.raises(ProtocolError):
        encode(msg)


@settings(max_examples=1000)
@given(st.binary(max_size=64))
def test_fuzz_never_crashes(data):
    try:
        msg = decode(data)
    except ProtocolError:
        return
    assert encode(msg) == data


def test_version_constant():
    assert PROTOCOL_VERSION == 1
