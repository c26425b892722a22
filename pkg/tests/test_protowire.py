import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cxlsim.protowire import (
    Field,
    MessageSchema,
    WireFormatError,
    decode_message,
    decode_varint,
    decoded_image,
    encode_message,
    encode_varint,
    walk_stats,
)

# --- varint byte-level vectors ----------------------------------------------

def test_varint_hand_vectors():
    assert encode_varint(0) == b"\x00"
    assert encode_varint(1) == b"\x01"
    assert encode_varint(127) == b"\x7f"
    assert encode_varint(128) == b"\x80\x01"
    assert encode_varint(150) == b"\x96\x01"
    assert encode_varint(300) == b"\xac\x02"
    assert encode_varint(2**64 - 1) == b"\xff" * 9 + b"\x01"


def test_varint_decode_vectors():
    assert decode_varint(b"\x00") == (0, 1)
    assert decode_varint(b"\xac\x02") == (300, 2)
    assert decode_varint(b"\x96\x01tail") == (150, 2)
    assert decode_varint(b"\xff" * 9 + b"\x01") == (2**64 - 1, 10)


def test_varint_errors():
    with pytest.raises(WireFormatError):
        decode_varint(b"")  # empty
    with pytest.raises(WireFormatError):
        decode_varint(b"\x80")  # continuation bit with no next byte
    with pytest.raises(WireFormatError):
        decode_varint(b"\x80" * 10 + b"\x01")  # 11 bytes
    with pytest.raises(WireFormatError):
        decode_varint(b"\xff" * 9 + b"\x02")  # 10 bytes but > 2^64-1
    with pytest.raises(WireFormatError):
        encode_varint(-1)
    with pytest.raises(WireFormatError):
        encode_varint(1 << 64)


# --- field keys and message framing ------------------------------------------

INNER = MessageSchema("Inner", [Field(1, "uint"), Field(2, "bytes")])
OUTER = MessageSchema("Outer", [
    Field(1, "uint"),
    Field(2, "bytes"),
    Field(3, "msg", INNER),
    Field(4, "fixed64"),
    Field(5, "fixed32"),
])


def test_key_bytes():
    # field 1 varint -> (1<<3)|0 = 0x08; field 2 length-delimited -> 0x12
    assert encode_message(OUTER, [(1, 150)])[0] == 0x08
    assert encode_message(OUTER, [(2, b"hi")])[0] == 0x12
    assert encode_message(OUTER, [(1, 150)]) == b"\x08\x96\x01"


def test_nested_message_framing():
    # field 3 is length-delimited: key 0x1a, then len 3, then inner bytes
    wire = encode_message(OUTER, [(3, [(1, 150)])])
    assert wire == b"\x1a\x03\x08\x96\x01"
    assert decode_message(OUTER, wire) == [(3, [(1, 150)])]


def test_fixed_width_fields():
    wire = encode_message(OUTER, [(4, 0x0102030405060708), (5, 0xAABBCCDD)])
    assert wire == (b"\x21" + bytes([8, 7, 6, 5, 4, 3, 2, 1])
                    + b"\x2d" + bytes([0xDD, 0xCC, 0xBB, 0xAA]))
    assert decode_message(OUTER, wire) == [(4, 0x0102030405060708),
                                           (5, 0xAABBCCDD)]


def test_repeated_fields_and_order_preserved():
    msg = [(1, 5), (2, b"a"), (1, 6)]
    assert decode_message(OUTER, encode_message(OUTER, msg)) == msg


def test_strict_decode_unknown_field():
    # field 9 varint: key (9<<3)|0 = 0x48
    with pytest.raises(WireFormatError, match="unknown field 9"):
        decode_message(OUTER, b"\x48\x01")


def test_strict_decode_wire_type_mismatch():
    # field 1 declared varint, presented as length-delimited (key 0x0a)
    with pytest.raises(WireFormatError, match="wire type"):
        decode_message(OUTER, b"\x0a\x01\x00")


def test_decode_overrun_and_truncation():
    with pytest.raises(WireFormatError):
        decode_message(OUTER, b"\x12\x05ab")  # claims 5 bytes, has 2
    with pytest.raises(WireFormatError):
        decode_message(OUTER, b"\x21\x01\x02")  # fixed64 with 2 bytes
    with pytest.raises(WireFormatError):
        decode_message(OUTER, b"\x08")  # key without value


def test_encode_rejects_unknown_field():
    with pytest.raises(WireFormatError):
        encode_message(OUTER, [(9, 1)])


# --- decoded image and walk stats --------------------------------------------

def test_decoded_image_layout():
    msg = [(1, 300), (2, b"abc"), (5, 7)]
    img = decoded_image(OUTER, msg)
    assert img == ((300).to_bytes(8, "little")
                   + (3).to_bytes(4, "little") + b"abc"
                   + (7).to_bytes(4, "little"))


def test_decoded_image_nested():
    msg = [(3, [(1, 1)])]
    inner = (1).to_bytes(8, "little")
    assert decoded_image(OUTER, msg) == (8).to_bytes(4, "little") + inner


def test_walk_stats():
    msg = [(1, 300), (3, [(1, 1), (2, b"xy")]), (2, b"q")]
    stats = walk_stats(OUTER, msg)
    assert stats.fields == 5          # 3 outer + 2 inner
    assert stats.messages == 2
    assert stats.depth == 2
    assert stats.wire_bytes == len(encode_message(OUTER, msg))
    assert stats.image_bytes == len(decoded_image(OUTER, msg))


# --- property tests -----------------------------------------------------------

varints = st.one_of(
    st.integers(min_value=0, max_value=2**64 - 1),
    st.sampled_from([0, 1, 127, 128, 300, 2**32 - 1, 2**64 - 1]),
)


@given(varints)
def test_varint_roundtrip_property(v):
    assert decode_varint(encode_varint(v)) == (v, len(encode_varint(v)))


def _messages(depth):
    pair = st.one_of(
        st.tuples(st.just(1), varints),
        st.tuples(st.just(2), st.binary(max_size=40)),
        st.tuples(st.just(4), st.integers(0, 2**64 - 1)),
        st.tuples(st.just(5), st.integers(0, 2**32 - 1)),
    )
    if depth > 0:
        inner = st.lists(
            st.one_of(st.tuples(st.just(1), varints),
                      st.tuples(st.just(2), st.binary(max_size=20))),
            max_size=5).map(list)
        pair = st.one_of(pair, st.tuples(st.just(3), inner))
    return st.lists(pair, max_size=8).map(list)


@settings(max_examples=300, deadline=None)
@given(_messages(depth=1))
def test_message_roundtrip_property(msg):
    wire = encode_message(OUTER, msg)
    assert decode_message(OUTER, wire) == msg
    # byte-level: re-encoding the decode reproduces the wire exactly
    assert encode_message(OUTER, decode_message(OUTER, wire)) == wire
